//! Deterministic named RNG streams.
//!
//! A run owns one root seed; every consumer (environment layout, policy
//! init, rollout sampling, fault injection, ...) draws from its own named
//! stream so adding a consumer never perturbs the others. Stream seeds are
//! derived by hashing `(root, name, index)` with FNV-1a and expanding the
//! hash through splitmix64, which is stable across platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct SeedStreams {
    root: u64,
}

impl SeedStreams {
    pub fn new(root: u64) -> Self {
        SeedStreams { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Named stream, e.g. `"env"`, `"policy-init"`, `"rollout"`, `"fault"`.
    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        self.substream(name, 0)
    }

    /// Indexed variant for per-episode / per-trajectory streams.
    pub fn substream(&self, name: &str, index: u64) -> ChaCha8Rng {
        let mut h = fnv1a(FNV_OFFSET, &self.root.to_le_bytes());
        h = fnv1a(h, name.as_bytes());
        h = fnv1a(h, &index.to_le_bytes());
        let mut seed = [0u8; 32];
        let mut state = h;
        for chunk in seed.chunks_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }

    /// Deterministic u64 for the given name/index, for seeding environments.
    pub fn derive_u64(&self, name: &str, index: u64) -> u64 {
        let mut h = fnv1a(FNV_OFFSET, &self.root.to_le_bytes());
        h = fnv1a(h, name.as_bytes());
        h = fnv1a(h, &index.to_le_bytes());
        splitmix64(h)
    }
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(mut hash: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
