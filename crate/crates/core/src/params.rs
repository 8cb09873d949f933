//! Named parameter registry and bit-exact checkpoint serialization.
//!
//! Components register their trainable tensors under hierarchical names
//! (`"router.lstm0.w_ih"`, `"expert2.block1.lora_v_a"`). Checkpoints store
//! raw little-endian f64 bits, so save/load round-trips are exact.

use crate::autodiff::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint header")]
    BadHeader,
    #[error("checkpoint names do not match registry: {0}")]
    NameMismatch(String),
    #[error("shape mismatch for `{name}`: checkpoint {found:?}, registry {expected:?}")]
    ShapeMismatch { name: String, found: Vec<usize>, expected: Vec<usize> },
}

const MAGIC: &[u8] = b"PMOE-CKPT-v1\n";

#[derive(Default, Clone)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, t));
    }

    /// Merges `other` under `prefix.`.
    pub fn adopt(&mut self, prefix: &str, other: &ParamSet) {
        for (n, t) in &other.entries {
            self.push(format!("{prefix}.{n}"), t.clone());
        }
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    /// Concatenated gradient over all entries, zeros where untouched.
    pub fn flat_grad(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for (_, t) in &self.entries {
            t.with_grad(|g| out.extend_from_slice(g));
        }
        out
    }

    /// Overwrites the stored gradients from a flat vector (inverse of
    /// [`ParamSet::flat_grad`]); used by the gradient-surgery combiners.
    pub fn set_flat_grad(&self, flat: &[f64]) {
        assert_eq!(flat.len(), self.scalar_count(), "flat gradient length mismatch");
        let mut off = 0;
        for (_, t) in &self.entries {
            let n = t.numel();
            t.zero_grad();
            t.accumulate_grad(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u32).to_le_bytes())?;
            w.write_all(nb)?;
            let shape = t.shape();
            w.write_all(&(shape.len() as u8).to_le_bytes())?;
            for d in shape {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            t.with_data(|d| -> Result<(), CheckpointError> {
                for v in d {
                    w.write_all(&v.to_le_bytes())?;
                }
                Ok(())
            })?;
        }
        Ok(())
    }

    /// Loads values into the already-registered tensors. The checkpoint must
    /// carry exactly the same names and shapes (registry defines structure).
    pub fn load(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = vec![0u8; MAGIC.len()];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(CheckpointError::BadHeader);
        }
        let count = read_u32(&mut r)? as usize;
        if count != self.entries.len() {
            return Err(CheckpointError::NameMismatch(format!(
                "checkpoint has {count} tensors, registry has {}",
                self.entries.len()
            )));
        }
        for (name, t) in &self.entries {
            let nlen = read_u32(&mut r)? as usize;
            let mut nb = vec![0u8; nlen];
            r.read_exact(&mut nb)?;
            let found_name = String::from_utf8(nb).map_err(|_| CheckpointError::BadHeader)?;
            if found_name != *name {
                return Err(CheckpointError::NameMismatch(format!("expected `{name}`, found `{found_name}`")));
            }
            let mut ndim = [0u8; 1];
            r.read_exact(&mut ndim)?;
            let mut shape = Vec::with_capacity(ndim[0] as usize);
            for _ in 0..ndim[0] {
                shape.push(read_u64(&mut r)? as usize);
            }
            if shape != t.shape() {
                return Err(CheckpointError::ShapeMismatch { name: name.clone(), found: shape, expected: t.shape().to_vec() });
            }
            let mut data = vec![0.0f64; t.numel()];
            let mut buf = [0u8; 8];
            for v in &mut data {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            t.set_data(data);
        }
        Ok(())
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
