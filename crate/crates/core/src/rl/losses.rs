//! Loss pieces: clipped surrogate, expert-balance and expert-diversity
//! regularizers, and the per-expert state buffer feeding the diversity term.

use crate::autodiff::Tensor;
use crate::policy::MoEPolicy;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

/// Per-step negated clipped-surrogate terms:
/// `-min(rho * A, clip(rho, 1-eps, 1+eps) * A)` with `rho = exp(new - old)`.
/// Callers weight and average these (the router's straight-through gate
/// multiplies each step).
pub fn clipped_surrogate_terms(logp_new: &[Tensor], logp_old: &[f64], adv: &[f64], epsilon: f64) -> Vec<Tensor> {
    assert_eq!(logp_new.len(), logp_old.len());
    assert_eq!(logp_new.len(), adv.len());
    assert!(epsilon > 0.0 && epsilon < 1.0);
    logp_new
        .iter()
        .zip(logp_old.iter())
        .zip(adv.iter())
        .map(|((lp, old), a)| {
            let ratio = lp.add_scalar(-old).exp();
            let unclipped = ratio.scale(*a);
            let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon).scale(*a);
            unclipped.min_elem(&clipped).neg()
        })
        .collect()
}

/// Mean clipped-surrogate loss over a batch of steps.
pub fn clipped_surrogate(logp_new: &[Tensor], logp_old: &[f64], adv: &[f64], epsilon: f64) -> Tensor {
    let terms = clipped_surrogate_terms(logp_new, logp_old, adv, epsilon);
    assert!(!terms.is_empty(), "surrogate over an empty batch");
    Tensor::from_scalars(&terms).mean()
}

/// Router-collapse guard: squared deviation of soft expert frequencies from
/// uniform. `f` must be a distribution (batch mean of routing
/// probabilities).
pub fn balance_loss(f: &Tensor) -> Tensor {
    let k = f.numel();
    let sum: f64 = f.values().iter().sum();
    assert!((sum - 1.0).abs() < 1e-6, "expert frequencies sum to {sum}, expected 1");
    let dev = f.add_scalar(-1.0 / k as f64);
    dev.mul(&dev).sum()
}

/// A state snapshot an expert acted on; enough to recompute any expert's
/// distribution on it later.
#[derive(Debug, Clone)]
pub struct BufferedState {
    pub obs: Vec<f64>,
    pub goal: Vec<f64>,
    pub prev_action: Option<usize>,
}

/// Per-expert FIFO ring buffers of recently served states.
pub struct ExpertBuffer {
    per_expert: Vec<VecDeque<BufferedState>>,
    cap: usize,
}

impl ExpertBuffer {
    pub fn new(n_experts: usize, cap: usize) -> Self {
        assert!(cap > 0);
        ExpertBuffer { per_expert: (0..n_experts).map(|_| VecDeque::new()).collect(), cap }
    }

    pub fn push(&mut self, expert: usize, state: BufferedState) {
        let buf = &mut self.per_expert[expert];
        buf.push_back(state);
        while buf.len() > self.cap {
            buf.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.per_expert.iter().map(|b| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Uniform sample (without replacement) of up to `n` states pooled
    /// across experts; fewer than `n` stored → all of them, with a warning.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<BufferedState> {
        let total = self.len();
        let flat = || self.per_expert.iter().flatten();
        if total <= n {
            if total < n {
                eprintln!("warning: diversity sample wants {n} states, buffer holds {total}; using all");
            }
            return flat().cloned().collect();
        }
        // Floyd's algorithm over the flattened index space.
        let mut chosen = std::collections::BTreeSet::new();
        for j in (total - n)..total {
            let t = rng.gen_range(0..=j);
            if !chosen.insert(t) {
                chosen.insert(j);
            }
        }
        let all: Vec<&BufferedState> = flat().collect();
        chosen.into_iter().map(|i| all[i].clone()).collect()
    }
}

/// Hinge diversity loss over ordered expert pairs:
/// `sum_{i != j} mean_s max(0, tau_div - KL(pi_i(s) || pi_j(s)))`.
///
/// Distributions are recomputed with current expert parameters on the cached
/// states, so gradients reach the adapters only — the router never appears
/// in this graph.
pub fn diversity_loss(policy: &MoEPolicy, states: &[BufferedState], tau_div: f64) -> Tensor {
    let k = policy.n_experts();
    assert!(k >= 2, "diversity needs at least two experts");
    assert!(!states.is_empty(), "diversity over an empty state sample");
    let probs: Vec<Vec<Tensor>> = (0..k)
        .map(|e| {
            states
                .iter()
                .map(|s| policy.expert_forward(e, &s.obs, &s.goal, s.prev_action).probs())
                .collect()
        })
        .collect();
    let mut pair_terms = Vec::new();
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let per_state: Vec<Tensor> = (0..states.len())
                .map(|s| {
                    let kl = Tensor::kl_divergence(&probs[i][s], &probs[j][s]);
                    kl.neg().add_scalar(tau_div).relu()
                })
                .collect();
            pair_terms.push(Tensor::from_scalars(&per_state).mean());
        }
    }
    Tensor::from_scalars(&pair_terms).sum()
}
