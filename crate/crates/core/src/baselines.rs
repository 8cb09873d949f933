//! Comparison arms: token-level routing (with a top-2 variant), and the
//! gradient-surgery combiners used by the single-adapter baselines.
//!
//! Token-level routing emulates per-token expert selection for atomic
//! actions: each action is factored into `m` micro-tokens whose hidden
//! states are the pooled trunk encoding plus a learned positional embedding;
//! an MLP routes every micro-token independently and the action logits are
//! the expert logits mixed by token share. Trajectory-level routing needs no
//! machinery of its own — the trainer simply reuses the step-0 decision.

use crate::autodiff::{argmax, no_grad, Tensor};
use crate::params::ParamSet;
use crate::policy::{gaussian_init, MoEPolicy};
use crate::router::straight_through_gate_at;
use rand_chacha::ChaCha8Rng;

/// Independent per-micro-token expert selection.
pub struct TokenRouter {
    m: usize,
    n_experts: usize,
    pos_emb: Tensor, // [m, d]
    w1: Tensor,      // [hidden, d]
    b1: Tensor,
    w2: Tensor, // [K, hidden]
    b2: Tensor,
}

/// One action's routing: per-token distributions and hard selections.
pub struct TokenRouting {
    pub per_token_p: Vec<Tensor>,
    pub indices: Vec<usize>,
    /// Secondary selections for the top-2 variant (lowest index on ties).
    pub second: Vec<usize>,
}

impl TokenRouter {
    pub fn new(d_in: usize, m: usize, n_experts: usize, mlp_hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(m >= 1, "need at least one micro-token per action");
        assert!(n_experts >= 1);
        let s = |n: usize| 1.0 / (n as f64).sqrt();
        TokenRouter {
            m,
            n_experts,
            pos_emb: gaussian_init(rng, &[m, d_in], 0.5),
            w1: gaussian_init(rng, &[mlp_hidden, d_in], s(d_in)),
            b1: Tensor::param(&[mlp_hidden], vec![0.0; mlp_hidden]),
            w2: gaussian_init(rng, &[n_experts, mlp_hidden], s(mlp_hidden)),
            b2: Tensor::param(&[n_experts], vec![0.0; n_experts]),
        }
    }

    pub fn micro_tokens(&self) -> usize {
        self.m
    }

    pub fn params(&self, set: &mut ParamSet, prefix: &str) {
        set.push(format!("{prefix}.pos_emb"), self.pos_emb.clone());
        set.push(format!("{prefix}.w1"), self.w1.clone());
        set.push(format!("{prefix}.b1"), self.b1.clone());
        set.push(format!("{prefix}.w2"), self.w2.clone());
        set.push(format!("{prefix}.b2"), self.b2.clone());
    }

    pub fn param_set(&self) -> ParamSet {
        let mut set = ParamSet::new();
        self.params(&mut set, "token_router");
        set
    }

    /// Pre-softmax expert scores for one micro-token.
    fn token_logits(&self, pooled: &Tensor, token: usize) -> Tensor {
        let h = pooled.add(&self.pos_emb.row(token));
        let hidden = self.w1.matvec(&h).add(&self.b1).relu();
        self.w2.matvec(&hidden).add(&self.b2)
    }

    /// Folds the negated mean logit over a calibration sample (all tokens
    /// pooled) into the output bias, mirroring
    /// `RouterParams::center_output_bias`: fresh routers carry random
    /// per-expert offsets that pin every token's argmax to one expert.
    pub fn center_output_bias(&self, pooled_samples: &[Tensor]) {
        assert!(!pooled_samples.is_empty(), "bias centering over an empty sample");
        let mut mean = vec![0.0; self.n_experts];
        no_grad(|| {
            for pooled in pooled_samples {
                for i in 0..self.m {
                    let l = self.token_logits(pooled, i);
                    for (m, v) in mean.iter_mut().zip(l.values()) {
                        *m += v;
                    }
                }
            }
        });
        let n = (pooled_samples.len() * self.m) as f64;
        let b2 = self.b2.values();
        self.b2.set_data(b2.iter().zip(&mean).map(|(b, m)| b - m / n).collect());
    }

    /// Route all `m` micro-tokens of one action from the pooled encoding.
    pub fn route(&self, pooled: &Tensor) -> TokenRouting {
        let mut per_token_p = Vec::with_capacity(self.m);
        let mut indices = Vec::with_capacity(self.m);
        let mut second = Vec::with_capacity(self.m);
        for i in 0..self.m {
            let p = self.token_logits(pooled, i).softmax_temperature(1.0);
            let vals = p.values();
            let top = argmax(&vals);
            let runner = if self.n_experts == 1 {
                top
            } else {
                let mut best = usize::MAX;
                let mut best_v = f64::NEG_INFINITY;
                for (k, v) in vals.iter().enumerate() {
                    if k != top && *v > best_v {
                        best_v = *v;
                        best = k;
                    }
                }
                best
            };
            per_token_p.push(p);
            indices.push(top);
            second.push(runner);
        }
        TokenRouting { per_token_p, indices, second }
    }

    /// Mix per-expert action logits by micro-token share. Each token
    /// contributes `1/m` of the mixture through a straight-through gate, so
    /// the router trains from the action's policy-gradient term while the
    /// forward mixture weights are exactly the token counts. With `top2`,
    /// each token splits its share over its two best experts.
    pub fn mixed_action_logits(
        &self,
        policy: &MoEPolicy,
        routing: &TokenRouting,
        obs: &[f64],
        goal: &[f64],
        prev_action: Option<usize>,
        top2: bool,
    ) -> Tensor {
        let mut share: Vec<Vec<(usize, Tensor)>> = vec![Vec::new(); policy.n_experts()];
        for i in 0..self.m {
            if top2 && self.n_experts >= 2 {
                share[routing.indices[i]].push((i, straight_through_gate_at(&routing.per_token_p[i], routing.indices[i])));
                share[routing.second[i]].push((i, straight_through_gate_at(&routing.per_token_p[i], routing.second[i])));
            } else {
                share[routing.indices[i]].push((i, straight_through_gate_at(&routing.per_token_p[i], routing.indices[i])));
            }
        }
        let per_token = if top2 && self.n_experts >= 2 { 1.0 / (2.0 * self.m as f64) } else { 1.0 / self.m as f64 };
        let mut mixed: Option<Tensor> = None;
        for (expert, gates) in share.iter().enumerate() {
            if gates.is_empty() {
                continue;
            }
            let coeff = Tensor::from_scalars(&gates.iter().map(|(_, g)| g.clone()).collect::<Vec<_>>())
                .sum()
                .scale(per_token);
            let logits = policy.expert_forward(expert, obs, goal, prev_action).logits;
            let term = logits.scale_by(&coeff);
            mixed = Some(match mixed {
                None => term,
                Some(acc) => acc.add(&term),
            });
        }
        mixed.expect("at least one expert receives tokens")
    }
}

/// Step-level switch conversion for token routing: a step counts as a
/// switch when any two of its micro-tokens chose different experts.
pub fn token_to_step_switches(per_step_indices: &[Vec<usize>]) -> usize {
    per_step_indices.iter().filter(|toks| toks.iter().any(|k| *k != toks[0])).count()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// PCGrad: project every gradient off each conflicting peer (fixed order),
/// then sum. Zero-norm peers are skipped.
pub fn pcgrad_combine(grads: &[Vec<f64>]) -> Vec<f64> {
    assert!(!grads.is_empty());
    let dim = grads[0].len();
    assert!(grads.iter().all(|g| g.len() == dim), "gradient dimension mismatch");
    let mut combined = vec![0.0; dim];
    for (i, gi) in grads.iter().enumerate() {
        let mut proj = gi.clone();
        for (j, gj) in grads.iter().enumerate() {
            if i == j {
                continue;
            }
            let nj = dot(gj, gj);
            if nj == 0.0 {
                continue;
            }
            let ip = dot(&proj, gj);
            if ip < 0.0 {
                let s = ip / nj;
                for (p, g) in proj.iter_mut().zip(gj.iter()) {
                    *p -= s * g;
                }
            }
        }
        for (c, p) in combined.iter_mut().zip(proj.iter()) {
            *c += p;
        }
    }
    combined
}

/// Stateless GradNorm weighting: the relative inverse training rate
/// `r_i = (L_i / mean(L))^asymmetry` sets a per-phase norm target
/// `mean(norm) * r_i`; weights are `target / norm`, renormalized to sum to
/// the number of phases. Callers tracking initial losses can pass loss
/// ratios `L_i / L_i(0)` instead of raw losses.
pub fn gradnorm_weights(losses: &[f64], grad_norms: &[f64], asymmetry: f64) -> Vec<f64> {
    assert_eq!(losses.len(), grad_norms.len());
    assert!(!losses.is_empty());
    assert!(grad_norms.iter().all(|n| *n > 0.0), "gradient norms must be positive");
    let n = losses.len();
    if n == 1 {
        return vec![1.0];
    }
    let mean_loss = losses.iter().map(|l| l.abs()).sum::<f64>() / n as f64;
    let mean_norm = grad_norms.iter().sum::<f64>() / n as f64;
    let raw: Vec<f64> = losses
        .iter()
        .zip(grad_norms.iter())
        .map(|(l, g)| {
            let r = if mean_loss > 0.0 { (l.abs() / mean_loss).powf(asymmetry) } else { 1.0 };
            mean_norm * r / g
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|w| w * n as f64 / sum).collect()
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(w: &[f64]) -> Vec<f64> {
    let n = w.len();
    let mut sorted = w.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut acc = 0.0;
    let mut theta = 0.0;
    for (i, v) in sorted.iter().enumerate() {
        acc += v;
        let t = (acc - 1.0) / (i + 1) as f64;
        if i + 1 == n || sorted[i + 1] <= t {
            theta = t;
            if i + 1 < n && sorted[i + 1] > t {
                continue;
            }
            break;
        }
    }
    w.iter().map(|v| (v - theta).max(0.0)).collect()
}

/// CAGrad: conflict-averse combination. Solves
/// `min_{w in simplex} g_w . g_0 + c * |g_0| * |g_w|` by projected gradient
/// descent, then returns `g_0 + c * |g_0| * g_w / |g_w|`, rescaled to
/// `|g_0|`. Identical inputs return that gradient; `c = 0` returns the plain
/// average.
pub fn cagrad_combine(grads: &[Vec<f64>], c: f64) -> Vec<f64> {
    assert!(!grads.is_empty());
    assert!(c >= 0.0);
    let n = grads.len();
    let dim = grads[0].len();
    assert!(grads.iter().all(|g| g.len() == dim), "gradient dimension mismatch");
    let mut g0 = vec![0.0; dim];
    for g in grads {
        for (a, b) in g0.iter_mut().zip(g.iter()) {
            *a += b / n as f64;
        }
    }
    let g0_norm = norm(&g0);
    if n == 1 || c == 0.0 || g0_norm == 0.0 {
        return g0;
    }

    // Gram matrix makes the subproblem n-dimensional regardless of dim.
    let gram: Vec<Vec<f64>> = grads.iter().map(|gi| grads.iter().map(|gj| dot(gi, gj)).collect()).collect();
    let g0_dots: Vec<f64> = grads.iter().map(|gi| dot(gi, &g0)).collect();
    let objective_grad = |w: &[f64]| -> Vec<f64> {
        let gw_norm_sq: f64 =
            (0..n).map(|i| (0..n).map(|j| w[i] * w[j] * gram[i][j]).sum::<f64>()).sum();
        let gw_norm = gw_norm_sq.max(1e-18).sqrt();
        (0..n)
            .map(|i| g0_dots[i] + c * g0_norm * (0..n).map(|j| w[j] * gram[i][j]).sum::<f64>() / gw_norm)
            .collect()
    };
    let mut w = vec![1.0 / n as f64; n];
    let scale = gram.iter().enumerate().map(|(i, r)| r[i]).fold(0.0, f64::max).max(1e-12);
    for it in 0..3000 {
        let grad_w = objective_grad(&w);
        let step = 0.5 / (scale * (1.0 + it as f64).sqrt());
        let stepped: Vec<f64> = w.iter().zip(grad_w.iter()).map(|(wi, gi)| wi - step * gi).collect();
        w = project_simplex(&stepped);
    }

    let mut gw = vec![0.0; dim];
    for (wi, g) in w.iter().zip(grads.iter()) {
        for (a, b) in gw.iter_mut().zip(g.iter()) {
            *a += wi * b;
        }
    }
    let gw_norm = norm(&gw);
    let mut d = g0.clone();
    if gw_norm > 1e-12 {
        let s = c * g0_norm / gw_norm;
        for (a, b) in d.iter_mut().zip(gw.iter()) {
            *a += s * b;
        }
    }
    let d_norm = norm(&d);
    if d_norm > 0.0 {
        let s = g0_norm / d_norm;
        for a in d.iter_mut() {
            *a *= s;
        }
    }
    d
}
