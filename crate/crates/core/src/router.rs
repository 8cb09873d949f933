//! Phase router: goal-aligned observation encoding, temporal history LSTM,
//! deterministic expert selection, and the temporal-consistency machinery.
//!
//! Per step the router receives the frozen trunk's pooled observation
//! encoding and goal encoding, aligns the observation against the goal with
//! single-query cross-attention (residual), encodes a window of the last L
//! (action, observation-encoding) pairs with a 3-layer LSTM re-run from a
//! zero state, and maps the concatenation through an MLP to K logits. The
//! expert distribution is a temperature softmax; selection is argmax with
//! lowest-index tie-break.
//!
//! Training plumbing lives here too: the straight-through selection gate
//! (forward exactly 1, backward one-hot at the chosen expert), the switching
//! penalty (hard switch counts forward, soft-disagreement gradient backward,
//! one-sided: each step's distribution is pulled toward its detached
//! successor), the temperature anneal schedule, and the switch counter.

use crate::autodiff::{argmax, lstm_step, no_grad, Tensor};
use crate::params::ParamSet;
use crate::policy::gaussian_init;
use crate::rng::SeedStreams;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct RouterConfig {
    pub n_experts: usize,
    /// History window length L.
    pub window: usize,
    /// LSTM hidden width.
    pub hidden: usize,
    pub action_embed_dim: usize,
    pub mlp_hidden: usize,
    /// Ablation switches: disabled branches contribute zeros.
    pub use_history: bool,
    pub use_goal_attention: bool,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            n_experts: 4,
            window: 5,
            hidden: 64,
            action_embed_dim: 16,
            mlp_hidden: 64,
            use_history: true,
            use_goal_attention: true,
        }
    }
}

/// Linear temperature decay clamped at `tauf`.
#[derive(Debug, Clone)]
pub struct AnnealSchedule {
    pub tau0: f64,
    pub tauf: f64,
    pub t_anneal: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule { tau0: 2.0, tauf: 0.5, t_anneal: 3000.0 }
    }
}

impl AnnealSchedule {
    pub fn temperature(&self, t: f64) -> f64 {
        assert!(t >= 0.0, "schedule evaluated at negative step {t}");
        (self.tau0 - (self.tau0 - self.tauf) * t / self.t_anneal).max(self.tauf)
    }
}

struct LstmLayer {
    w_ih: Tensor, // [4h, in]
    w_hh: Tensor, // [4h, h]
    bias: Tensor, // [4h]
}

pub struct RouterParams {
    cfg: RouterConfig,
    d_in: usize,
    attn_q: Tensor, // [d, d]
    attn_k: Tensor,
    attn_v: Tensor,
    attn_o: Tensor,
    action_embed: Tensor, // [A+1, a_dim]; last row = episode start
    null_entry: Tensor,   // [a_dim + d] pad for short histories
    lstm: Vec<LstmLayer>, // 3 layers
    mlp_w1: Tensor, // [mlp_hidden, h + d]
    mlp_b1: Tensor,
    mlp_w2: Tensor, // [K, mlp_hidden]
    mlp_b2: Tensor,
}

/// Per-episode history buffer; reset at episode start, appended after each
/// action is taken (the step's own action is never visible to its routing).
#[derive(Clone)]
pub struct RouterState {
    entries: VecDeque<(usize, Tensor)>, // (action, observation encoding)
    window: usize,
    initialized: bool,
}

pub struct RouterOutput {
    /// Expert distribution (graph-connected when recording).
    pub p: Tensor,
    /// argmax(p), lowest index on ties.
    pub z: usize,
    pub tau_used: f64,
}

impl RouterParams {
    pub fn new(d_in: usize, action_count: usize, cfg: RouterConfig, rng: &mut ChaCha8Rng) -> Self {
        assert!(cfg.n_experts >= 1 && cfg.window >= 1);
        let d = d_in;
        let h = cfg.hidden;
        let a = cfg.action_embed_dim;
        let entry = a + d;
        let s = |n: usize| 1.0 / (n as f64).sqrt();
        let mut layers = Vec::new();
        for l in 0..3 {
            let in_dim = if l == 0 { entry } else { h };
            layers.push(LstmLayer {
                w_ih: gaussian_init(rng, &[4 * h, in_dim], s(in_dim)),
                w_hh: gaussian_init(rng, &[4 * h, h], s(h)),
                bias: Tensor::param(&[4 * h], vec![0.0; 4 * h]),
            });
        }
        RouterParams {
            d_in,
            attn_q: gaussian_init(rng, &[d, d], s(d)),
            attn_k: gaussian_init(rng, &[d, d], s(d)),
            attn_v: gaussian_init(rng, &[d, d], s(d)),
            attn_o: gaussian_init(rng, &[d, d], s(d)),
            action_embed: gaussian_init(rng, &[action_count + 1, a], 0.5),
            null_entry: gaussian_init(rng, &[entry], 0.1),
            lstm: layers,
            mlp_w1: gaussian_init(rng, &[cfg.mlp_hidden, h + d], s(h + d)),
            mlp_b1: Tensor::param(&[cfg.mlp_hidden], vec![0.0; cfg.mlp_hidden]),
            mlp_w2: gaussian_init(rng, &[cfg.n_experts, cfg.mlp_hidden], s(cfg.mlp_hidden)),
            mlp_b2: Tensor::param(&[cfg.n_experts], vec![0.0; cfg.n_experts]),
            cfg,
        }
    }

    pub fn config(&self) -> &RouterConfig {
        &self.cfg
    }

    pub fn start_episode(&self) -> RouterState {
        RouterState { entries: VecDeque::new(), window: self.cfg.window, initialized: true }
    }

    pub fn params(&self, set: &mut ParamSet, prefix: &str) {
        set.push(format!("{prefix}.attn.q"), self.attn_q.clone());
        set.push(format!("{prefix}.attn.k"), self.attn_k.clone());
        set.push(format!("{prefix}.attn.v"), self.attn_v.clone());
        set.push(format!("{prefix}.attn.o"), self.attn_o.clone());
        set.push(format!("{prefix}.action_embed"), self.action_embed.clone());
        set.push(format!("{prefix}.null_entry"), self.null_entry.clone());
        for (l, layer) in self.lstm.iter().enumerate() {
            set.push(format!("{prefix}.lstm{l}.w_ih"), layer.w_ih.clone());
            set.push(format!("{prefix}.lstm{l}.w_hh"), layer.w_hh.clone());
            set.push(format!("{prefix}.lstm{l}.bias"), layer.bias.clone());
        }
        set.push(format!("{prefix}.mlp.w1"), self.mlp_w1.clone());
        set.push(format!("{prefix}.mlp.b1"), self.mlp_b1.clone());
        set.push(format!("{prefix}.mlp.w2"), self.mlp_w2.clone());
        set.push(format!("{prefix}.mlp.b2"), self.mlp_b2.clone());
    }

    pub fn param_set(&self) -> ParamSet {
        let mut set = ParamSet::new();
        self.params(&mut set, "router");
        set
    }

    fn goal_aligned(&self, enc_obs: &Tensor, enc_goal: &Tensor) -> Tensor {
        if !self.cfg.use_goal_attention {
            return enc_obs.clone();
        }
        let q = self.attn_q.matvec(enc_obs);
        let keys = Tensor::stack_rows(&[self.attn_k.matvec(enc_goal)]);
        let values = Tensor::stack_rows(&[self.attn_v.matvec(enc_goal)]);
        let att = Tensor::cross_attention(&q, &keys, &values, 1.0 / (self.d_in as f64).sqrt());
        enc_obs.add(&self.attn_o.matvec(&att))
    }

    fn history_encoding(&self, state: &RouterState) -> Tensor {
        let h = self.cfg.hidden;
        if !self.cfg.use_history {
            return Tensor::zeros(&[h]);
        }
        let l = self.cfg.window;
        let pad = l - state.entries.len();
        let mut hs: Vec<Tensor> = (0..3).map(|_| Tensor::zeros(&[h])).collect();
        let mut cs = hs.clone();
        for slot in 0..l {
            let mut x = if slot < pad {
                self.null_entry.clone()
            } else {
                let (action, enc) = &state.entries[slot - pad];
                Tensor::concat(&[self.action_embed.row(*action), enc.clone()])
            };
            for (layer, (hl, cl)) in self.lstm.iter().zip(hs.iter_mut().zip(cs.iter_mut())) {
                let (h_next, c_next) = lstm_step(&x, hl, cl, &layer.w_ih, &layer.w_hh, &layer.bias);
                *hl = h_next.clone();
                *cl = c_next;
                x = h_next;
            }
        }
        hs.pop().unwrap()
    }

    /// Pre-softmax expert scores for one routing decision.
    pub fn logits(&self, state: &RouterState, enc_obs: &Tensor, enc_goal: &Tensor) -> Tensor {
        assert!(state.initialized, "router state used before start_episode");
        assert_eq!(enc_obs.shape(), &[self.d_in], "observation encoding width mismatch");
        let o_align = self.goal_aligned(enc_obs, enc_goal);
        let h_enc = self.history_encoding(state);
        let feat = Tensor::concat(&[h_enc, o_align]);
        let hidden = self.mlp_w1.matvec(&feat).add(&self.mlp_b1).relu();
        self.mlp_w2.matvec(&hidden).add(&self.mlp_b2)
    }

    /// One routing decision. `state` must come from `start_episode`; record
    /// the taken action afterwards with `RouterState::record`.
    pub fn route(&self, state: &RouterState, enc_obs: &Tensor, enc_goal: &Tensor, tau: f64) -> RouterOutput {
        let logits = self.logits(state, enc_obs, enc_goal);
        let p = logits.softmax_temperature(tau);
        let z = argmax(&p.values());
        RouterOutput { p, z, tau_used: tau }
    }

    /// Folds the negated per-expert mean logit over a calibration sample
    /// into the output bias, so that mean logits over the sample become
    /// zero. A freshly initialized router carries random per-expert logit
    /// offsets that are larger than the state-driven variation, which pins
    /// argmax to a single expert; centering makes early selection
    /// state-driven without touching the state-dependent weights.
    pub fn center_output_bias(&self, samples: &[(RouterState, Tensor, Tensor)]) {
        assert!(!samples.is_empty(), "bias centering over an empty sample");
        let k = self.cfg.n_experts;
        let mut mean = vec![0.0; k];
        no_grad(|| {
            for (state, enc_obs, enc_goal) in samples {
                let l = self.logits(state, enc_obs, enc_goal);
                for (m, v) in mean.iter_mut().zip(l.values()) {
                    *m += v;
                }
            }
        });
        let n = samples.len() as f64;
        let b2 = self.mlp_b2.values();
        self.mlp_b2.set_data(b2.iter().zip(&mean).map(|(b, m)| b - m / n).collect());
    }
}

impl RouterState {
    /// Append the step's (action, observation-encoding) pair after acting.
    pub fn record(&mut self, action: usize, enc_obs: Tensor) {
        assert!(self.initialized, "router state used before start_episode");
        self.entries.push_back((action, enc_obs));
        while self.entries.len() > self.window {
            self.entries.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Default for RouterState {
    /// An unusable placeholder; `route` rejects it until `start_episode`.
    fn default() -> Self {
        RouterState { entries: VecDeque::new(), window: 0, initialized: false }
    }
}

/// Straight-through selection: forward weight is exactly 1.0 so the chosen
/// expert's term enters the loss unscaled; backward routes the upstream
/// gradient into p at the selected index only, as if the weight were p[z].
pub fn straight_through_select(p: &Tensor) -> (usize, Tensor) {
    let z = argmax(&p.values());
    (z, straight_through_gate_at(p, z))
}

/// Straight-through gate pinned to a given index. Used when the selection
/// was made earlier (at rollout) and the recomputed distribution must be
/// gated at that same expert.
pub fn straight_through_gate_at(p: &Tensor, z: usize) -> Tensor {
    assert!(z < p.numel(), "gate index {z} out of range");
    let parent = p.clone();
    Tensor::from_op(&[1], vec![1.0], vec![p.clone()], move |out| {
        out.with_grad(|g| {
            let mut dp = vec![0.0; parent.numel()];
            dp[z] = g[0];
            parent.accumulate_grad(&dp);
        });
    })
}

/// Temporal-consistency penalty over one episode's routing distributions.
///
/// Forward: `lambda_s / (T-1) * Σ_t 1[argmax(p_t) != argmax(p_{t+1})]` —
/// hard switch counting, invariant to probability magnitudes. Backward uses
/// the soft disagreement `1 − Σ_k p_t[k]·p_{t+1}[k]` per consecutive pair,
/// one-sided: d/dp_t = −lambda_s/(T−1) · p_{t+1} with the successor
/// detached, so each step is pulled toward the distribution that followed
/// it. A single-step episode contributes a gradient-free zero.
pub fn switching_penalty(ps: &[Tensor], lambda_s: f64) -> Tensor {
    assert!(!ps.is_empty(), "switching penalty over an empty episode");
    let t_len = ps.len();
    if t_len == 1 {
        return Tensor::scalar(0.0);
    }
    let zs: Vec<usize> = ps.iter().map(|p| argmax(&p.values())).collect();
    let switches = count_switches(&zs);
    let coeff = lambda_s / (t_len - 1) as f64;
    let value = coeff * switches as f64;
    let successors: Vec<Vec<f64>> = ps[1..].iter().map(|p| p.values()).collect();
    let parents: Vec<Tensor> = ps.to_vec();
    let parents_cl = parents.clone();
    Tensor::from_op(&[1], vec![value], parents, move |out| {
        out.with_grad(|g| {
            for (t, parent) in parents_cl[..t_len - 1].iter().enumerate() {
                let dp: Vec<f64> = successors[t].iter().map(|pk| -coeff * pk * g[0]).collect();
                parent.accumulate_grad(&dp);
            }
        });
    })
}

/// Number of adjacent positions whose selected expert differs.
pub fn count_switches(zs: &[usize]) -> usize {
    assert!(!zs.is_empty(), "switch count of an empty sequence");
    zs.windows(2).filter(|w| w[0] != w[1]).count()
}

/// Deterministic per-run router construction.
pub fn seeded_router(d_in: usize, action_count: usize, cfg: RouterConfig, streams: &SeedStreams) -> RouterParams {
    let mut rng = streams.stream("router_init");
    RouterParams::new(d_in, action_count, cfg, &mut rng)
}
