//! Mixture-of-experts policy: frozen transformer backbone + LoRA adapters.
//!
//! The backbone embeds each observation feature group, the goal vector, and
//! the previous action as tokens, runs them through two attention blocks of
//! width `d_model`, mean-pools, and maps to action logits. Each of the K
//! experts is a rank-`r` additive delta `B·A` on the query and value
//! projections of every block (applied directly, no alpha/r scaling); B
//! starts at zero so every expert is initially the backbone itself, and the
//! adapter sets are disjoint so updating one expert can never move another.
//!
//! After behavioral-cloning warm-up the backbone is frozen: its tensors are
//! replaced by constants, leaving the adapters, the value head, and the
//! router as the only trainable parameters.

use crate::autodiff::Tensor;
use crate::env::Environment;
use crate::params::ParamSet;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Architecture knobs for the policy stack. Serves as the `[policy]` block
/// of experiment configs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub rank: usize,
    pub n_experts: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { d_model: 64, n_blocks: 2, rank: 8, n_experts: 4 }
    }
}

/// Gaussian parameter tensor via Box-Muller; shared by policy and router inits.
pub fn gaussian_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        data.push(r * c * std);
        if data.len() < n {
            data.push(r * s * std);
        }
    }
    Tensor::param(&shape, data)
}

struct Block {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl Block {
    fn new(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        Block {
            wq: gaussian_init(rng, &[d, d], s),
            wk: gaussian_init(rng, &[d, d], s),
            wv: gaussian_init(rng, &[d, d], s),
            wo: gaussian_init(rng, &[d, d], s),
            w1: gaussian_init(rng, &[d, 2 * d], s),
            b1: Tensor::param(&[2 * d], vec![0.0; 2 * d]),
            w2: gaussian_init(rng, &[2 * d, d], 1.0 / (2.0 * d as f64).sqrt()),
            b2: Tensor::param(&[d], vec![0.0; d]),
        }
    }
}

/// Shared trunk; frozen after warm-up.
pub struct Backbone {
    d: usize,
    obs_groups: Vec<usize>,
    action_count: usize,
    group_embed: Vec<(Tensor, Tensor)>, // per group: W [d, g], b [d]
    goal_embed: (Tensor, Tensor),
    action_tokens: Tensor, // [A+1, d]; last row = "no previous action"
    blocks: Vec<Block>,
    head_w: Tensor, // [A, d]
    head_b: Tensor, // [A]
    frozen: bool,
}

/// One expert: rank-r deltas on each block's query and value projections.
pub struct LoraExpert {
    q: Vec<(Tensor, Tensor)>, // per block: (B [d, r], A [r, d])
    v: Vec<(Tensor, Tensor)>,
}

impl LoraExpert {
    fn new(d: usize, r: usize, n_blocks: usize, rng: &mut ChaCha8Rng) -> Self {
        let make = |rng: &mut ChaCha8Rng| {
            (Tensor::param(&[d, r], vec![0.0; d * r]), gaussian_init(rng, &[r, d], 0.02))
        };
        LoraExpert {
            q: (0..n_blocks).map(|_| make(rng)).collect(),
            v: (0..n_blocks).map(|_| make(rng)).collect(),
        }
    }

    fn params(&self, set: &mut ParamSet, prefix: &str) {
        for (b, (bq, aq)) in self.q.iter().enumerate() {
            set.push(&format!("{prefix}.block{b}.q_proj.b"), bq.clone());
            set.push(&format!("{prefix}.block{b}.q_proj.a"), aq.clone());
        }
        for (b, (bv, av)) in self.v.iter().enumerate() {
            set.push(&format!("{prefix}.block{b}.v_proj.b"), bv.clone());
            set.push(&format!("{prefix}.block{b}.v_proj.a"), av.clone());
        }
    }
}

/// Critic head on the frozen trunk's pooled features; stays trainable.
pub struct ValueHead {
    w: Tensor, // [d]
    b: Tensor, // [1]
}

impl ValueHead {
    fn new(d: usize, rng: &mut ChaCha8Rng) -> Self {
        ValueHead { w: gaussian_init(rng, &[d], 1.0 / (d as f64).sqrt()), b: Tensor::param(&[1], vec![0.0]) }
    }

    pub fn value(&self, pooled: &Tensor) -> Tensor {
        self.w.dot(pooled).add(&self.b.index(0))
    }

    pub fn params(&self, set: &mut ParamSet, prefix: &str) {
        set.push(&format!("{prefix}.w"), self.w.clone());
        set.push(&format!("{prefix}.b"), self.b.clone());
    }
}

/// Everything a single forward pass produces.
pub struct ForwardOut {
    /// Final hidden states, one row per token.
    pub hidden: Tensor,
    /// Mean over all token rows (action-head input).
    pub pooled: Tensor,
    /// Mean over the observation-group token rows (router Enc(o)).
    pub obs_pooled: Tensor,
    /// Goal token row (router Enc(g)).
    pub goal_hidden: Tensor,
    pub logits: Tensor,
}

/// Categorical policy output, kept as logits so callers choose the graph.
pub struct ActionDistribution {
    pub logits: Tensor,
}

impl ActionDistribution {
    pub fn probs(&self) -> Tensor {
        self.logits.softmax_temperature(1.0)
    }

    pub fn log_prob(&self, action: usize) -> Tensor {
        self.logits.log_softmax().index(action)
    }

    /// Shannon entropy in bits (plain number, not part of any graph).
    pub fn entropy_bits(&self) -> f64 {
        entropy_bits(&self.probs().values())
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let p = self.probs().values();
        let mut u: f64 = rng.gen_range(0.0..1.0);
        for (i, pi) in p.iter().enumerate() {
            if u < *pi {
                return i;
            }
            u -= pi;
        }
        p.len() - 1
    }
}

/// Entropy of a probability vector in bits; zero entries contribute zero.
pub fn entropy_bits(p: &[f64]) -> f64 {
    -p.iter().filter(|x| **x > 0.0).map(|x| x * x.log2()).sum::<f64>()
}

pub struct MoEPolicy {
    pub backbone: Backbone,
    pub experts: Vec<LoraExpert>,
    pub value_head: ValueHead,
    cfg: PolicyConfig,
}

impl Backbone {
    fn new(obs_groups: &[usize], goal_dim: usize, action_count: usize, cfg: &PolicyConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        Backbone {
            d,
            obs_groups: obs_groups.to_vec(),
            action_count,
            group_embed: obs_groups
                .iter()
                .map(|g| (gaussian_init(rng, &[d, *g], 1.0 / (*g as f64).sqrt()), Tensor::param(&[d], vec![0.0; d])))
                .collect(),
            goal_embed: (
                gaussian_init(rng, &[d, goal_dim], 1.0 / (goal_dim as f64).sqrt()),
                Tensor::param(&[d], vec![0.0; d]),
            ),
            action_tokens: gaussian_init(rng, &[action_count + 1, d], 1.0 / (d as f64).sqrt()),
            blocks: (0..cfg.n_blocks).map(|_| Block::new(d, rng)).collect(),
            head_w: gaussian_init(rng, &[action_count, d], 1.0 / (d as f64).sqrt()),
            head_b: Tensor::param(&[action_count], vec![0.0; action_count]),
            frozen: false,
        }
    }

    pub fn d_model(&self) -> usize {
        self.d
    }

    pub fn n_tokens(&self) -> usize {
        self.obs_groups.len() + 2
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn params(&self, set: &mut ParamSet, prefix: &str) {
        for (i, (w, b)) in self.group_embed.iter().enumerate() {
            set.push(&format!("{prefix}.group_embed{i}.w"), w.clone());
            set.push(&format!("{prefix}.group_embed{i}.b"), b.clone());
        }
        set.push(&format!("{prefix}.goal_embed.w"), self.goal_embed.0.clone());
        set.push(&format!("{prefix}.goal_embed.b"), self.goal_embed.1.clone());
        set.push(&format!("{prefix}.action_tokens"), self.action_tokens.clone());
        for (i, bl) in self.blocks.iter().enumerate() {
            set.push(&format!("{prefix}.block{i}.q_proj"), bl.wq.clone());
            set.push(&format!("{prefix}.block{i}.k_proj"), bl.wk.clone());
            set.push(&format!("{prefix}.block{i}.v_proj"), bl.wv.clone());
            set.push(&format!("{prefix}.block{i}.o_proj"), bl.wo.clone());
            set.push(&format!("{prefix}.block{i}.ff.w1"), bl.w1.clone());
            set.push(&format!("{prefix}.block{i}.ff.b1"), bl.b1.clone());
            set.push(&format!("{prefix}.block{i}.ff.w2"), bl.w2.clone());
            set.push(&format!("{prefix}.block{i}.ff.b2"), bl.b2.clone());
        }
        set.push(&format!("{prefix}.head.w"), self.head_w.clone());
        set.push(&format!("{prefix}.head.b"), self.head_b.clone());
    }

    /// Replace every backbone tensor with a constant carrying the same data.
    /// From here on, no graph reaches the trunk and no optimizer can move it.
    pub fn freeze(&mut self) {
        let freeze = |t: &Tensor| Tensor::constant(t.shape(), t.values());
        for (w, b) in self.group_embed.iter_mut() {
            *w = freeze(w);
            *b = freeze(b);
        }
        self.goal_embed.0 = freeze(&self.goal_embed.0);
        self.goal_embed.1 = freeze(&self.goal_embed.1);
        self.action_tokens = freeze(&self.action_tokens);
        for bl in self.blocks.iter_mut() {
            bl.wq = freeze(&bl.wq);
            bl.wk = freeze(&bl.wk);
            bl.wv = freeze(&bl.wv);
            bl.wo = freeze(&bl.wo);
            bl.w1 = freeze(&bl.w1);
            bl.b1 = freeze(&bl.b1);
            bl.w2 = freeze(&bl.w2);
            bl.b2 = freeze(&bl.b2);
        }
        self.head_w = freeze(&self.head_w);
        self.head_b = freeze(&self.head_b);
        self.frozen = true;
    }

    fn tokens(&self, obs: &[f64], goal: &[f64], prev_action: Option<usize>) -> Tensor {
        assert_eq!(obs.len(), self.obs_groups.iter().sum::<usize>(), "observation length mismatch");
        let mut rows = Vec::with_capacity(self.n_tokens());
        let mut start = 0;
        for (g, (w, b)) in self.obs_groups.iter().zip(self.group_embed.iter()) {
            let x = Tensor::constant(&[*g], obs[start..start + g].to_vec());
            rows.push(w.matvec(&x).add(b));
            start += g;
        }
        let gx = Tensor::constant(&[goal.len()], goal.to_vec());
        rows.push(self.goal_embed.0.matvec(&gx).add(&self.goal_embed.1));
        let row = match prev_action {
            Some(a) => {
                assert!(a < self.action_count, "previous action out of range");
                a
            }
            None => self.action_count,
        };
        rows.push(self.action_tokens.row(row));
        Tensor::stack_rows(&rows)
    }

    fn forward_from_tokens(&self, mut x: Tensor, adapter: Option<&LoraExpert>) -> ForwardOut {
        let scale = 1.0 / (self.d as f64).sqrt();
        for (i, bl) in self.blocks.iter().enumerate() {
            let mut q = x.matmul(&bl.wq);
            let mut v = x.matmul(&bl.wv);
            if let Some(ex) = adapter {
                let (bq, aq) = &ex.q[i];
                let (bv, av) = &ex.v[i];
                q = q.add(&x.matmul(bq).matmul(aq));
                v = v.add(&x.matmul(bv).matmul(av));
            }
            let k = x.matmul(&bl.wk);
            let weights = q.matmul_nt(&k).scale(scale).softmax_rows(1.0);
            x = x.add(&weights.matmul(&v).matmul(&bl.wo));
            let ff = x.matmul(&bl.w1).add_row_broadcast(&bl.b1).relu().matmul(&bl.w2).add_row_broadcast(&bl.b2);
            x = x.add(&ff);
        }
        let pooled = x.mean_rows_range(0, self.n_tokens());
        let obs_pooled = x.mean_rows_range(0, self.obs_groups.len());
        let goal_hidden = x.row(self.obs_groups.len());
        let logits = self.head_w.matvec(&pooled).add(&self.head_b);
        ForwardOut { hidden: x, pooled, obs_pooled, goal_hidden, logits }
    }

    pub fn forward(&self, obs: &[f64], goal: &[f64], prev_action: Option<usize>, adapter: Option<&LoraExpert>) -> ForwardOut {
        self.forward_from_tokens(self.tokens(obs, goal, prev_action), adapter)
    }
}

impl MoEPolicy {
    pub fn new(obs_groups: &[usize], goal_dim: usize, action_count: usize, cfg: PolicyConfig, rng: &mut ChaCha8Rng) -> Self {
        assert!(cfg.n_experts >= 1, "policy needs at least one adapter");
        let backbone = Backbone::new(obs_groups, goal_dim, action_count, &cfg, rng);
        let experts =
            (0..cfg.n_experts).map(|_| LoraExpert::new(cfg.d_model, cfg.rank, cfg.n_blocks, rng)).collect();
        let value_head = ValueHead::new(cfg.d_model, rng);
        MoEPolicy { backbone, experts, value_head, cfg }
    }

    pub fn for_env(env: &dyn Environment, cfg: PolicyConfig, rng: &mut ChaCha8Rng) -> Self {
        Self::new(&env.obs_groups(), env.goal_dim(), env.action_count(), cfg, rng)
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    /// Forward through the backbone with expert k's adapter engaged.
    pub fn expert_forward(&self, k: usize, obs: &[f64], goal: &[f64], prev_action: Option<usize>) -> ActionDistribution {
        assert!(k < self.experts.len(), "expert index {k} out of range (K={})", self.experts.len());
        ActionDistribution { logits: self.backbone.forward(obs, goal, prev_action, Some(&self.experts[k])).logits }
    }

    /// Adapter-free forward; the router and critic read from this pass.
    pub fn base_forward(&self, obs: &[f64], goal: &[f64], prev_action: Option<usize>) -> ForwardOut {
        self.backbone.forward(obs, goal, prev_action, None)
    }

    pub fn expert_params(&self, k: usize) -> ParamSet {
        let mut set = ParamSet::new();
        self.experts[k].params(&mut set, &format!("expert{k}"));
        set
    }

    pub fn all_expert_params(&self) -> ParamSet {
        let mut set = ParamSet::new();
        for (k, ex) in self.experts.iter().enumerate() {
            ex.params(&mut set, &format!("expert{k}"));
        }
        set
    }

    pub fn value_params(&self) -> ParamSet {
        let mut set = ParamSet::new();
        self.value_head.params(&mut set, "value_head");
        set
    }

    pub fn backbone_params(&self) -> ParamSet {
        let mut set = ParamSet::new();
        self.backbone.params(&mut set, "backbone");
        set
    }
}
