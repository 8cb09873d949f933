//! The combined training step: grouped rollouts, advantage estimation,
//! straight-through routing gradients, the regularizer stack, and lazy-Adam
//! updates — plus the behavior-cloning warm-up that precedes RL and the
//! probes (gradient conflict, expert similarity) the analyses feed on.
//!
//! Training granularity: one *batch* collects `groups_per_batch` trajectory
//! groups (each `n_group` episodes sharing a layout seed), then runs one
//! epoch of whole-trajectory minibatches. Every minibatch is one optimizer
//! update and increments the training-step counter that paces the diversity
//! loss and the conflict probe. Rollouts record everything needed to replay
//! routing decisions differentiably at update time; the rollout itself
//! builds no graph.

use crate::autodiff::{no_grad, Tensor};
use crate::baselines::{cagrad_combine, gradnorm_weights, pcgrad_combine, token_to_step_switches, TokenRouter, TokenRouting};
use crate::env::{Environment, Phase, TaskCategory};
use crate::metrics::gradient_conflict_score;
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::policy::{ActionDistribution, MoEPolicy};
use crate::rl::advantages::{gae_advantages, gigpo_advantages, grpo_advantages, rloo_advantages};
use crate::rl::losses::{balance_loss, clipped_surrogate_terms, diversity_loss, BufferedState, ExpertBuffer};
use crate::rl::{Algorithm, RoutingMode, SurgeryMode};
use crate::rng::SeedStreams;
use crate::router::{count_switches, straight_through_gate_at, switching_penalty, AnnealSchedule, RouterParams};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Everything the combined step needs to know. Serves as the `[algorithm]` +
/// `[training]` blocks of experiment configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub algorithm: Algorithm,
    pub routing: RoutingMode,
    pub surgery: SurgeryMode,
    /// Trajectories per group (groups share a layout seed).
    pub n_group: usize,
    pub groups_per_batch: usize,
    /// Trajectories per optimizer update.
    pub minibatch_trajectories: usize,
    pub epsilon: f64,
    pub discount: f64,
    pub gae_lambda: f64,
    /// Diversity coefficient.
    pub alpha: f64,
    /// Balance coefficient.
    pub beta: f64,
    /// Switching-penalty coefficient (on top of `lambda_s` inside the term).
    pub gamma_coeff: f64,
    pub lambda_s: f64,
    pub tau_div: f64,
    /// Apply the diversity loss on the first optimizer update after every
    /// this many environment steps (0 disables it). At the default batch
    /// sizes this fires about once per batch.
    pub div_interval: usize,
    pub div_sample: usize,
    pub buffer_cap: usize,
    /// Standardize group advantages by the population std.
    pub standardize: bool,
    pub lr: f64,
    pub critic_lr: f64,
    /// Run the gradient-conflict probe every this many optimizer updates
    /// (0 disables it).
    pub conflict_interval: usize,
    /// Per-phase step cap inside a conflict probe.
    pub conflict_probe_cap: usize,
    pub cagrad_c: f64,
    pub gradnorm_asymmetry: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            algorithm: Algorithm::Gigpo,
            routing: RoutingMode::Phase,
            surgery: SurgeryMode::Off,
            n_group: 8,
            groups_per_batch: 4,
            minibatch_trajectories: 4,
            epsilon: 0.2,
            discount: 0.99,
            gae_lambda: 0.95,
            alpha: 0.01,
            beta: 0.001,
            gamma_coeff: 1.0,
            lambda_s: 0.05,
            tau_div: 0.1,
            div_interval: 100,
            div_sample: 64,
            buffer_cap: 1000,
            standardize: true,
            lr: 3e-4,
            critic_lr: 3e-4,
            conflict_interval: 10,
            conflict_probe_cap: 48,
            cagrad_c: 0.4,
            gradnorm_asymmetry: 0.5,
        }
    }
}

/// Behavior-cloning warm-up settings (soft-target cross-entropy against the
/// scripted controller, applied to the backbone before it is frozen).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmupConfig {
    pub episodes: usize,
    pub updates: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig { episodes: 250, updates: 600, batch: 32, lr: 1e-3 }
    }
}

/// One environment step as recorded at rollout time. Encodings are cached as
/// constants so update-time replays never recompute the frozen trunk.
pub struct StepRecord {
    pub obs: Vec<f64>,
    pub prev_action: Option<usize>,
    pub action: usize,
    pub logp_old: f64,
    pub reward: f64,
    pub value_old: f64,
    /// Selected expert (plurality token expert under token routing).
    pub z: usize,
    pub tau: f64,
    pub oracle_phase: Phase,
    pub fingerprint: u64,
    pub entropy_bits: f64,
    /// Per-micro-token selections (token modes only).
    pub token_indices: Vec<usize>,
    pub token_second: Vec<usize>,
    enc_obs: Option<Tensor>,
    pooled: Option<Tensor>,
}

/// One recorded episode plus its post-rollout advantages.
pub struct Trajectory {
    pub goal: Vec<f64>,
    pub category: TaskCategory,
    pub steps: Vec<StepRecord>,
    /// Undiscounted return (the group estimators' R(tau)).
    pub ret: f64,
    pub success: bool,
    pub advantages: Vec<f64>,
    enc_goal: Option<Tensor>,
}

impl Trajectory {
    pub fn zs(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.z).collect()
    }

    pub fn oracle_labels(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.oracle_phase.index()).collect()
    }

    pub fn entropies(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.entropy_bits).collect()
    }

    pub fn switch_count(&self) -> usize {
        count_switches(&self.zs())
    }

    /// Steps whose micro-tokens disagreed (0 outside token modes).
    pub fn token_step_switches(&self) -> usize {
        let per_step: Vec<Vec<usize>> =
            self.steps.iter().filter(|s| !s.token_indices.is_empty()).map(|s| s.token_indices.clone()).collect();
        if per_step.is_empty() {
            0
        } else {
            token_to_step_switches(&per_step)
        }
    }
}

/// A group of trajectories sharing one layout seed (and therefore one task).
pub struct RolloutGroup {
    pub layout_seed: u64,
    pub trajectories: Vec<Trajectory>,
}

pub struct RolloutBatch {
    pub groups: Vec<RolloutGroup>,
}

impl RolloutBatch {
    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.groups.iter().flat_map(|g| g.trajectories.iter())
    }
}

/// The combined objective, decomposed. `total` recomposes from the parts as
/// `l_rl + alpha*l_div + beta*l_bal + gamma_coeff*l_switch` exactly.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossBreakdown {
    pub l_rl: f64,
    pub l_div: f64,
    pub l_bal: f64,
    pub l_switch: f64,
    pub total: f64,
    pub critic: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma_coeff: f64,
}

impl LossBreakdown {
    pub fn recomposed(&self) -> f64 {
        self.l_rl + self.alpha * self.l_div + self.beta * self.l_bal + self.gamma_coeff * self.l_switch
    }
}

/// A conflict-probe sample.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConflictPoint {
    pub update: u64,
    pub score: f64,
}

/// Expert-similarity probe result: mean pairwise KL over sampled states and
/// the fraction of states whose mean pairwise KL sits below the margin.
#[derive(Debug, Clone, Copy)]
pub struct SimilarityProbe {
    pub mean_kl: f64,
    pub frac_below_margin: f64,
    pub states: usize,
}

/// What one training batch produced, for the harness to log.
pub struct BatchReport {
    pub batch: RolloutBatch,
    pub losses: Vec<LossBreakdown>,
    pub conflict: Vec<ConflictPoint>,
    /// Per-category |surrogate| mass accumulated over this batch's updates.
    pub occupancy_row: Vec<f64>,
    pub env_steps: u64,
    pub updates: u64,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at update {update}:\n{dump}")]
    Numerical { update: u64, dump: String },
}

pub struct Trainer {
    pub env: Box<dyn Environment>,
    pub policy: MoEPolicy,
    pub router: Option<RouterParams>,
    pub token_router: Option<TokenRouter>,
    pub cfg: TrainerConfig,
    pub anneal: AnnealSchedule,
    pub buffers: ExpertBuffer,
    streams: SeedStreams,
    opt_actor: Adam,
    opt_critic: Adam,
    /// Environment steps taken by training rollouts; drives the temperature
    /// schedule. Probes and evaluation do not advance it.
    pub env_steps: u64,
    /// Optimizer updates applied so far (one per minibatch).
    pub updates: u64,
    groups_sampled: u64,
    probes_run: u64,
    /// Environment-step mark at which the next diversity application is due.
    next_div_at: u64,
    /// One row per batch: per-category |surrogate| mass.
    pub occupancy_rows: Vec<Vec<f64>>,
    pub conflict_trace: Vec<ConflictPoint>,
}

impl Trainer {
    /// Wires a frozen-backbone policy to an environment. The router must be
    /// present exactly for phase/trajectory routing, the token router exactly
    /// for token modes; gradient surgery requires the single-adapter
    /// (`routing = none`, one expert) configuration.
    pub fn new(
        env: Box<dyn Environment>,
        policy: MoEPolicy,
        router: Option<RouterParams>,
        token_router: Option<TokenRouter>,
        cfg: TrainerConfig,
        anneal: AnnealSchedule,
        streams: SeedStreams,
    ) -> Self {
        assert!(policy.backbone.is_frozen(), "freeze the backbone before RL training");
        assert!(cfg.n_group >= 2, "group estimators need n_group >= 2");
        assert!(cfg.groups_per_batch >= 1 && cfg.minibatch_trajectories >= 1);
        match cfg.routing {
            RoutingMode::Phase | RoutingMode::Trajectory => {
                assert!(router.is_some(), "{} routing needs a router", cfg.routing.name());
                assert!(token_router.is_none());
            }
            RoutingMode::Token | RoutingMode::TokenTop2 => {
                assert!(token_router.is_some(), "token routing needs a token router");
                assert!(router.is_none());
            }
            RoutingMode::None => {
                assert!(router.is_none() && token_router.is_none(), "routing=none takes no router");
            }
        }
        if cfg.surgery != SurgeryMode::Off {
            assert!(
                cfg.routing == RoutingMode::None && policy.n_experts() == 1,
                "gradient surgery applies to the single-adapter arm only"
            );
        }
        let n_experts = policy.n_experts();
        let (lr, critic_lr) = (cfg.lr, cfg.critic_lr);
        Trainer {
            env,
            policy,
            router,
            token_router,
            buffers: ExpertBuffer::new(n_experts, cfg.buffer_cap),
            anneal,
            streams,
            opt_actor: Adam::new(AdamConfig { lr, ..AdamConfig::default() }),
            opt_critic: Adam::new(AdamConfig { lr: critic_lr, ..AdamConfig::default() }),
            env_steps: 0,
            updates: 0,
            groups_sampled: 0,
            probes_run: 0,
            next_div_at: 0,
            occupancy_rows: Vec::new(),
            conflict_trace: Vec::new(),
            cfg,
        }
    }

    /// All actor-side parameters: expert adapters plus whichever router
    /// exists.
    fn actor_tensors(&self) -> Vec<Tensor> {
        let mut set = self.policy.all_expert_params();
        if let Some(r) = &self.router {
            r.params(&mut set, "router");
        }
        if let Some(t) = &self.token_router {
            t.params(&mut set, "token_router");
        }
        set.tensors()
    }

    fn need_base_forward(&self) -> bool {
        self.cfg.algorithm == Algorithm::Ppo || self.router.is_some() || self.token_router.is_some()
    }

    /// Rolls out one episode without building a graph. `probe` rollouts
    /// (conflict probes, evaluation) advance neither the environment-step
    /// clock nor the expert buffers.
    fn rollout_one(&mut self, layout_seed: u64, fault_seed: u64, rng: &mut rand_chacha::ChaCha8Rng, probe: bool) -> Trajectory {
        let need_base = self.need_base_forward();
        no_grad(|| {
            let reset = self.env.reset(layout_seed, fault_seed);
            let mut state = self.router.as_ref().map(|r| r.start_episode());
            let mut enc_goal: Option<Tensor> = None;
            let mut steps: Vec<StepRecord> = Vec::new();
            let mut trajectory_z: Option<usize> = None;
            let mut prev_action: Option<usize> = None;
            let mut obs = reset.observation;
            let mut ret = 0.0;
            let success = loop {
                let oracle_phase = self.env.oracle_phase();
                let fingerprint = self.env.state_fingerprint();
                let tau = self.anneal.temperature(self.env_steps as f64);

                let (enc_obs, pooled) = if need_base {
                    let base = self.policy.base_forward(&obs, &reset.goal, prev_action);
                    if enc_goal.is_none() {
                        enc_goal = Some(base.goal_hidden.detach());
                    }
                    (Some(base.obs_pooled.detach()), Some(base.pooled.detach()))
                } else {
                    (None, None)
                };

                let (z, dist, token_indices, token_second) = match self.cfg.routing {
                    RoutingMode::Phase => {
                        let out = self.router.as_ref().unwrap().route(
                            state.as_ref().unwrap(),
                            enc_obs.as_ref().unwrap(),
                            enc_goal.as_ref().unwrap(),
                            tau,
                        );
                        (out.z, self.policy.expert_forward(out.z, &obs, &reset.goal, prev_action), vec![], vec![])
                    }
                    RoutingMode::Trajectory => {
                        let z = *trajectory_z.get_or_insert_with(|| {
                            self.router
                                .as_ref()
                                .unwrap()
                                .route(state.as_ref().unwrap(), enc_obs.as_ref().unwrap(), enc_goal.as_ref().unwrap(), tau)
                                .z
                        });
                        (z, self.policy.expert_forward(z, &obs, &reset.goal, prev_action), vec![], vec![])
                    }
                    RoutingMode::None => (0, self.policy.expert_forward(0, &obs, &reset.goal, prev_action), vec![], vec![]),
                    RoutingMode::Token | RoutingMode::TokenTop2 => {
                        let tr = self.token_router.as_ref().unwrap();
                        let routing = tr.route(pooled.as_ref().unwrap());
                        let mixed = tr.mixed_action_logits(
                            &self.policy,
                            &routing,
                            &obs,
                            &reset.goal,
                            prev_action,
                            self.cfg.routing == RoutingMode::TokenTop2,
                        );
                        (
                            plurality(&routing.indices, self.policy.n_experts()),
                            ActionDistribution { logits: mixed },
                            routing.indices,
                            routing.second,
                        )
                    }
                };

                let action = dist.sample(rng);
                let logp_old = dist.log_prob(action).value();
                let entropy = dist.entropy_bits();
                let value_old = if self.cfg.algorithm == Algorithm::Ppo {
                    self.policy.value_head.value(pooled.as_ref().expect("ppo caches pooled features")).value()
                } else {
                    0.0
                };
                if let Some(st) = state.as_mut() {
                    st.record(action, enc_obs.clone().unwrap());
                }
                if !probe {
                    self.buffers.push(z, BufferedState { obs: obs.clone(), goal: reset.goal.clone(), prev_action });
                }

                let out = self.env.step(action).expect("trainer only issues valid actions");
                if !probe {
                    self.env_steps += 1;
                }
                ret += out.reward;
                steps.push(StepRecord {
                    obs,
                    prev_action,
                    action,
                    logp_old,
                    reward: out.reward,
                    value_old,
                    z,
                    tau,
                    oracle_phase,
                    fingerprint,
                    entropy_bits: entropy,
                    token_indices,
                    token_second,
                    enc_obs,
                    pooled,
                });
                prev_action = Some(action);
                obs = out.observation;
                if out.done {
                    break out.success;
                }
            };
            Trajectory { goal: reset.goal, category: reset.category, steps, ret, success, advantages: Vec::new(), enc_goal }
        })
    }

    fn rollout_group(&mut self, group_index: u64, stream_prefix: &str, probe: bool) -> RolloutGroup {
        let layout_seed = self.streams.derive_u64(&format!("{stream_prefix}-layout"), group_index);
        let trajectories = (0..self.cfg.n_group)
            .map(|j| {
                let k = group_index * self.cfg.n_group as u64 + j as u64;
                let fault_seed = self.streams.derive_u64(&format!("{stream_prefix}-fault"), k);
                let mut rng = self.streams.substream(&format!("{stream_prefix}-act"), k);
                self.rollout_one(layout_seed, fault_seed, &mut rng, probe)
            })
            .collect();
        RolloutGroup { layout_seed, trajectories }
    }

    fn rollout_batch(&mut self) -> RolloutBatch {
        let groups = (0..self.cfg.groups_per_batch)
            .map(|_| {
                let idx = self.groups_sampled;
                self.groups_sampled += 1;
                self.rollout_group(idx, "rollout", false)
            })
            .collect();
        RolloutBatch { groups }
    }

    /// Fills `advantages` on every trajectory of the batch. Episodes are
    /// finite-horizon; the value bootstrap beyond the last step is zero.
    fn compute_advantages(&self, batch: &mut RolloutBatch) {
        for group in &mut batch.groups {
            match self.cfg.algorithm {
                Algorithm::Ppo => {
                    for traj in &mut group.trajectories {
                        let rewards: Vec<f64> = traj.steps.iter().map(|s| s.reward).collect();
                        let mut values: Vec<f64> = traj.steps.iter().map(|s| s.value_old).collect();
                        values.push(0.0);
                        traj.advantages = gae_advantages(&rewards, &values, self.cfg.discount, self.cfg.gae_lambda);
                    }
                }
                Algorithm::Rloo | Algorithm::Grpo => {
                    let returns: Vec<f64> = group.trajectories.iter().map(|t| t.ret).collect();
                    let per_traj = if self.cfg.algorithm == Algorithm::Rloo {
                        rloo_advantages(&returns)
                    } else {
                        grpo_advantages(&returns, self.cfg.standardize)
                    };
                    for (traj, a) in group.trajectories.iter_mut().zip(per_traj.iter()) {
                        traj.advantages = vec![*a; traj.steps.len()];
                    }
                }
                Algorithm::Gigpo => {
                    let returns: Vec<f64> = group.trajectories.iter().map(|t| t.ret).collect();
                    let rewards: Vec<Vec<f64>> =
                        group.trajectories.iter().map(|t| t.steps.iter().map(|s| s.reward).collect()).collect();
                    let fps: Vec<Vec<u64>> =
                        group.trajectories.iter().map(|t| t.steps.iter().map(|s| s.fingerprint).collect()).collect();
                    let per_step = gigpo_advantages(&returns, &rewards, &fps, self.cfg.discount, self.cfg.standardize);
                    for (traj, a) in group.trajectories.iter_mut().zip(per_step.into_iter()) {
                        traj.advantages = a;
                    }
                }
            }
        }
    }

    /// Replays the routing decisions of one trajectory differentiably and
    /// returns the per-decision soft distributions (one per step for phase
    /// routing, a single entry for trajectory routing).
    fn replay_router(&self, traj: &Trajectory) -> Vec<Tensor> {
        let router = self.router.as_ref().expect("replay needs a router");
        let enc_goal = traj.enc_goal.as_ref().unwrap();
        match self.cfg.routing {
            RoutingMode::Phase => {
                let mut state = router.start_episode();
                traj.steps
                    .iter()
                    .map(|s| {
                        let out = router.route(&state, s.enc_obs.as_ref().unwrap(), enc_goal, s.tau);
                        state.record(s.action, s.enc_obs.clone().unwrap());
                        out.p
                    })
                    .collect()
            }
            RoutingMode::Trajectory => {
                let s0 = &traj.steps[0];
                vec![router.route(&router.start_episode(), s0.enc_obs.as_ref().unwrap(), enc_goal, s0.tau).p]
            }
            _ => unreachable!("replay_router only serves router modes"),
        }
    }

    /// New-policy log-probs for every step of a trajectory, with gradients.
    /// Token modes rebuild the mixture with rollout-time token selections;
    /// the returned per-token distributions (for the balance loss) ride
    /// along.
    fn replay_logps(&self, traj: &Trajectory) -> (Vec<Tensor>, Vec<Tensor>) {
        let mut logps = Vec::with_capacity(traj.steps.len());
        let mut token_ps = Vec::new();
        for s in &traj.steps {
            if self.cfg.routing.is_token_level() {
                let tr = self.token_router.as_ref().unwrap();
                let replayed = tr.route(s.pooled.as_ref().unwrap());
                let routing = TokenRouting {
                    per_token_p: replayed.per_token_p,
                    indices: s.token_indices.clone(),
                    second: s.token_second.clone(),
                };
                let mixed = tr.mixed_action_logits(
                    &self.policy,
                    &routing,
                    &s.obs,
                    &traj.goal,
                    s.prev_action,
                    self.cfg.routing == RoutingMode::TokenTop2,
                );
                token_ps.extend(routing.per_token_p.iter().cloned());
                logps.push(mixed.log_softmax().index(s.action));
            } else {
                logps.push(self.policy.expert_forward(s.z, &s.obs, &traj.goal, s.prev_action).log_prob(s.action));
            }
        }
        (logps, token_ps)
    }

    /// One optimizer update on a minibatch of whole trajectories. Returns the
    /// loss breakdown; accumulates the occupancy ledger row.
    fn update_minibatch(&mut self, trajs: &[&Trajectory], occupancy_row: &mut [f64]) -> Result<LossBreakdown, TrainError> {
        let cfg = self.cfg.clone();
        let apply_diversity =
            cfg.alpha != 0.0 && self.policy.n_experts() >= 2 && cfg.div_interval > 0 && self.env_steps >= self.next_div_at;
        if apply_diversity {
            self.next_div_at = self.env_steps + cfg.div_interval as u64;
        }

        // Per-trajectory surrogate terms and routing replays.
        let mut all_terms: Vec<Tensor> = Vec::new();
        let mut gated_terms: Vec<Tensor> = Vec::new();
        let mut step_phases: Vec<Phase> = Vec::new();
        let mut soft_ps: Vec<Tensor> = Vec::new();
        let mut switch_terms: Vec<Tensor> = Vec::new();
        for traj in trajs {
            let (logps, token_ps) = self.replay_logps(traj);
            let old: Vec<f64> = traj.steps.iter().map(|s| s.logp_old).collect();
            let terms = clipped_surrogate_terms(&logps, &old, &traj.advantages, cfg.epsilon);
            let ps = match cfg.routing {
                RoutingMode::Phase | RoutingMode::Trajectory => self.replay_router(traj),
                _ => Vec::new(),
            };
            match cfg.routing {
                RoutingMode::Phase => {
                    for (t, term) in terms.iter().enumerate() {
                        gated_terms.push(term.scale_by(&straight_through_gate_at(&ps[t], traj.steps[t].z)));
                    }
                    switch_terms.push(switching_penalty(&ps, cfg.lambda_s));
                }
                RoutingMode::Trajectory => {
                    let gate = straight_through_gate_at(&ps[0], traj.steps[0].z);
                    for term in &terms {
                        gated_terms.push(term.scale_by(&gate));
                    }
                }
                RoutingMode::Token | RoutingMode::TokenTop2 | RoutingMode::None => {
                    gated_terms.extend(terms.iter().cloned());
                }
            }
            soft_ps.extend(ps);
            soft_ps.extend(token_ps);
            for (s, term) in traj.steps.iter().zip(terms.iter()) {
                occupancy_row[traj.category.index()] += term.value().abs();
                step_phases.push(s.oracle_phase);
                all_terms.push(term.clone());
            }
        }

        let l_rl = Tensor::from_scalars(&gated_terms).mean();

        // Regularizers. Absent pieces enter as graph-free zeros so the
        // breakdown always recomposes the same way.
        let l_switch = if cfg.routing == RoutingMode::Phase {
            Tensor::from_scalars(&switch_terms).mean()
        } else {
            Tensor::zeros(&[1])
        };
        let l_bal = if soft_ps.is_empty() {
            Tensor::zeros(&[1])
        } else {
            let sum = soft_ps[1..].iter().fold(soft_ps[0].clone(), |acc, p| acc.add(p));
            balance_loss(&sum.scale(1.0 / soft_ps.len() as f64))
        };
        let l_div = if apply_diversity && !self.buffers.is_empty() {
            let mut rng = self.streams.substream("diversity", self.updates);
            let states = self.buffers.sample(cfg.div_sample, &mut rng);
            diversity_loss(&self.policy, &states, cfg.tau_div)
        } else {
            Tensor::zeros(&[1])
        };

        let total = l_rl.add(&l_div.scale(cfg.alpha)).add(&l_bal.scale(cfg.beta)).add(&l_switch.scale(cfg.gamma_coeff));

        let mut breakdown = LossBreakdown {
            l_rl: l_rl.value(),
            l_div: l_div.value(),
            l_bal: l_bal.value(),
            l_switch: l_switch.value(),
            total: total.value(),
            critic: 0.0,
            alpha: cfg.alpha,
            beta: cfg.beta,
            gamma_coeff: cfg.gamma_coeff,
        };
        if !breakdown.total.is_finite() {
            return Err(self.numerical_abort(&breakdown, trajs));
        }

        if cfg.surgery == SurgeryMode::Off {
            total.backward();
            let tensors = self.actor_tensors();
            clip_global_norm(&tensors, 1.0);
            self.opt_actor.step(&tensors);
            for t in &tensors {
                t.zero_grad();
            }
        } else {
            // Surgery path: per-oracle-phase gradients of the (ungated,
            // single-adapter) RL loss, combined at mean scale.
            self.surgery_update(&all_terms, &step_phases)?;
        }

        // PPO critic: separate squared-error step toward A + V_old on the
        // cached frozen-trunk features.
        if cfg.algorithm == Algorithm::Ppo {
            let mut sq = Vec::new();
            for traj in trajs {
                for (s, a) in traj.steps.iter().zip(traj.advantages.iter()) {
                    let err = self.policy.value_head.value(s.pooled.as_ref().unwrap()).add_scalar(-(a + s.value_old));
                    sq.push(err.mul(&err));
                }
            }
            let critic = Tensor::from_scalars(&sq).mean();
            breakdown.critic = critic.value();
            if !breakdown.critic.is_finite() {
                return Err(self.numerical_abort(&breakdown, trajs));
            }
            critic.backward();
            let vt = self.policy.value_params().tensors();
            clip_global_norm(&vt, 1.0);
            self.opt_critic.step(&vt);
            for t in &vt {
                t.zero_grad();
            }
        }

        self.updates += 1;
        Ok(breakdown)
    }

    /// Gradient surgery over oracle phases: one backward per phase, then
    /// PCGrad / GradNorm / CAGrad combines the flat gradients before a single
    /// Adam step. All combiners produce a mean-scale gradient, matching what
    /// the unpartitioned loss would feed the optimizer.
    fn surgery_update(&mut self, terms: &[Tensor], phases: &[Phase]) -> Result<(), TrainError> {
        let params = self.policy.all_expert_params();
        let mut flats: Vec<Vec<f64>> = Vec::new();
        let mut losses: Vec<f64> = Vec::new();
        for phase in Phase::ALL {
            let member: Vec<Tensor> = terms
                .iter()
                .zip(phases.iter())
                .filter(|(_, p)| **p == phase)
                .map(|(t, _)| t.clone())
                .collect();
            if member.is_empty() {
                continue;
            }
            let loss = Tensor::from_scalars(&member).mean();
            if !loss.value().is_finite() {
                let dump = format!("phase {} loss {} over {} steps", phase.name(), loss.value(), member.len());
                return Err(TrainError::Numerical { update: self.updates, dump });
            }
            loss.backward();
            flats.push(params.flat_grad());
            losses.push(loss.value());
            params.zero_grads();
        }
        let combined = if flats.len() == 1 {
            flats.pop().unwrap()
        } else {
            let n = flats.len() as f64;
            match self.cfg.surgery {
                SurgeryMode::Pcgrad => {
                    let mut g = pcgrad_combine(&flats);
                    g.iter_mut().for_each(|v| *v /= n);
                    g
                }
                SurgeryMode::Cagrad => cagrad_combine(&flats, self.cfg.cagrad_c),
                SurgeryMode::Gradnorm => {
                    let norms: Vec<f64> = flats.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
                    if norms.iter().any(|x| *x == 0.0) {
                        // A phase with zero gradient defeats the norm targets;
                        // fall back to the plain average.
                        average_grads(&flats)
                    } else {
                        let w = gradnorm_weights(&losses, &norms, self.cfg.gradnorm_asymmetry);
                        let mut g = vec![0.0; flats[0].len()];
                        for (wi, gi) in w.iter().zip(flats.iter()) {
                            for (a, b) in g.iter_mut().zip(gi.iter()) {
                                *a += wi * b / n;
                            }
                        }
                        g
                    }
                }
                SurgeryMode::Off => unreachable!(),
            }
        };
        params.set_flat_grad(&combined);
        let tensors = params.tensors();
        clip_global_norm(&tensors, 1.0);
        self.opt_actor.step(&tensors);
        for t in &tensors {
            t.zero_grad();
        }
        Ok(())
    }

    fn numerical_abort(&self, breakdown: &LossBreakdown, trajs: &[&Trajectory]) -> TrainError {
        let adv: Vec<f64> = trajs.iter().flat_map(|t| t.advantages.iter().copied()).collect();
        let rets: Vec<f64> = trajs.iter().map(|t| t.ret).collect();
        let dump = format!(
            "breakdown: {breakdown:?}\nreturns: {rets:?}\nadvantage range: [{:?}, {:?}]\nenv_steps: {}",
            adv.iter().cloned().fold(f64::INFINITY, f64::min),
            adv.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            self.env_steps,
        );
        TrainError::Numerical { update: self.updates, dump }
    }

    /// Gradient-conflict probe: rolls out one held-out group, partitions its
    /// steps by oracle phase, and scores the clipped negative cosine between
    /// per-phase policy gradients in the shared expert-parameter space.
    fn conflict_probe(&mut self) -> Option<f64> {
        let idx = self.probes_run;
        self.probes_run += 1;
        let mut group = self.rollout_group(idx, "probe", true);
        let mut batch = RolloutBatch { groups: vec![group] };
        self.compute_advantages(&mut batch);
        group = batch.groups.pop().unwrap();

        let mut per_phase: std::collections::BTreeMap<usize, Vec<(usize, usize)>> = std::collections::BTreeMap::new();
        for (i, traj) in group.trajectories.iter().enumerate() {
            for (t, s) in traj.steps.iter().enumerate() {
                per_phase.entry(s.oracle_phase.index()).or_default().push((i, t));
            }
        }
        if per_phase.len() < 2 {
            return None;
        }
        let params = self.policy.all_expert_params();
        let mut grads = Vec::new();
        for (_, mut members) in per_phase {
            members.truncate(self.cfg.conflict_probe_cap);
            let mut logps = Vec::new();
            let mut old = Vec::new();
            let mut adv = Vec::new();
            for (i, t) in members {
                let traj = &group.trajectories[i];
                let s = &traj.steps[t];
                logps.push(self.policy.expert_forward(s.z, &s.obs, &traj.goal, s.prev_action).log_prob(s.action));
                old.push(s.logp_old);
                adv.push(traj.advantages[t]);
            }
            let loss = Tensor::from_scalars(&clipped_surrogate_terms(&logps, &old, &adv, self.cfg.epsilon)).mean();
            loss.backward();
            grads.push(params.flat_grad());
            params.zero_grads();
        }
        Some(gradient_conflict_score(&grads))
    }

    /// Expert-similarity probe over buffered states: per-state mean pairwise
    /// KL between expert policies, and how often it falls below `margin`.
    pub fn probe_expert_similarity(&self, sample: usize, margin: f64) -> Option<SimilarityProbe> {
        let k = self.policy.n_experts();
        if k < 2 || self.buffers.is_empty() {
            return None;
        }
        let mut rng = self.streams.substream("similarity", self.updates);
        let states = self.buffers.sample(sample, &mut rng);
        no_grad(|| {
            let mut below = 0usize;
            let mut total = 0.0;
            for s in &states {
                let probs: Vec<Tensor> =
                    (0..k).map(|e| self.policy.expert_forward(e, &s.obs, &s.goal, s.prev_action).probs()).collect();
                let mut acc = 0.0;
                let mut pairs = 0.0;
                for i in 0..k {
                    for j in 0..k {
                        if i != j {
                            acc += Tensor::kl_divergence(&probs[i], &probs[j]).value();
                            pairs += 1.0;
                        }
                    }
                }
                let mean_kl = acc / pairs;
                total += mean_kl;
                if mean_kl < margin {
                    below += 1;
                }
            }
            Some(SimilarityProbe {
                mean_kl: total / states.len() as f64,
                frac_below_margin: below as f64 / states.len() as f64,
                states: states.len(),
            })
        })
    }

    /// Collects one batch and applies one epoch of minibatch updates.
    pub fn train_batch(&mut self) -> Result<BatchReport, TrainError> {
        let mut batch = self.rollout_batch();
        self.compute_advantages(&mut batch);

        let mut losses = Vec::new();
        let mut conflict = Vec::new();
        let mut occupancy_row = vec![0.0; TaskCategory::ALL.len()];
        let trajs: Vec<&Trajectory> = batch.trajectories().collect();
        for chunk in trajs.chunks(self.cfg.minibatch_trajectories) {
            if self.cfg.conflict_interval > 0 && self.updates % self.cfg.conflict_interval as u64 == 0 {
                if let Some(score) = self.conflict_probe() {
                    let point = ConflictPoint { update: self.updates, score };
                    conflict.push(point);
                    self.conflict_trace.push(point);
                }
            }
            losses.push(self.update_minibatch(chunk, &mut occupancy_row)?);
        }
        drop(trajs);
        self.occupancy_rows.push(occupancy_row.clone());
        Ok(BatchReport { batch, losses, conflict, occupancy_row, env_steps: self.env_steps, updates: self.updates })
    }

    /// Runs held-out evaluation episodes (fresh layouts, no training side
    /// effects) and returns the recorded trajectories.
    pub fn evaluate(&mut self, episodes: usize) -> Vec<Trajectory> {
        (0..episodes as u64)
            .map(|e| {
                let layout_seed = self.streams.derive_u64("eval-layout", e);
                let fault_seed = self.streams.derive_u64("eval-fault", e);
                let mut rng = self.streams.substream("eval-act", e);
                self.rollout_one(layout_seed, fault_seed, &mut rng, true)
            })
            .collect()
    }
}

/// Most frequent entry (lowest index on ties).
fn plurality(indices: &[usize], n_experts: usize) -> usize {
    let mut counts = vec![0usize; n_experts];
    for i in indices {
        counts[*i] += 1;
    }
    counts.iter().enumerate().max_by_key(|(i, c)| (**c, std::cmp::Reverse(*i))).map(|(i, _)| i).unwrap()
}

fn average_grads(flats: &[Vec<f64>]) -> Vec<f64> {
    let n = flats.len() as f64;
    let mut g = vec![0.0; flats[0].len()];
    for f in flats {
        for (a, b) in g.iter_mut().zip(f.iter()) {
            *a += b / n;
        }
    }
    g
}

/// Behavior-cloning warm-up: soft cross-entropy from the scripted
/// controller's action distributions onto the (unfrozen) backbone head.
/// Returns the final minibatch loss. Callers freeze the backbone afterwards.
pub fn behavior_clone(policy: &MoEPolicy, env: &mut dyn Environment, streams: &SeedStreams, cfg: &WarmupConfig) -> f64 {
    assert!(!policy.backbone.is_frozen(), "warm-up trains the backbone; freeze afterwards");
    struct Sample {
        obs: Vec<f64>,
        goal: Vec<f64>,
        prev_action: Option<usize>,
        target: Vec<f64>,
    }
    let mut data: Vec<Sample> = Vec::new();
    for ep in 0..cfg.episodes as u64 {
        let layout_seed = streams.derive_u64("warmup-layout", ep);
        let fault_seed = streams.derive_u64("warmup-fault", ep);
        let mut rng = streams.substream("warmup-act", ep);
        let reset = env.reset(layout_seed, fault_seed);
        let mut obs = reset.observation;
        let mut prev_action = None;
        loop {
            let target = env.scripted_distribution();
            let action = sample_index(&target, &mut rng);
            data.push(Sample { obs: obs.clone(), goal: reset.goal.clone(), prev_action, target });
            let out = env.step(action).expect("scripted actions are valid");
            prev_action = Some(action);
            obs = out.observation;
            if out.done {
                break;
            }
        }
    }
    assert!(!data.is_empty());

    let params = policy.backbone_params();
    let tensors = params.tensors();
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut rng = streams.substream("warmup-batch", 0);
    let mut last = f64::NAN;
    for _ in 0..cfg.updates {
        let mut terms = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let s = &data[rand::Rng::gen_range(&mut rng, 0..data.len())];
            let logits = policy.base_forward(&s.obs, &s.goal, s.prev_action).logits;
            let target = Tensor::constant(&[s.target.len()], s.target.clone());
            terms.push(logits.log_softmax().mul(&target).sum().neg());
        }
        let loss = Tensor::from_scalars(&terms).mean();
        last = loss.value();
        assert!(last.is_finite(), "behavior cloning diverged");
        loss.backward();
        clip_global_norm(&tensors, 1.0);
        opt.step(&tensors);
        params.zero_grads();
    }
    last
}

fn sample_index(p: &[f64], rng: &mut rand_chacha::ChaCha8Rng) -> usize {
    let mut u: f64 = rand::Rng::gen_range(rng, 0.0..1.0);
    for (i, pi) in p.iter().enumerate() {
        if u < *pi {
            return i;
        }
        u -= pi;
    }
    p.len() - 1
}
