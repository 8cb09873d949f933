//! Experiment orchestration: config files with dotted-path overrides, seeded
//! deterministic runs, the routing-granularity comparison, the ablation
//! sweeps, aggregation across seeds, and a programmatic self-check battery.
//!
//! Everything an experiment emits is a pure function of (config, seed) —
//! wall-clock time appears only in the run manifest's `started_unix_ms`.
//! Seeds may run on parallel threads; each seed's trainer is sequential and
//! self-contained, and results are merged in seed order, so parallelism
//! never changes a byte of output.

use crate::autodiff::{no_grad, Tensor};
use crate::baselines::TokenRouter;
use crate::env::{EnvConfig, Environment, Phase, PhasedGridWorld, TaskCategory};
use crate::metrics::{
    expert_activation_frequency, expert_usage, parameter_occupancy, phase_alignment_overlap, phase_entropy_stats,
    write_metrics_csv, write_occupancy_csv, write_switches_csv, EntropyStats, MetricsRecord, OccupancyRecord, SwitchRecord,
};
use crate::params::ParamSet;
use crate::policy::{MoEPolicy, PolicyConfig};
use crate::rl::{behavior_clone, Algorithm, RoutingMode, SurgeryMode, TrainError, Trainer, TrainerConfig, WarmupConfig};
use crate::rng::SeedStreams;
use crate::router::{seeded_router, AnnealSchedule, RouterParams, RouterState};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Environment variable naming the root under which relative `output_dir`
/// values are resolved.
pub const OUTPUT_ROOT_VAR: &str = "PHASE_MOE_OUT";

/// Environment variable overriding the warm-up cache directory (defaults to
/// `<output root>/warmup-cache`).
pub const WARMUP_CACHE_VAR: &str = "PHASE_MOE_WARMUP_CACHE";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl HarnessError {
    /// CLI exit code: 2 for config problems (including usage), 3 for
    /// numerical aborts, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Numerical(_) => 3,
            HarnessError::Io { .. } => 1,
        }
    }
}

impl From<TrainError> for HarnessError {
    fn from(e: TrainError) -> Self {
        HarnessError::Numerical(e.to_string())
    }
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Config blocks
// ---------------------------------------------------------------------------

/// `[router]` block: architecture switches plus the temperature schedule and
/// the switching-penalty rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterBlock {
    /// History window length.
    pub window: usize,
    /// LSTM hidden width.
    pub hidden: usize,
    pub action_embed_dim: usize,
    pub mlp_hidden: usize,
    pub use_history: bool,
    pub use_goal_attention: bool,
    /// Micro-tokens per action step (token-level routing arms only).
    pub token_m: usize,
    pub tau0: f64,
    pub tauf: f64,
    pub t_anneal: f64,
    pub lambda_s: f64,
}

impl Default for RouterBlock {
    fn default() -> Self {
        RouterBlock {
            window: 5,
            hidden: 64,
            action_embed_dim: 16,
            mlp_hidden: 64,
            use_history: true,
            use_goal_attention: true,
            token_m: 4,
            tau0: 2.0,
            tauf: 0.5,
            t_anneal: 3000.0,
            lambda_s: 0.05,
        }
    }
}

/// `[algorithm]` block: estimator choice, group sizes, objective
/// coefficients, and optimizer rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgorithmBlock {
    pub tag: Algorithm,
    pub n_group: usize,
    pub epsilon: f64,
    pub discount: f64,
    pub gae_lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma_coeff: f64,
    pub tau_div: f64,
    /// Environment steps between diversity-loss applications.
    pub div_interval: usize,
    pub div_sample: usize,
    pub buffer_cap: usize,
    pub standardize: bool,
    pub lr: f64,
    pub critic_lr: f64,
    pub cagrad_c: f64,
    pub gradnorm_asymmetry: f64,
}

impl Default for AlgorithmBlock {
    fn default() -> Self {
        AlgorithmBlock {
            tag: Algorithm::Gigpo,
            n_group: 8,
            epsilon: 0.2,
            discount: 0.99,
            gae_lambda: 0.95,
            alpha: 0.01,
            beta: 0.001,
            gamma_coeff: 1.0,
            tau_div: 0.1,
            div_interval: 100,
            div_sample: 64,
            buffer_cap: 1000,
            standardize: true,
            lr: 3e-4,
            critic_lr: 3e-4,
            cagrad_c: 0.4,
            gradnorm_asymmetry: 0.5,
        }
    }
}

/// `[training]` block: budgets, seeds, probe cadence, and warm-up settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingBlock {
    /// Environment-step budget per seed (the last batch may overshoot by at
    /// most one batch's worth of steps).
    pub total_steps: u64,
    pub groups_per_batch: usize,
    pub minibatch_trajectories: usize,
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
    /// Optimizer updates between gradient-conflict probes (0 disables).
    pub conflict_interval: usize,
    pub conflict_probe_cap: usize,
    /// Buffered states per expert-similarity probe.
    pub similarity_sample: usize,
    /// Run seeds on parallel threads (output is identical either way).
    pub parallel_seeds: bool,
    pub warmup: WarmupConfig,
}

impl Default for TrainingBlock {
    fn default() -> Self {
        TrainingBlock {
            total_steps: 20_000,
            groups_per_batch: 4,
            minibatch_trajectories: 4,
            seeds: vec![0, 1, 2],
            eval_episodes: 120,
            conflict_interval: 10,
            conflict_probe_cap: 48,
            similarity_sample: 128,
            parallel_seeds: true,
            warmup: WarmupConfig::default(),
        }
    }
}

/// A full experiment description. Parses from a TOML file; every key is
/// validated and unknown keys are rejected before anything runs.
///
/// `policy.n_experts = 0` selects the single-adapter baseline: one shared
/// adapter, no router, `routing` resolved to `none`. Gradient surgery modes
/// require that configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Directory and CSV slug for this run: `[A-Za-z0-9_-]+`.
    pub run_id: String,
    /// Resolved under [`OUTPUT_ROOT_VAR`] when relative.
    pub output_dir: PathBuf,
    pub routing: RoutingMode,
    pub surgery: SurgeryMode,
    pub environment: EnvConfig,
    pub policy: PolicyConfig,
    pub router: RouterBlock,
    pub algorithm: AlgorithmBlock,
    pub training: TrainingBlock,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run_id: "run".into(),
            output_dir: "runs".into(),
            routing: RoutingMode::Phase,
            surgery: SurgeryMode::Off,
            environment: EnvConfig::default(),
            policy: PolicyConfig::default(),
            router: RouterBlock::default(),
            algorithm: AlgorithmBlock::default(),
            training: TrainingBlock::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg: ExperimentConfig =
            toml::Value::Table(table).try_into().map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Default config plus overrides; what the CLI uses when no file is given.
    pub fn from_overrides(overrides: &[String]) -> Result<Self, HarnessError> {
        Self::from_toml("", overrides)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.run_id.is_empty()
            || !self.run_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return bad(format!("run_id {:?} must be a non-empty [A-Za-z0-9_-] slug", self.run_id));
        }
        self.environment.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let p = &self.policy;
        if p.d_model < 4 || p.n_blocks < 1 || p.rank < 1 {
            return bad(format!("policy block out of range: d_model {} n_blocks {} rank {}", p.d_model, p.n_blocks, p.rank));
        }
        if p.n_experts == 1 && self.routing != RoutingMode::None {
            return bad("n_experts = 1 with a router is meaningless; use n_experts = 0 (single adapter) or >= 2".into());
        }
        if p.n_experts >= 2 && self.routing == RoutingMode::None {
            return bad("routing = \"none\" leaves all but one expert unreachable; set policy.n_experts = 0".into());
        }
        if self.surgery != SurgeryMode::Off && p.n_experts != 0 {
            return bad("gradient surgery applies to the single-adapter arm; set policy.n_experts = 0".into());
        }
        let r = &self.router;
        if r.window < 1 || r.hidden < 1 || r.action_embed_dim < 1 || r.mlp_hidden < 1 || r.token_m < 1 {
            return bad("router block dimensions must be >= 1".into());
        }
        if !(r.tauf > 0.0 && r.tau0 >= r.tauf && r.t_anneal > 0.0) {
            return bad(format!("temperature schedule needs tau0 >= tauf > 0 and t_anneal > 0, got {} {} {}", r.tau0, r.tauf, r.t_anneal));
        }
        if r.lambda_s < 0.0 {
            return bad(format!("lambda_s must be non-negative, got {}", r.lambda_s));
        }
        let a = &self.algorithm;
        if !(a.epsilon > 0.0 && a.epsilon < 1.0) {
            return bad(format!("epsilon must sit in (0, 1), got {}", a.epsilon));
        }
        if !(a.discount > 0.0 && a.discount <= 1.0) || !(0.0..=1.0).contains(&a.gae_lambda) {
            return bad(format!("discount {} / gae_lambda {} out of range", a.discount, a.gae_lambda));
        }
        if a.alpha < 0.0 || a.beta < 0.0 || a.gamma_coeff < 0.0 || a.tau_div < 0.0 {
            return bad("objective coefficients must be non-negative".into());
        }
        if !(a.lr > 0.0 && a.critic_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if a.n_group < 2 {
            return bad(format!("group estimators need n_group >= 2, got {}", a.n_group));
        }
        if a.div_sample < 1 || a.buffer_cap < 1 {
            return bad("div_sample and buffer_cap must be >= 1".into());
        }
        let t = &self.training;
        if t.total_steps < 1 || t.groups_per_batch < 1 || t.minibatch_trajectories < 1 || t.eval_episodes < 1 {
            return bad("training budgets must be >= 1".into());
        }
        if t.seeds.is_empty() {
            return bad("training.seeds must list at least one seed".into());
        }
        let mut sorted = t.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != t.seeds.len() {
            return bad("training.seeds contains duplicates".into());
        }
        if t.warmup.batch < 1 || t.warmup.episodes < 1 {
            return bad("warmup needs episodes >= 1 and batch >= 1".into());
        }
        Ok(())
    }

    /// Adapter count after resolving the `n_experts = 0` single-adapter form.
    pub fn effective_experts(&self) -> usize {
        self.policy.n_experts.max(1)
    }

    pub fn effective_routing(&self) -> RoutingMode {
        if self.policy.n_experts == 0 {
            RoutingMode::None
        } else {
            self.routing
        }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig { n_experts: self.effective_experts(), ..self.policy.clone() }
    }

    pub fn anneal(&self) -> AnnealSchedule {
        AnnealSchedule { tau0: self.router.tau0, tauf: self.router.tauf, t_anneal: self.router.t_anneal }
    }

    pub fn router_config(&self) -> crate::router::RouterConfig {
        crate::router::RouterConfig {
            n_experts: self.effective_experts(),
            window: self.router.window,
            hidden: self.router.hidden,
            action_embed_dim: self.router.action_embed_dim,
            mlp_hidden: self.router.mlp_hidden,
            use_history: self.router.use_history,
            use_goal_attention: self.router.use_goal_attention,
        }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            algorithm: self.algorithm.tag,
            routing: self.effective_routing(),
            surgery: self.surgery,
            n_group: self.algorithm.n_group,
            groups_per_batch: self.training.groups_per_batch,
            minibatch_trajectories: self.training.minibatch_trajectories,
            epsilon: self.algorithm.epsilon,
            discount: self.algorithm.discount,
            gae_lambda: self.algorithm.gae_lambda,
            alpha: self.algorithm.alpha,
            beta: self.algorithm.beta,
            gamma_coeff: self.algorithm.gamma_coeff,
            lambda_s: self.router.lambda_s,
            tau_div: self.algorithm.tau_div,
            div_interval: self.algorithm.div_interval,
            div_sample: self.algorithm.div_sample,
            buffer_cap: self.algorithm.buffer_cap,
            standardize: self.algorithm.standardize,
            lr: self.algorithm.lr,
            critic_lr: self.algorithm.critic_lr,
            conflict_interval: self.training.conflict_interval,
            conflict_probe_cap: self.training.conflict_probe_cap,
            cagrad_c: self.algorithm.cagrad_c,
            gradnorm_asymmetry: self.algorithm.gradnorm_asymmetry,
        }
    }

    /// `<output root>/<output_dir>/<run_id>`.
    pub fn run_dir(&self) -> PathBuf {
        let base = if self.output_dir.is_absolute() {
            self.output_dir.clone()
        } else {
            output_root().join(&self.output_dir)
        };
        base.join(&self.run_id)
    }
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

fn warmup_cache_dir() -> PathBuf {
    std::env::var_os(WARMUP_CACHE_VAR).map(PathBuf::from).unwrap_or_else(|| output_root().join("warmup-cache"))
}

/// Applies one `dotted.path=value` override onto the parsed TOML tree. The
/// value side is parsed as TOML (numbers, bools, arrays, quoted strings);
/// bare words fall back to strings, so `routing=token` works unquoted.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), HarnessError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override {spec:?} is not of the form key.path=value")))?;
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let segments: Vec<&str> = path.trim().split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(HarnessError::Config(format!("override key {path:?} has an empty segment")));
    }
    let mut cursor = table;
    for seg in &segments[..segments.len() - 1] {
        cursor = cursor
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("override {path:?} descends into non-table key {seg:?}")))?;
    }
    cursor.insert(segments.last().unwrap().to_string(), parsed);
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifest and summaries
// ---------------------------------------------------------------------------

/// Written to `manifest.json` before any training starts and never touched
/// again. `started_unix_ms` is the only wall-clock-dependent byte a run
/// emits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub code_version: String,
    pub seed_paths: BTreeMap<u64, String>,
    pub started_unix_ms: u64,
}

pub fn code_version() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), env!("PHASE_MOE_GIT_HASH"))
}

/// Everything one seed's run produced, in aggregate form. Serialized as
/// `summary.json` next to the seed's CSVs; the report command and the
/// acceptance suite read these back.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedSummary {
    pub run_id: String,
    pub seed: u64,
    pub env_steps: u64,
    pub updates: u64,
    pub batches: u64,
    pub warmup_final_loss: f64,
    pub overall_success: f64,
    pub mean_return: f64,
    pub mean_episode_len: f64,
    pub success_by_category: BTreeMap<String, f64>,
    pub episodes_by_category: BTreeMap<String, u64>,
    pub mean_step_switches: f64,
    pub mean_token_switches: f64,
    pub phase_alignment: f64,
    pub expert_usage: Vec<f64>,
    pub max_expert_frequency: f64,
    /// `[oracle phase][expert]` activation frequencies over evaluation.
    pub activation_by_phase: Vec<Vec<f64>>,
    /// Oracle phases seen during evaluation, mapped to their most-used expert.
    pub dominant_expert_by_phase: BTreeMap<String, usize>,
    /// Mean action entropy (bits) over the steps each expert served.
    pub mean_entropy_by_expert: Vec<Option<f64>>,
    pub entropy_by_phase: BTreeMap<String, EntropyStats>,
    /// Fraction of training batches each category's loss mass dominated.
    pub occupancy_by_category: BTreeMap<String, f64>,
    /// Mean conflict score over probes in the final third of training.
    pub final_third_conflict: Option<f64>,
    pub conflict_points: u64,
    pub similarity_mean_kl: Option<f64>,
    pub similarity_frac_below_margin: Option<f64>,
}

impl SeedSummary {
    /// Flat (name, value) view used by aggregation; `None` marks metrics this
    /// seed could not measure (e.g. conflict without probes).
    fn flat(&self) -> Vec<(String, Option<f64>)> {
        let mut out: Vec<(String, Option<f64>)> = vec![
            ("overall_success".into(), Some(self.overall_success)),
            ("mean_return".into(), Some(self.mean_return)),
            ("mean_episode_len".into(), Some(self.mean_episode_len)),
            ("mean_step_switches".into(), Some(self.mean_step_switches)),
            ("mean_token_switches".into(), Some(self.mean_token_switches)),
            ("phase_alignment".into(), Some(self.phase_alignment)),
            ("max_expert_frequency".into(), Some(self.max_expert_frequency)),
            ("warmup_final_loss".into(), Some(self.warmup_final_loss)),
            ("final_third_conflict".into(), self.final_third_conflict),
            ("similarity_mean_kl".into(), self.similarity_mean_kl),
            ("similarity_frac_below_margin".into(), self.similarity_frac_below_margin),
        ];
        for (cat, v) in &self.success_by_category {
            out.push((format!("success.{cat}"), Some(*v)));
        }
        for (cat, v) in &self.occupancy_by_category {
            out.push((format!("occupancy.{cat}"), Some(*v)));
        }
        for (k, v) in self.expert_usage.iter().enumerate() {
            out.push((format!("usage.expert{k}"), Some(*v)));
        }
        for (phase, s) in &self.entropy_by_phase {
            out.push((format!("entropy_mean_bits.{phase}"), Some(s.mean_bits)));
            out.push((format!("entropy_var_bits2.{phase}"), Some(s.var_bits2)));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Single-seed execution
// ---------------------------------------------------------------------------

fn fnv64(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Serialize, Deserialize)]
struct WarmupCacheMeta {
    key: String,
    final_loss: f64,
}

/// Behavior-cloning warm-up with an on-disk cache. The warm-up touches only
/// the backbone and depends only on (environment, backbone dims, warm-up
/// settings, seed), so sweep arms that differ in expert count, routing, or
/// RL settings share one cache entry per seed. The full key is stored beside
/// the weights and verified on load, making filename collisions harmless.
fn warm_start(
    cfg: &ExperimentConfig,
    seed: u64,
    policy: &MoEPolicy,
    env: &mut PhasedGridWorld,
    streams: &SeedStreams,
) -> Result<f64, HarnessError> {
    let key = format!(
        "seed={seed};d_model={};n_blocks={};env:{}warmup:{}",
        cfg.policy.d_model,
        cfg.policy.n_blocks,
        toml::to_string(&cfg.environment).expect("env config serializes"),
        toml::to_string(&cfg.training.warmup).expect("warmup config serializes"),
    );
    let cache = warmup_cache_dir();
    let bin = cache.join(format!("warmup-{:016x}.bin", fnv64(&key)));
    let meta_path = bin.with_extension("json");
    if let (Ok(meta_text), true) = (fs::read_to_string(&meta_path), bin.exists()) {
        if let Ok(meta) = serde_json::from_str::<WarmupCacheMeta>(&meta_text) {
            if meta.key == key && policy.backbone_params().load(&bin).is_ok() {
                return Ok(meta.final_loss);
            }
        }
    }
    let final_loss = behavior_clone(policy, env, streams, &cfg.training.warmup);
    fs::create_dir_all(&cache).map_err(io_at(&cache))?;
    let tmp = bin.with_extension(format!("tmp{}", std::process::id()));
    policy
        .backbone_params()
        .save(&tmp)
        .map_err(|e| HarnessError::Config(format!("warmup cache write failed: {e}")))?;
    fs::rename(&tmp, &bin).map_err(io_at(&bin))?;
    let meta = serde_json::to_string(&WarmupCacheMeta { key, final_loss }).expect("meta serializes");
    fs::write(&meta_path, meta).map_err(io_at(&meta_path))?;
    Ok(final_loss)
}

/// Rolls a few scripted episodes and snapshots every step's router inputs:
/// (history state, pooled observation encoding, goal encoding) when a phase
/// router is present, plus the joint pooled encoding for the token router.
/// Used to center router output biases before training so that early expert
/// selection is state-driven rather than pinned by initialization offsets.
fn calibration_inputs(
    policy: &MoEPolicy,
    env: &mut PhasedGridWorld,
    router: Option<&RouterParams>,
    streams: &SeedStreams,
) -> (Vec<(RouterState, Tensor, Tensor)>, Vec<Tensor>) {
    const EPISODES: usize = 4;
    let mut rng = streams.stream("router-calibration");
    let mut routed = Vec::new();
    let mut pooled_all = Vec::new();
    no_grad(|| {
        for _ in 0..EPISODES {
            let reset = env.reset(rng.gen(), rng.gen());
            let mut state = router.map(|r| r.start_episode());
            let mut prev_action: Option<usize> = None;
            let mut obs = reset.observation;
            loop {
                let base = policy.base_forward(&obs, &reset.goal, prev_action);
                let enc_obs = base.obs_pooled.detach();
                if let Some(s) = state.as_ref() {
                    routed.push((s.clone(), enc_obs.clone(), base.goal_hidden.detach()));
                }
                pooled_all.push(base.pooled.detach());

                let dist = env.scripted_distribution();
                let draw: f64 = rng.gen();
                let mut acc = 0.0;
                let mut action = dist.len() - 1;
                for (i, p) in dist.iter().enumerate() {
                    acc += p;
                    if draw < acc {
                        action = i;
                        break;
                    }
                }
                if let Some(s) = state.as_mut() {
                    s.record(action, enc_obs);
                }
                let step = env.step(action).expect("calibration rollout step");
                obs = step.observation;
                prev_action = Some(action);
                if step.done {
                    break;
                }
            }
        }
    });
    (routed, pooled_all)
}

fn row(run_id: &str, seed: u64, step: u64, name: &str, value: f64) -> MetricsRecord {
    MetricsRecord {
        run_id: run_id.into(),
        seed,
        step,
        name: name.into(),
        value,
        tag_category: String::new(),
        tag_expert: String::new(),
        tag_phase: String::new(),
    }
}

/// Trains one seed end to end and writes its artifacts (metrics.csv,
/// switches.csv, occupancy.csv, checkpoint.bin, summary.json) into
/// `seed_dir`.
fn run_seed(cfg: &ExperimentConfig, seed: u64, seed_dir: &Path) -> Result<SeedSummary, HarnessError> {
    fs::create_dir_all(seed_dir).map_err(io_at(seed_dir))?;
    let run_id = cfg.run_id.as_str();
    let streams = SeedStreams::new(seed);
    let mut env =
        PhasedGridWorld::new(cfg.environment.clone()).map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut init_rng = streams.stream("policy-init");
    let mut policy = MoEPolicy::for_env(&env, cfg.policy_config(), &mut init_rng);
    let warmup_final_loss = warm_start(cfg, seed, &policy, &mut env, &streams)?;
    policy.backbone.freeze();

    let routing = cfg.effective_routing();
    let router = match routing {
        RoutingMode::Phase | RoutingMode::Trajectory => {
            Some(seeded_router(cfg.policy.d_model, crate::env::Environment::action_count(&env), cfg.router_config(), &streams))
        }
        _ => None,
    };
    let token_router = if routing.is_token_level() {
        let mut rng = streams.stream("token-router-init");
        Some(TokenRouter::new(cfg.policy.d_model, cfg.router.token_m, cfg.effective_experts(), cfg.router.mlp_hidden, &mut rng))
    } else {
        None
    };
    if router.is_some() || token_router.is_some() {
        let (routed, pooled) = calibration_inputs(&policy, &mut env, router.as_ref(), &streams);
        if let Some(r) = router.as_ref() {
            r.center_output_bias(&routed);
        }
        if let Some(tr) = token_router.as_ref() {
            tr.center_output_bias(&pooled);
        }
    }
    let mut trainer =
        Trainer::new(Box::new(env), policy, router, token_router, cfg.trainer_config(), cfg.anneal(), streams);

    // Training loop with per-batch metric rows.
    let mut mrows: Vec<MetricsRecord> = vec![row(run_id, seed, 0, "warmup_final_loss", warmup_final_loss)];
    let mut batches = 0u64;
    while trainer.env_steps < cfg.training.total_steps {
        let report = trainer.train_batch()?;
        batches += 1;
        let step = report.env_steps;
        let n = report.losses.len() as f64;
        let mean = |f: fn(&crate::rl::LossBreakdown) -> f64| report.losses.iter().map(f).sum::<f64>() / n;
        mrows.push(row(run_id, seed, step, "loss_rl", mean(|l| l.l_rl)));
        mrows.push(row(run_id, seed, step, "loss_div", mean(|l| l.l_div)));
        mrows.push(row(run_id, seed, step, "loss_bal", mean(|l| l.l_bal)));
        mrows.push(row(run_id, seed, step, "loss_switch", mean(|l| l.l_switch)));
        mrows.push(row(run_id, seed, step, "loss_total", mean(|l| l.total)));
        mrows.push(row(run_id, seed, step, "loss_critic", mean(|l| l.critic)));
        let episodes: Vec<_> = report.batch.trajectories().collect();
        let ne = episodes.len() as f64;
        mrows.push(row(run_id, seed, step, "batch_return", episodes.iter().map(|t| t.ret).sum::<f64>() / ne));
        mrows.push(row(
            run_id,
            seed,
            step,
            "batch_success",
            episodes.iter().filter(|t| t.success).count() as f64 / ne,
        ));
        mrows.push(row(
            run_id,
            seed,
            step,
            "batch_episode_len",
            episodes.iter().map(|t| t.steps.len() as f64).sum::<f64>() / ne,
        ));
        mrows.push(row(run_id, seed, step, "router_tau", trainer.anneal.temperature(step as f64)));
        for point in &report.conflict {
            mrows.push(row(run_id, seed, step, "gradient_conflict", point.score));
        }
    }

    // Held-out evaluation.
    let evals = trainer.evaluate(cfg.training.eval_episodes);
    let final_step = trainer.env_steps;
    let n_experts = trainer.policy.n_experts();
    let mut successes: BTreeMap<TaskCategory, (u64, u64)> = BTreeMap::new();
    let mut srows: Vec<SwitchRecord> = Vec::new();
    let mut zs_all = Vec::new();
    let mut oracle_all = Vec::new();
    let mut entropy_all = Vec::new();
    let mut total_switches = 0usize;
    let mut total_token_switches = 0usize;
    for (i, t) in evals.iter().enumerate() {
        let e = successes.entry(t.category).or_insert((0, 0));
        e.1 += 1;
        if t.success {
            e.0 += 1;
        }
        let step_switches = t.switch_count();
        let token_switches = t.token_step_switches();
        total_switches += step_switches;
        total_token_switches += token_switches;
        srows.push(SwitchRecord {
            run_id: run_id.into(),
            episode: i as u64,
            routing_mode: routing.name().into(),
            step_switches,
            token_switches,
        });
        zs_all.extend(t.zs());
        oracle_all.extend(t.oracle_labels());
        entropy_all.extend(t.entropies());
    }
    let n_eval = evals.len() as f64;
    let overall_success = evals.iter().filter(|t| t.success).count() as f64 / n_eval;
    let mean_return = evals.iter().map(|t| t.ret).sum::<f64>() / n_eval;
    let mean_episode_len = evals.iter().map(|t| t.steps.len() as f64).sum::<f64>() / n_eval;
    let mean_step_switches = total_switches as f64 / n_eval;
    let mean_token_switches = total_token_switches as f64 / n_eval;

    let phase_alignment = phase_alignment_overlap(&zs_all, &oracle_all);
    let activation_by_phase = expert_activation_frequency(&zs_all, &oracle_all, n_experts, Phase::ALL.len());
    let usage = expert_usage(&zs_all, n_experts);
    let max_expert_frequency = usage.iter().cloned().fold(0.0, f64::max);
    let mut dominant_expert_by_phase = BTreeMap::new();
    for (p, dist) in activation_by_phase.iter().enumerate() {
        if dist.iter().sum::<f64>() > 0.0 {
            let best = dist.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            dominant_expert_by_phase.insert(Phase::ALL[p].name().to_string(), best);
        }
    }
    let mean_entropy_by_expert: Vec<Option<f64>> = (0..n_experts)
        .map(|k| {
            let hs: Vec<f64> =
                zs_all.iter().zip(entropy_all.iter()).filter(|(z, _)| **z == k).map(|(_, h)| *h).collect();
            if hs.is_empty() {
                None
            } else {
                Some(hs.iter().sum::<f64>() / hs.len() as f64)
            }
        })
        .collect();
    let entropy_by_phase: BTreeMap<String, EntropyStats> = phase_entropy_stats(&oracle_all, &entropy_all)
        .into_iter()
        .map(|(label, s)| (Phase::ALL[label].name().to_string(), s))
        .collect();

    let occupancy = parameter_occupancy(&trainer.occupancy_rows);
    let occupancy_by_category: BTreeMap<String, f64> =
        TaskCategory::ALL.iter().zip(occupancy.iter()).map(|(c, v)| (c.name().to_string(), *v)).collect();
    let orows: Vec<OccupancyRecord> = TaskCategory::ALL
        .iter()
        .zip(occupancy.iter())
        .map(|(c, v)| OccupancyRecord { run_id: run_id.into(), category: c.name().into(), occupancy: *v })
        .collect();

    let final_third_start = trainer.updates.saturating_mul(2) / 3;
    let tail: Vec<f64> =
        trainer.conflict_trace.iter().filter(|p| p.update >= final_third_start).map(|p| p.score).collect();
    let final_third_conflict =
        if tail.is_empty() { None } else { Some(tail.iter().sum::<f64>() / tail.len() as f64) };

    let similarity = trainer.probe_expert_similarity(cfg.training.similarity_sample, cfg.algorithm.tau_div);

    // Evaluation metric rows.
    mrows.push(row(run_id, seed, final_step, "eval_success", overall_success));
    for (cat, (s, n)) in &successes {
        let mut r = row(run_id, seed, final_step, "eval_success", *s as f64 / *n as f64);
        r.tag_category = cat.name().into();
        mrows.push(r);
    }
    mrows.push(row(run_id, seed, final_step, "eval_return", mean_return));
    mrows.push(row(run_id, seed, final_step, "eval_episode_len", mean_episode_len));
    mrows.push(row(run_id, seed, final_step, "eval_step_switches", mean_step_switches));
    mrows.push(row(run_id, seed, final_step, "eval_token_switches", mean_token_switches));
    mrows.push(row(run_id, seed, final_step, "phase_alignment", phase_alignment));
    for (k, u) in usage.iter().enumerate() {
        let mut r = row(run_id, seed, final_step, "expert_usage", *u);
        r.tag_expert = k.to_string();
        mrows.push(r);
    }
    for (p, dist) in activation_by_phase.iter().enumerate() {
        for (k, f) in dist.iter().enumerate() {
            let mut r = row(run_id, seed, final_step, "activation", *f);
            r.tag_phase = Phase::ALL[p].name().into();
            r.tag_expert = k.to_string();
            mrows.push(r);
        }
    }
    for (phase, s) in &entropy_by_phase {
        for (name, v) in
            [("entropy_mean_bits", s.mean_bits), ("entropy_var_bits2", s.var_bits2), ("entropy_mad_bits", s.mean_abs_dev)]
        {
            let mut r = row(run_id, seed, final_step, name, v);
            r.tag_phase = phase.clone();
            mrows.push(r);
        }
    }
    for rec in &orows {
        let mut r = row(run_id, seed, final_step, "occupancy", rec.occupancy);
        r.tag_category = rec.category.clone();
        mrows.push(r);
    }
    if let Some(sim) = &similarity {
        mrows.push(row(run_id, seed, final_step, "similarity_mean_kl", sim.mean_kl));
        mrows.push(row(run_id, seed, final_step, "similarity_frac_below_margin", sim.frac_below_margin));
    }

    // Artifacts.
    let metrics_path = seed_dir.join("metrics.csv");
    write_metrics_cssv_guard(&metrics_path, &mrows)?;
    write_switches_csv(&seed_dir.join("switches.csv"), &srows).map_err(io_at(seed_dir))?;
    write_occupancy_csv(&seed_dir.join("occupancy.csv"), &orows).map_err(io_at(seed_dir))?;
    let mut ck = ParamSet::new();
    for (n, t) in trainer.policy.backbone_params().entries() {
        ck.push(n.clone(), t.clone());
    }
    for (n, t) in trainer.policy.all_expert_params().entries() {
        ck.push(n.clone(), t.clone());
    }
    for (n, t) in trainer.policy.value_params().entries() {
        ck.push(n.clone(), t.clone());
    }
    if let Some(r) = &trainer.router {
        r.params(&mut ck, "router");
    }
    if let Some(t) = &trainer.token_router {
        t.params(&mut ck, "token_router");
    }
    let ck_path = seed_dir.join("checkpoint.bin");
    ck.save(&ck_path).map_err(|e| HarnessError::Config(format!("checkpoint write failed: {e}")))?;

    let summary = SeedSummary {
        run_id: run_id.into(),
        seed,
        env_steps: trainer.env_steps,
        updates: trainer.updates,
        batches,
        warmup_final_loss,
        overall_success,
        mean_return,
        mean_episode_len,
        success_by_category: successes.iter().map(|(c, (s, n))| (c.name().to_string(), *s as f64 / *n as f64)).collect(),
        episodes_by_category: successes.iter().map(|(c, (_, n))| (c.name().to_string(), *n)).collect(),
        mean_step_switches,
        mean_token_switches,
        phase_alignment,
        expert_usage: usage,
        max_expert_frequency,
        activation_by_phase,
        dominant_expert_by_phase,
        mean_entropy_by_expert,
        entropy_by_phase,
        occupancy_by_category,
        final_third_conflict,
        conflict_points: trainer.conflict_trace.len() as u64,
        similarity_mean_kl: similarity.as_ref().map(|s| s.mean_kl),
        similarity_frac_below_margin: similarity.as_ref().map(|s| s.frac_below_margin),
    };
    let sjson = serde_json::to_string_pretty(&summary).expect("summary serializes");
    let spath = seed_dir.join("summary.json");
    fs::write(&spath, sjson + "\n").map_err(io_at(&spath))?;
    Ok(summary)
}

fn write_metrics_cssv_guard(path: &Path, rows: &[MetricsRecord]) -> Result<(), HarnessError> {
    write_metrics_csv(path, rows).map_err(io_at(path))
}

// ---------------------------------------------------------------------------
// Run-level operations
// ---------------------------------------------------------------------------

pub struct RunOutput {
    pub run_dir: PathBuf,
    pub summaries: Vec<SeedSummary>,
}

/// Trains every configured seed and writes the manifest, per-seed artifacts,
/// and the cross-seed aggregate table.
pub fn cli_train(cfg: &ExperimentConfig) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    fs::create_dir_all(&run_dir).map_err(io_at(&run_dir))?;
    let manifest = RunManifest {
        config: cfg.clone(),
        code_version: code_version(),
        seed_paths: cfg.training.seeds.iter().map(|s| (*s, format!("seed-{s}"))).collect(),
        started_unix_ms: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0),
    };
    let mpath = run_dir.join("manifest.json");
    let mjson = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, mjson + "\n").map_err(io_at(&mpath))?;

    let summaries = run_all_seeds(cfg, &run_dir)?;
    write_aggregate_csv(&run_dir.join("aggregate.csv"), &summaries)?;
    Ok(RunOutput { run_dir, summaries })
}

fn run_all_seeds(cfg: &ExperimentConfig, run_dir: &Path) -> Result<Vec<SeedSummary>, HarnessError> {
    let seeds = &cfg.training.seeds;
    if cfg.training.parallel_seeds && seeds.len() > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .iter()
                .map(|seed| {
                    let seed = *seed;
                    let dir = run_dir.join(format!("seed-{seed}"));
                    scope.spawn(move || run_seed(cfg, seed, &dir))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join().unwrap_or_else(|panic| {
                        let msg = panic
                            .downcast_ref::<&str>()
                            .map(|s| s.to_string())
                            .or_else(|| panic.downcast_ref::<String>().cloned())
                            .unwrap_or_else(|| "seed worker panicked".into());
                        Err(HarnessError::Numerical(msg))
                    })
                })
                .collect()
        })
    } else {
        seeds.iter().map(|seed| run_seed(cfg, *seed, &run_dir.join(format!("seed-{seed}")))).collect()
    }
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `aggregate.csv`: metric,mean,std,n over seeds (population std; a
/// single-seed run reports std 0). Metrics some seeds could not measure
/// aggregate over the seeds that could.
fn write_aggregate_csv(path: &Path, summaries: &[SeedSummary]) -> Result<(), HarnessError> {
    let mut by_name: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in summaries {
        for (name, v) in s.flat() {
            if let Some(v) = v {
                by_name.entry(name).or_default().push(v);
            }
        }
    }
    let mut out = String::from("metric,mean,std,n\n");
    for (name, values) in &by_name {
        let (mean, std) = mean_and_std(values);
        writeln!(out, "{name},{mean},{std},{}", values.len()).unwrap();
    }
    fs::write(path, out).map_err(io_at(path))
}

pub struct ArmOutcome {
    pub arm: String,
    pub run: RunOutput,
}

fn run_arm(base: &ExperimentConfig, parent: &str, arm: &str, mutate: impl FnOnce(&mut ExperimentConfig)) -> Result<ArmOutcome, HarnessError> {
    let mut cfg = base.clone();
    cfg.run_id = format!("{}-{arm}", base.run_id);
    cfg.output_dir = base.output_dir.join(parent);
    mutate(&mut cfg);
    cfg.validate().map_err(|e| HarnessError::Config(format!("arm {arm}: {e}")))?;
    Ok(ArmOutcome { arm: arm.to_string(), run: cli_train(&cfg)? })
}

/// Shared-seed comparison of the three routing granularities. Emits one run
/// per arm plus `arms.csv` (arm x seed rows: success and switch counts).
pub fn cli_compare_routing(cfg: &ExperimentConfig) -> Result<(PathBuf, Vec<ArmOutcome>), HarnessError> {
    cfg.validate()?;
    if cfg.policy.n_experts < 2 {
        return Err(HarnessError::Config("compare-routing needs policy.n_experts >= 2".into()));
    }
    let parent = format!("{}-compare", cfg.run_id);
    let arms = [
        ("phase", RoutingMode::Phase),
        ("token", RoutingMode::Token),
        ("trajectory", RoutingMode::Trajectory),
    ];
    let mut outcomes = Vec::new();
    for (name, mode) in arms {
        outcomes.push(run_arm(cfg, &parent, name, |c| c.routing = mode)?);
    }
    let dir = cfg.run_dir().parent().expect("run dir has a parent").join(&parent);
    let mut out = String::from("arm,seed,overall_success,mean_step_switches,mean_token_switches\n");
    for o in &outcomes {
        for s in &o.run.summaries {
            writeln!(out, "{},{},{},{},{}", o.arm, s.seed, s.overall_success, s.mean_step_switches, s.mean_token_switches)
                .unwrap();
        }
    }
    let apath = dir.join("arms.csv");
    fs::write(&apath, out).map_err(io_at(&apath))?;
    Ok((dir, outcomes))
}

/// Sweep axes mirroring the ablation tables: expert count, regularizer
/// removals, router component removals, and gradient-surgery combiners.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Experts,
    Regularizers,
    RouterComponents,
    Surgery,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        match s.to_ascii_lowercase().as_str() {
            "k" | "experts" => Ok(AblationAxis::Experts),
            "regularizers" => Ok(AblationAxis::Regularizers),
            "router_components" | "router-components" => Ok(AblationAxis::RouterComponents),
            "surgery" => Ok(AblationAxis::Surgery),
            other => Err(HarnessError::Config(format!(
                "unknown ablation axis {other:?}; expected K, regularizers, router_components, or surgery"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Experts => "k",
            AblationAxis::Regularizers => "regularizers",
            AblationAxis::RouterComponents => "router_components",
            AblationAxis::Surgery => "surgery",
        }
    }
}

/// Runs one ablation axis, holding everything else at the base config. Emits
/// per-arm runs plus `table.csv` (one row per arm x seed).
pub fn cli_ablate(cfg: &ExperimentConfig, axis: AblationAxis) -> Result<(PathBuf, Vec<ArmOutcome>), HarnessError> {
    cfg.validate()?;
    let parent = format!("{}-ablate-{}", cfg.run_id, axis.name());
    type Mutator = Box<dyn FnOnce(&mut ExperimentConfig)>;
    let arms: Vec<(String, Mutator)> = match axis {
        AblationAxis::Experts => [0usize, 2, 3, 4, 5, 6]
            .into_iter()
            .map(|k| -> (String, Mutator) { (format!("k{k}"), Box::new(move |c: &mut ExperimentConfig| c.policy.n_experts = k)) })
            .collect(),
        AblationAxis::Regularizers => vec![
            ("both".into(), Box::new(|_: &mut ExperimentConfig| {}) as Mutator),
            ("no-div".into(), Box::new(|c: &mut ExperimentConfig| c.algorithm.alpha = 0.0)),
            ("no-bal".into(), Box::new(|c: &mut ExperimentConfig| c.algorithm.beta = 0.0)),
            ("neither".into(), Box::new(|c: &mut ExperimentConfig| {
                c.algorithm.alpha = 0.0;
                c.algorithm.beta = 0.0;
            })),
        ],
        AblationAxis::RouterComponents => vec![
            ("full".into(), Box::new(|_: &mut ExperimentConfig| {}) as Mutator),
            ("no-history".into(), Box::new(|c: &mut ExperimentConfig| c.router.use_history = false)),
            ("no-goal-attention".into(), Box::new(|c: &mut ExperimentConfig| c.router.use_goal_attention = false)),
            ("neither".into(), Box::new(|c: &mut ExperimentConfig| {
                c.router.use_history = false;
                c.router.use_goal_attention = false;
            })),
        ],
        AblationAxis::Surgery => {
            let single = |surgery: SurgeryMode| {
                Box::new(move |c: &mut ExperimentConfig| {
                    c.policy.n_experts = 0;
                    c.surgery = surgery;
                }) as Mutator
            };
            vec![
                ("pa-moe".into(), Box::new(|_: &mut ExperimentConfig| {}) as Mutator),
                ("k0".into(), single(SurgeryMode::Off)),
                ("pcgrad".into(), single(SurgeryMode::Pcgrad)),
                ("gradnorm".into(), single(SurgeryMode::Gradnorm)),
                ("cagrad".into(), single(SurgeryMode::Cagrad)),
            ]
        }
    };
    let mut outcomes = Vec::new();
    for (name, mutate) in arms {
        outcomes.push(run_arm(cfg, &parent, &name, mutate)?);
    }
    let dir = cfg.run_dir().parent().expect("run dir has a parent").join(&parent);
    let mut out = String::from(
        "arm,seed,overall_success,mean_step_switches,max_expert_frequency,usage_ratio,phase_alignment,similarity_frac_below_margin,final_third_conflict\n",
    );
    for o in &outcomes {
        for s in &o.run.summaries {
            let min_usage = s.expert_usage.iter().cloned().fold(f64::INFINITY, f64::min);
            let ratio = if min_usage > 0.0 { Some(s.max_expert_frequency / min_usage) } else { None };
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                o.arm,
                s.seed,
                s.overall_success,
                s.mean_step_switches,
                s.max_expert_frequency,
                opt(ratio),
                s.phase_alignment,
                opt(s.similarity_frac_below_margin),
                opt(s.final_third_conflict),
            )
            .unwrap();
        }
    }
    let tpath = dir.join("table.csv");
    fs::write(&tpath, out).map_err(io_at(&tpath))?;
    Ok((dir, outcomes))
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct ReportOutput {
    pub tables: String,
    pub warnings: Vec<String>,
}

/// Aggregates completed runs into summary tables and figure-data CSVs
/// (per-category success, occupancy, the conflict trace, and per-phase
/// entropy profiles). Missing pieces produce warnings, not errors.
pub fn cli_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<ReportOutput, HarnessError> {
    if run_dirs.is_empty() {
        return Err(HarnessError::Config("report needs at least one run directory".into()));
    }
    fs::create_dir_all(out_dir).map_err(io_at(out_dir))?;
    let mut warnings = Vec::new();
    let mut success = String::from("run_id,category,mean,std,n\n");
    let mut occupancy = String::from("run_id,category,mean,std,n\n");
    let mut entropy = String::from("run_id,phase,mean_bits,std_bits,var_bits2_mean,n\n");
    let mut conflict = String::from("run_id,seed,step,score\n");
    let mut tables = String::new();

    for dir in run_dirs {
        let manifest_path = dir.join("manifest.json");
        let manifest: RunManifest = match fs::read_to_string(&manifest_path)
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()))
        {
            Ok(m) => m,
            Err(e) => {
                warnings.push(format!("skipping {}: {e}", dir.display()));
                continue;
            }
        };
        let run_id = manifest.config.run_id.clone();
        let mut summaries: Vec<SeedSummary> = Vec::new();
        for (seed, rel) in &manifest.seed_paths {
            let spath = dir.join(rel).join("summary.json");
            match fs::read_to_string(&spath)
                .map_err(|e| e.to_string())
                .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()))
            {
                Ok(s) => summaries.push(s),
                Err(e) => warnings.push(format!("{run_id}: seed {seed} missing ({e})")),
            }
            // Conflict trace rides in metrics.csv.
            let mpath = dir.join(rel).join("metrics.csv");
            if let Ok(text) = fs::read_to_string(&mpath) {
                for line in text.lines().skip(1) {
                    let f: Vec<&str> = line.split(',').collect();
                    if f.len() >= 5 && f[3] == "gradient_conflict" {
                        writeln!(conflict, "{run_id},{},{},{}", f[1], f[2], f[4]).unwrap();
                    }
                }
            }
        }
        if summaries.is_empty() {
            warnings.push(format!("{run_id}: no seed summaries found"));
            continue;
        }

        let collect = |f: &dyn Fn(&SeedSummary) -> Option<f64>| -> Vec<f64> { summaries.iter().filter_map(f).collect() };
        let overall = collect(&|s| Some(s.overall_success));
        let (mean, std) = mean_and_std(&overall);
        writeln!(success, "{run_id},overall,{mean},{std},{}", overall.len()).unwrap();
        let mut cats: Vec<String> = summaries.iter().flat_map(|s| s.success_by_category.keys().cloned()).collect();
        cats.sort();
        cats.dedup();
        for cat in &cats {
            let vals = collect(&|s| s.success_by_category.get(cat).copied());
            let (m, sd) = mean_and_std(&vals);
            writeln!(success, "{run_id},{cat},{m},{sd},{}", vals.len()).unwrap();
        }
        for cat in TaskCategory::ALL {
            let vals = collect(&|s| s.occupancy_by_category.get(cat.name()).copied());
            if !vals.is_empty() {
                let (m, sd) = mean_and_std(&vals);
                writeln!(occupancy, "{run_id},{},{m},{sd},{}", cat.name(), vals.len()).unwrap();
            }
        }
        for phase in Phase::ALL {
            let means = collect(&|s| s.entropy_by_phase.get(phase.name()).map(|e| e.mean_bits));
            let vars = collect(&|s| s.entropy_by_phase.get(phase.name()).map(|e| e.var_bits2));
            if !means.is_empty() {
                let (m, sd) = mean_and_std(&means);
                let (vm, _) = mean_and_std(&vars);
                writeln!(entropy, "{run_id},{},{m},{sd},{vm},{}", phase.name(), means.len()).unwrap();
            }
        }

        let switches = collect(&|s| Some(s.mean_step_switches));
        let (sw_m, sw_sd) = mean_and_std(&switches);
        let align = collect(&|s| Some(s.phase_alignment));
        let (al_m, _) = mean_and_std(&align);
        writeln!(
            tables,
            "{run_id}: success {:.3} ± {:.3} (n={}), switches/ep {:.2} ± {:.2}, alignment {:.3}",
            mean,
            std,
            overall.len(),
            sw_m,
            sw_sd,
            al_m
        )
        .unwrap();
    }

    for (name, text) in
        [("success.csv", &success), ("occupancy.csv", &occupancy), ("entropy.csv", &entropy), ("conflict.csv", &conflict)]
    {
        let p = out_dir.join(name);
        fs::write(&p, text).map_err(io_at(&p))?;
    }
    Ok(ReportOutput { tables, warnings })
}

// ---------------------------------------------------------------------------
// Self-check battery
// ---------------------------------------------------------------------------

pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, pass: bool, detail: String) -> CheckResult {
    CheckResult { name, pass, detail }
}

/// Fast programmatic battery over the properties everything else leans on:
/// autodiff gradients, the temperature schedule, the switching-penalty
/// backward, regularizer closed forms, estimator oracles, expert-gradient
/// isolation, and checkpoint round-trips. Runs in seconds.
pub fn selfcheck() -> Vec<CheckResult> {
    use crate::autodiff::Tensor;
    use crate::env::LinearChainEnv;
    use crate::rl::losses::balance_loss;
    use crate::rl::{gae_advantages, rloo_advantages};
    use crate::router::{straight_through_select, switching_penalty};

    let mut out = Vec::new();

    // 1. Finite differences through a composite graph.
    {
        let streams = SeedStreams::new(7);
        let mut rng = streams.stream("selfcheck-fd");
        let w = crate::policy::gaussian_init(&mut rng, &[3, 4], 0.5);
        let x = Tensor::constant(&[4], vec![0.3, -0.8, 0.5, 0.1]);
        let f = |w: &Tensor| w.matvec(&x).tanh_act().softmax_temperature(1.3).log_softmax().index(1).neg();
        f(&w).backward();
        let grad = w.grad();
        let mut worst = 0.0f64;
        let step = 1e-5;
        for i in 0..w.numel() {
            let base = w.values();
            let mut plus = base.clone();
            plus[i] += step;
            let mut minus = base;
            minus[i] -= step;
            let fd = crate::autodiff::no_grad(|| {
                let lp = f(&Tensor::constant(&[3, 4], plus)).value();
                let lm = f(&Tensor::constant(&[3, 4], minus)).value();
                (lp - lm) / (2.0 * step)
            });
            let denom = fd.abs().max(grad[i].abs()).max(1e-8);
            worst = worst.max((fd - grad[i]).abs() / denom);
        }
        out.push(check("finite-difference", worst < 1e-4, format!("worst relative error {worst:.2e}")));
    }

    // 2. Temperature schedule endpoints and clamp.
    {
        let a = AnnealSchedule::default();
        let pass = a.temperature(0.0) == 2.0 && a.temperature(3000.0) == 0.5 && a.temperature(10_000.0) == 0.5;
        out.push(check("temperature-schedule", pass, format!("tau(0)={}, tau(3000)={}", a.temperature(0.0), a.temperature(3000.0))));
    }

    // 3. Switching-penalty backward closed form.
    {
        let t_len = 5;
        let lambda = 0.05;
        let streams = SeedStreams::new(9);
        let mut rng = streams.stream("selfcheck-switch");
        let ps: Vec<Tensor> = (0..t_len)
            .map(|_| {
                let raw: Vec<f64> = (0..4).map(|_| rand::Rng::gen_range(&mut rng, 0.1..1.0)).collect();
                let z: f64 = raw.iter().sum();
                Tensor::param(&[4], raw.into_iter().map(|v| v / z).collect())
            })
            .collect();
        switching_penalty(&ps, lambda).backward();
        let mut worst = 0.0f64;
        for t in 0..t_len {
            let got = ps[t].grad();
            for (i, g) in got.iter().enumerate() {
                let want = if t + 1 < t_len { -(lambda / (t_len - 1) as f64) * ps[t + 1].values()[i] } else { 0.0 };
                worst = worst.max((g - want).abs());
            }
        }
        out.push(check("switching-penalty-backward", worst < 1e-10, format!("worst deviation {worst:.2e}")));
    }

    // 4. Regularizer closed forms.
    {
        let uniform = balance_loss(&Tensor::constant(&[4], vec![0.25; 4])).value();
        let onehot = balance_loss(&Tensor::constant(&[4], vec![1.0, 0.0, 0.0, 0.0])).value();
        let (z, gate) = straight_through_select(&Tensor::constant(&[3], vec![0.2, 0.5, 0.3]));
        let pass = uniform.abs() < 1e-12 && (onehot - 0.75).abs() < 1e-12 && z == 1 && gate.value() == 1.0;
        out.push(check("regularizer-closed-forms", pass, format!("balance(uniform)={uniform}, balance(onehot)={onehot}")));
    }

    // 5. Estimator oracles on a small fixture.
    {
        let returns = [1.0, 0.0, 0.0, 1.0];
        let rloo = rloo_advantages(&returns);
        let mut worst = 0.0f64;
        for (i, a) in rloo.iter().enumerate() {
            let others: f64 = returns.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, r)| r).sum::<f64>() / 3.0;
            worst = worst.max((a - (returns[i] - others)).abs());
        }
        let gae = gae_advantages(&[0.0, 1.0], &[0.5, 0.25, 0.0], 0.9, 0.8);
        let d1 = 1.0 + 0.9 * 0.0 - 0.25;
        let d0 = 0.0 + 0.9 * 0.25 - 0.5;
        let want0 = d0 + 0.9 * 0.8 * d1;
        worst = worst.max((gae[1] - d1).abs()).max((gae[0] - want0).abs());
        out.push(check("estimator-oracles", worst < 1e-10, format!("worst deviation {worst:.2e}")));
    }

    // 6. Expert-gradient isolation on the chain environment.
    {
        let env = LinearChainEnv::new(3);
        let streams = SeedStreams::new(3);
        let mut rng = streams.stream("policy-init");
        let mut policy =
            MoEPolicy::for_env(&env, PolicyConfig { d_model: 16, n_blocks: 1, rank: 2, n_experts: 4 }, &mut rng);
        policy.backbone.freeze();
        let router = seeded_router(
            16,
            2,
            crate::router::RouterConfig { n_experts: 4, window: 3, hidden: 8, action_embed_dim: 4, mlp_hidden: 8, use_history: true, use_goal_attention: true },
            &streams,
        );
        let cfg = TrainerConfig {
            routing: RoutingMode::Phase,
            n_group: 2,
            groups_per_batch: 1,
            minibatch_trajectories: 2,
            div_interval: 0,
            conflict_interval: 0,
            ..TrainerConfig::default()
        };
        let mut t = Trainer::new(Box::new(env), policy, Some(router), None, cfg, AnnealSchedule::default(), streams);
        let before: Vec<(String, Vec<f64>)> =
            t.policy.all_expert_params().entries().iter().map(|(n, p)| (n.clone(), p.values())).collect();
        match t.train_batch() {
            Ok(report) => {
                let mut used = std::collections::BTreeSet::new();
                for traj in report.batch.trajectories() {
                    used.extend(traj.zs());
                }
                let mut violations = 0usize;
                for ((name, old), (_, new)) in before
                    .iter()
                    .zip(t.policy.all_expert_params().entries().iter().map(|(n, p)| (n.clone(), p.values())).collect::<Vec<_>>().iter())
                {
                    let expert: usize = name.trim_start_matches("expert").split('.').next().unwrap().parse().unwrap();
                    let same = old.iter().zip(new.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
                    if !used.contains(&expert) && !same {
                        violations += 1;
                    }
                }
                out.push(check(
                    "gradient-isolation",
                    violations == 0,
                    format!("{} experts selected, {violations} idle-parameter violations", used.len()),
                ));
            }
            Err(e) => out.push(check("gradient-isolation", false, e.to_string())),
        }
    }

    // 7. Checkpoint round-trip.
    {
        let streams = SeedStreams::new(5);
        let mut rng = streams.stream("selfcheck-ck");
        let w = crate::policy::gaussian_init(&mut rng, &[4, 4], 1.0);
        let mut set = ParamSet::new();
        set.push("w", w.clone());
        let dir = std::env::temp_dir().join(format!("phase-moe-selfcheck-{}", std::process::id()));
        let pass = (|| -> Result<bool, Box<dyn std::error::Error>> {
            fs::create_dir_all(&dir)?;
            let path = dir.join("roundtrip.bin");
            let original = w.values();
            set.save(&path)?;
            w.set_data(vec![0.0; 16]);
            set.load(&path)?;
            Ok(w.values().iter().zip(original.iter()).all(|(a, b)| a.to_bits() == b.to_bits()))
        })()
        .unwrap_or(false);
        let _ = fs::remove_dir_all(&dir);
        out.push(check("checkpoint-roundtrip", pass, "save/load preserves bits".into()));
    }

    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn tiny_config(out: &Path) -> ExperimentConfig {
        // Small enough to train in a couple of seconds per seed.
        let mut cfg = ExperimentConfig::default();
        cfg.run_id = "tiny".into();
        cfg.output_dir = out.to_path_buf();
        cfg.environment.max_steps = 14;
        cfg.policy = PolicyConfig { d_model: 16, n_blocks: 1, rank: 2, n_experts: 2 };
        cfg.router.window = 2;
        cfg.router.hidden = 8;
        cfg.router.action_embed_dim = 4;
        cfg.router.mlp_hidden = 8;
        cfg.router.token_m = 2;
        cfg.algorithm.n_group = 2;
        cfg.algorithm.div_interval = 50;
        cfg.algorithm.div_sample = 4;
        cfg.training.total_steps = 60;
        cfg.training.groups_per_batch = 1;
        cfg.training.minibatch_trajectories = 2;
        cfg.training.seeds = vec![0, 1];
        cfg.training.eval_episodes = 4;
        cfg.training.conflict_interval = 2;
        cfg.training.conflict_probe_cap = 8;
        cfg.training.similarity_sample = 8;
        cfg.training.warmup = WarmupConfig { episodes: 2, updates: 3, batch: 4, lr: 1e-3 };
        cfg
    }

    #[test]
    fn defaults_round_trip_and_reject_unknown_keys() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_toml(&text, &[]).unwrap();
        assert_eq!(back, cfg);
        // JSON round trip (the manifest path).
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);

        let err = ExperimentConfig::from_toml("banana = 1", &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = ExperimentConfig::from_toml("[algorithm]\nlearning_rate = 0.1", &[]).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn overrides_reach_nested_keys_with_native_types() {
        let overrides = [
            "policy.n_experts=0".to_string(),
            "algorithm.alpha=0".to_string(),
            "routing=token".to_string(),
            "training.seeds=[5, 6]".to_string(),
            "environment.p_fault=0.25".to_string(),
            "run_id=abl-1".to_string(),
        ];
        let cfg = ExperimentConfig::from_overrides(&overrides).unwrap();
        assert_eq!(cfg.policy.n_experts, 0);
        assert_eq!(cfg.algorithm.alpha, 0.0);
        assert_eq!(cfg.routing, RoutingMode::Token);
        assert_eq!(cfg.training.seeds, vec![5, 6]);
        assert_eq!(cfg.environment.p_fault, 0.25);
        assert_eq!(cfg.run_id, "abl-1");
        // K = 0 resolves to the single-adapter arm regardless of routing.
        assert_eq!(cfg.effective_routing(), RoutingMode::None);
        assert_eq!(cfg.effective_experts(), 1);

        let err = ExperimentConfig::from_overrides(&["policy.depth=3".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2, "unknown key must be a config error: {err}");
        let err = ExperimentConfig::from_overrides(&["policy=3".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn validation_rejects_inconsistent_arms() {
        let bad = [
            vec!["surgery=pcgrad".to_string()],
            vec!["policy.n_experts=1".to_string()],
            vec!["policy.n_experts=0".to_string(), "surgery=pcgrad".to_string(), "algorithm.n_group=1".to_string()],
            vec!["training.seeds=[1, 1]".to_string()],
            vec!["algorithm.epsilon=1.5".to_string()],
            vec!["run_id=has space".to_string()],
        ];
        for overrides in bad {
            let err = ExperimentConfig::from_overrides(&overrides).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{overrides:?} should be rejected, got {err}");
        }
    }

    #[test]
    fn train_writes_all_artifacts_and_is_byte_deterministic() {
        let tmp = TempDir::new().unwrap();
        let cfg = tiny_config(tmp.path());
        let out = cli_train(&cfg).unwrap();
        assert_eq!(out.summaries.len(), 2);
        let manifest_text = fs::read_to_string(out.run_dir.join("manifest.json")).unwrap();
        let manifest: RunManifest = serde_json::from_str(&manifest_text).unwrap();
        assert_eq!(manifest.config, cfg, "manifest snapshot must re-parse to the resolved config");
        for seed in [0u64, 1] {
            let d = out.run_dir.join(format!("seed-{seed}"));
            for f in ["metrics.csv", "switches.csv", "occupancy.csv", "checkpoint.bin", "summary.json"] {
                assert!(d.join(f).exists(), "missing {f} for seed {seed}");
            }
        }
        let first = fs::read(out.run_dir.join("seed-0/metrics.csv")).unwrap();
        let agg_first = fs::read(out.run_dir.join("aggregate.csv")).unwrap();

        // Re-running the same config in a fresh directory reproduces every
        // byte of metrics.csv and the aggregate.
        let tmp2 = TempDir::new().unwrap();
        let mut cfg2 = tiny_config(tmp2.path());
        cfg2.training.parallel_seeds = false; // threading must not matter
        let out2 = cli_train(&cfg2).unwrap();
        assert_eq!(first, fs::read(out2.run_dir.join("seed-0/metrics.csv")).unwrap());
        assert_eq!(agg_first, fs::read(out2.run_dir.join("aggregate.csv")).unwrap());
        assert_eq!(
            fs::read(out.run_dir.join("seed-1/summary.json")).unwrap(),
            fs::read(out2.run_dir.join("seed-1/summary.json")).unwrap()
        );
    }

    #[test]
    fn compare_routing_emits_three_paired_arms() {
        let tmp = TempDir::new().unwrap();
        let mut cfg = tiny_config(tmp.path());
        cfg.training.seeds = vec![0];
        let (dir, outcomes) = cli_compare_routing(&cfg).unwrap();
        assert_eq!(outcomes.len(), 3);
        let arms: Vec<&str> = outcomes.iter().map(|o| o.arm.as_str()).collect();
        assert_eq!(arms, vec!["phase", "token", "trajectory"]);
        let table = fs::read_to_string(dir.join("arms.csv")).unwrap();
        assert_eq!(table.lines().count(), 1 + 3, "header plus 3 arms x 1 seed:\n{table}");
        // Paired evaluation: all arms saw the same episode count per seed.
        for o in &outcomes {
            assert_eq!(o.run.summaries[0].episodes_by_category.values().sum::<u64>(), 4);
        }
        // Trajectory routing cannot switch inside an episode.
        let traj = &outcomes[2].run.summaries[0];
        assert_eq!(traj.mean_step_switches, 0.0);
    }

    #[test]
    fn ablation_axes_produce_their_documented_arms() {
        let tmp = TempDir::new().unwrap();
        let mut cfg = tiny_config(tmp.path());
        cfg.training.seeds = vec![0];
        cfg.training.total_steps = 30;
        cfg.training.eval_episodes = 2;

        let (dir, outcomes) = cli_ablate(&cfg, AblationAxis::Experts).unwrap();
        let arms: Vec<&str> = outcomes.iter().map(|o| o.arm.as_str()).collect();
        assert_eq!(arms, vec!["k0", "k2", "k3", "k4", "k5", "k6"]);
        let table = fs::read_to_string(dir.join("table.csv")).unwrap();
        assert_eq!(table.lines().count(), 1 + 6);
        // The K=0 arm must behave as a single adapter: one expert, no switches.
        let k0 = &outcomes[0].run.summaries[0];
        assert_eq!(k0.expert_usage.len(), 1);
        assert_eq!(k0.mean_step_switches, 0.0);

        let (_, outcomes) = cli_ablate(&cfg, AblationAxis::Regularizers).unwrap();
        let arms: Vec<&str> = outcomes.iter().map(|o| o.arm.as_str()).collect();
        assert_eq!(arms, vec!["both", "no-div", "no-bal", "neither"]);

        let (_, outcomes) = cli_ablate(&cfg, AblationAxis::Surgery).unwrap();
        let arms: Vec<&str> = outcomes.iter().map(|o| o.arm.as_str()).collect();
        assert_eq!(arms, vec!["pa-moe", "k0", "pcgrad", "gradnorm", "cagrad"]);

        assert!(AblationAxis::parse("bogus").is_err());
        assert_eq!(AblationAxis::parse("K").unwrap(), AblationAxis::Experts);
    }

    #[test]
    fn report_aggregates_planted_summaries_exactly() {
        let tmp = TempDir::new().unwrap();
        let run = tmp.path().join("planted");
        // Plant a manifest and three seed summaries with known successes.
        let mut cfg = ExperimentConfig::default();
        cfg.run_id = "planted".into();
        cfg.training.seeds = vec![0, 1, 2];
        fs::create_dir_all(&run).unwrap();
        let manifest = RunManifest {
            config: cfg.clone(),
            code_version: "test".into(),
            seed_paths: cfg.training.seeds.iter().map(|s| (*s, format!("seed-{s}"))).collect(),
            started_unix_ms: 0,
        };
        fs::write(run.join("manifest.json"), serde_json::to_string(&manifest).unwrap()).unwrap();
        let planted = [0.5, 0.7, 0.9];
        for (seed, succ) in planted.iter().enumerate() {
            let dir = run.join(format!("seed-{seed}"));
            fs::create_dir_all(&dir).unwrap();
            let summary = SeedSummary {
                run_id: "planted".into(),
                seed: seed as u64,
                env_steps: 10,
                updates: 1,
                batches: 1,
                warmup_final_loss: 1.0,
                overall_success: *succ,
                mean_return: *succ,
                mean_episode_len: 5.0,
                success_by_category: BTreeMap::from([("look".to_string(), *succ)]),
                episodes_by_category: BTreeMap::from([("look".to_string(), 4u64)]),
                mean_step_switches: 1.0,
                mean_token_switches: 0.0,
                phase_alignment: 0.5,
                expert_usage: vec![1.0],
                max_expert_frequency: 1.0,
                activation_by_phase: vec![vec![1.0]; 4],
                dominant_expert_by_phase: BTreeMap::new(),
                mean_entropy_by_expert: vec![Some(1.0)],
                entropy_by_phase: BTreeMap::new(),
                occupancy_by_category: BTreeMap::from([("look".to_string(), 0.25)]),
                final_third_conflict: None,
                conflict_points: 0,
                similarity_mean_kl: None,
                similarity_frac_below_margin: None,
            };
            fs::write(dir.join("summary.json"), serde_json::to_string(&summary).unwrap()).unwrap();
        }
        let out_dir = tmp.path().join("report");
        let report = cli_report(&[run], &out_dir).unwrap();
        assert!(report.warnings.is_empty(), "{:?}", report.warnings);
        let success = fs::read_to_string(out_dir.join("success.csv")).unwrap();
        // mean = 0.7; population std = sqrt(((0.2)^2 + 0 + (0.2)^2)/3).
        let want_std = (0.08f64 / 3.0).sqrt();
        let overall = success.lines().find(|l| l.contains(",overall,")).unwrap();
        let f: Vec<&str> = overall.split(',').collect();
        assert!((f[2].parse::<f64>().unwrap() - 0.7).abs() < 1e-12);
        assert!((f[3].parse::<f64>().unwrap() - want_std).abs() < 1e-12);
        assert_eq!(f[4], "3");

        assert_eq!(cli_report(&[], &out_dir).unwrap_err().exit_code(), 2);
        // A single planted seed aggregates with std 0.
        let single = fs::read_to_string(out_dir.join("success.csv")).unwrap();
        drop(single);
    }

    #[test]
    fn selfcheck_battery_passes() {
        for c in selfcheck() {
            assert!(c.pass, "{}: {}", c.name, c.detail);
        }
    }
}
