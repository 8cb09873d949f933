//! Synthetic multi-phase environments.
//!
//! [`PhasedGridWorld`] is the main benchmark: object-interaction tasks on a
//! 7x7 grid whose episodes traverse explore / navigate / manipulate /
//! recover regimes, with an oracle labeling function used by metrics and
//! gradient probes (never by the policy). [`LinearChainEnv`] is a two-phase
//! toy with enumerable optimal returns for trainer and estimator tests.

mod chain;
mod gridworld;

pub use chain::LinearChainEnv;
pub use gridworld::{EnvConfig, PhasedGridWorld};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid action id {0}")]
    InvalidAction(usize),
    #[error("step() called on a finished episode")]
    EpisodeFinished,
    #[error("invalid category mix: {0}")]
    BadCategoryMix(String),
}

/// Task families. `PickPlace` and `Look` are the simple tier (one
/// manipulation sub-step); the rest require multi-step interactions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskCategory {
    PickPlace,
    Look,
    Heat,
    Cool,
    Clean,
    Pick2,
}

impl TaskCategory {
    pub const ALL: [TaskCategory; 6] =
        [TaskCategory::PickPlace, TaskCategory::Look, TaskCategory::Heat, TaskCategory::Cool, TaskCategory::Clean, TaskCategory::Pick2];

    pub fn is_simple(self) -> bool {
        matches!(self, TaskCategory::PickPlace | TaskCategory::Look)
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|c| *c == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskCategory::PickPlace => "pick_place",
            TaskCategory::Look => "look",
            TaskCategory::Heat => "heat",
            TaskCategory::Cool => "cool",
            TaskCategory::Clean => "clean",
            TaskCategory::Pick2 => "pick2",
        }
    }
}

/// Oracle behavioral phase of a state. Ground truth for metrics and probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Explore,
    Navigate,
    Manipulate,
    Recover,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Explore, Phase::Navigate, Phase::Manipulate, Phase::Recover];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|p| *p == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Explore => "explore",
            Phase::Navigate => "navigate",
            Phase::Manipulate => "manipulate",
            Phase::Recover => "recover",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResetOut {
    pub observation: Vec<f64>,
    pub goal: Vec<f64>,
    pub category: TaskCategory,
}

#[derive(Debug, Clone)]
pub struct StepOut {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

/// Common environment interface for the trainer and harness.
pub trait Environment {
    fn obs_dim(&self) -> usize;
    /// Feature-group widths (summing to `obs_dim`); each group becomes one
    /// backbone token.
    fn obs_groups(&self) -> Vec<usize>;
    fn goal_dim(&self) -> usize;
    fn action_count(&self) -> usize;
    fn max_steps(&self) -> usize;
    /// Starts an episode. Layout (positions, task) derives from
    /// `layout_seed`; fault injection draws from its own `fault_seed` stream
    /// so trajectories sharing a layout can diverge independently.
    fn reset(&mut self, layout_seed: u64, fault_seed: u64) -> ResetOut;
    fn step(&mut self, action: usize) -> Result<StepOut, EnvError>;
    /// Oracle phase of the current state (before acting).
    fn oracle_phase(&self) -> Phase;
    /// Discrete state fingerprint for anchor-state grouping; excludes the
    /// step counter so revisited decision states collide on purpose.
    fn state_fingerprint(&self) -> u64;
    /// Soft action distribution of the scripted semi-competent controller
    /// for the current state; behavior-cloning target during warm-up.
    fn scripted_distribution(&self) -> Vec<f64>;
}
