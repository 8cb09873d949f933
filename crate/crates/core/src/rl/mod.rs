//! Reinforcement-learning machinery: advantage estimators, loss assembly,
//! and the trainer that ties environments, policy, and router together.

pub mod advantages;
pub mod losses;
pub mod trainer;

pub use advantages::{gae_advantages, gigpo_advantages, grpo_advantages, rloo_advantages};
pub use losses::{balance_loss, clipped_surrogate, diversity_loss, BufferedState, ExpertBuffer};
pub use trainer::{behavior_clone, BatchReport, LossBreakdown, Trainer, TrainerConfig, TrainError, Trajectory, WarmupConfig};

use serde::{Deserialize, Serialize};

/// Base policy-gradient algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Ppo,
    Rloo,
    Grpo,
    Gigpo,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Ppo => "ppo",
            Algorithm::Rloo => "rloo",
            Algorithm::Grpo => "grpo",
            Algorithm::Gigpo => "gigpo",
        }
    }
}

/// Routing granularity (`none` = single shared adapter, no router).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    Phase,
    Token,
    TokenTop2,
    Trajectory,
    None,
}

impl RoutingMode {
    pub fn name(self) -> &'static str {
        match self {
            RoutingMode::Phase => "phase",
            RoutingMode::Token => "token",
            RoutingMode::TokenTop2 => "token_top2",
            RoutingMode::Trajectory => "trajectory",
            RoutingMode::None => "none",
        }
    }

    pub fn is_token_level(self) -> bool {
        matches!(self, RoutingMode::Token | RoutingMode::TokenTop2)
    }
}

/// Gradient-surgery combiner applied to per-phase gradients (single-adapter
/// arms only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurgeryMode {
    Off,
    Pcgrad,
    Gradnorm,
    Cagrad,
}

impl SurgeryMode {
    pub fn name(self) -> &'static str {
        match self {
            SurgeryMode::Off => "off",
            SurgeryMode::Pcgrad => "pcgrad",
            SurgeryMode::Gradnorm => "gradnorm",
            SurgeryMode::Cagrad => "cagrad",
        }
    }
}
