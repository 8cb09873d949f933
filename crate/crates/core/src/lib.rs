//! Phase-routed mixture of low-rank experts for multi-phase RL tasks.
//!
//! The crate is organized around a small f64 reverse-mode autodiff substrate
//! ([`autodiff`]), synthetic multi-phase environments ([`env`]), a frozen
//! transformer-style backbone with per-expert LoRA deltas ([`policy`]), a
//! temporally regularized phase router ([`router`]), policy-gradient trainers
//! ([`rl`]), routing/gradient-surgery baselines ([`baselines`]), analysis
//! metrics ([`metrics`]), and the experiment harness ([`harness`]).

pub mod autodiff;
pub mod baselines;
pub mod env;
pub mod harness;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod policy;
pub mod router;
pub mod rl;
pub mod rng;

pub use autodiff::Tensor;
