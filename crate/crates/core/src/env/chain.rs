//! Tiny two-phase chain used by fast tests.
//!
//! The agent walks a chain of `2 * half_length` cells: action 0 advances
//! through the first half, action 1 through the second, the wrong action
//! stays put. Reward is +1 on reaching the end. The oracle labels the first
//! half Explore and the second Manipulate, giving a minimal environment with
//! a genuine phase switch at a fraction of the gridworld's cost.

use super::{EnvError, Environment, Phase, ResetOut, StepOut, TaskCategory};

pub struct LinearChainEnv {
    half_length: usize,
    position: usize,
    steps: usize,
    done: bool,
}

impl LinearChainEnv {
    pub fn new(half_length: usize) -> Self {
        assert!(half_length >= 1, "chain needs at least one cell per half");
        LinearChainEnv { half_length, position: 0, steps: 0, done: true }
    }

    fn len(&self) -> usize {
        2 * self.half_length
    }

    fn observation(&self) -> Vec<f64> {
        let mut obs = vec![0.0; self.len()];
        if self.position < self.len() {
            obs[self.position] = 1.0;
        }
        obs
    }
}

impl Environment for LinearChainEnv {
    fn obs_dim(&self) -> usize {
        self.len()
    }

    fn obs_groups(&self) -> Vec<usize> {
        vec![self.len()]
    }

    fn goal_dim(&self) -> usize {
        1
    }

    fn action_count(&self) -> usize {
        2
    }

    fn max_steps(&self) -> usize {
        4 * self.len()
    }

    fn reset(&mut self, _layout_seed: u64, _fault_seed: u64) -> ResetOut {
        self.position = 0;
        self.steps = 0;
        self.done = false;
        ResetOut { observation: self.observation(), goal: vec![1.0], category: TaskCategory::PickPlace }
    }

    fn step(&mut self, action: usize) -> Result<StepOut, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        if action >= 2 {
            return Err(EnvError::InvalidAction(action));
        }
        let correct = if self.position < self.half_length { 0 } else { 1 };
        if action == correct {
            self.position += 1;
        }
        self.steps += 1;
        let success = self.position >= self.len();
        self.done = success || self.steps >= self.max_steps();
        Ok(StepOut {
            observation: self.observation(),
            reward: if success { 1.0 } else { 0.0 },
            done: self.done,
            success,
        })
    }

    fn oracle_phase(&self) -> Phase {
        if self.position < self.half_length {
            Phase::Explore
        } else {
            Phase::Manipulate
        }
    }

    fn state_fingerprint(&self) -> u64 {
        self.position as u64
    }

    fn scripted_distribution(&self) -> Vec<f64> {
        let correct = if self.position < self.half_length { 0 } else { 1 };
        let mut p = vec![0.1; 2];
        p[correct] = 0.9;
        p
    }
}
