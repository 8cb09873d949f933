//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Define-by-run: every op allocates a node that remembers its parents and a
//! backward closure. [`Tensor::backward`] walks the recorded graph once in
//! reverse topological order and accumulates gradients into every reachable
//! leaf. Leaves that are not reachable from the loss keep an exactly-zero
//! gradient; this is load-bearing for the expert gradient-isolation audit,
//! so nothing here may "approximately" zero a gradient.
//!
//! Conventions:
//! - shapes are `[n]` (vector) or `[r, c]` (row-major matrix); a scalar is `[1]`;
//! - shape mismatches and domain violations (e.g. non-positive softmax
//!   temperature) panic: they are programming errors, not runtime conditions;
//! - `no_grad` suppresses graph recording, so rollouts allocate no tape.

pub mod check;
mod ops;
mod tensor;

pub use ops::lstm_step;
pub use tensor::{no_grad, recording_enabled, Tensor};

/// Argmax with lowest-index tie-breaking. Panics on an empty slice.
pub fn argmax(xs: &[f64]) -> usize {
    assert!(!xs.is_empty(), "argmax over empty slice");
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
