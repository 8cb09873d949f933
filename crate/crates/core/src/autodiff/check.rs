//! Finite-difference gradient checking, used by the test suites and the
//! `selfcheck` harness command.

use super::tensor::{no_grad, Tensor};

/// Central-difference gradient check for a scalar-valued function of the
/// given leaf tensors. Re-evaluates `f` with each input element perturbed
/// by `±step` and compares against the analytic gradients from one backward
/// pass. Returns the worst scaled error
/// `|analytic - fd| / max(1, |analytic|, |fd|)`, which reads as a relative
/// error for large gradients and an absolute one near zero.
pub fn fd_gradcheck(inputs: &[Tensor], f: impl Fn() -> Tensor, step: f64) -> f64 {
    for t in inputs {
        assert!(t.requires_grad(), "fd_gradcheck inputs must require grad");
        t.zero_grad();
    }
    let loss = f();
    assert_eq!(loss.numel(), 1, "fd_gradcheck expects a scalar function");
    loss.backward();
    let analytic: Vec<Vec<f64>> = inputs.iter().map(|t| t.grad()).collect();

    let eval = || no_grad(|| f().value());
    let mut worst: f64 = 0.0;
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let orig = t.with_data(|d| d[j]);
            t.with_data_mut(|d| d[j] = orig + step);
            let up = eval();
            t.with_data_mut(|d| d[j] = orig - step);
            let down = eval();
            t.with_data_mut(|d| d[j] = orig);
            let fd = (up - down) / (2.0 * step);
            let a = analytic[ti][j];
            let err = (a - fd).abs() / 1.0f64.max(a.abs()).max(fd.abs());
            if err > worst {
                worst = err;
            }
        }
    }
    for t in inputs {
        t.zero_grad();
    }
    worst
}
