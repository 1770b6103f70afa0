//! Central-difference gradient estimation.
//!
//! This is the independent oracle used to verify the reverse-mode engine:
//! it sees only function values and never touches the differentiation graph.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar-valued map at `theta`:
/// `(f(theta + h*e_i) - f(theta - h*e_i)) / (2h)` per coordinate.
///
/// `f` is called with temporarily perturbed copies of `theta`; the input is
/// restored before returning.
pub fn finite_diff_grad<F>(f: F, theta: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: Fn(&Tensor<f64>) -> f64,
{
    if h <= 0.0 {
        return Err(Error::usage(format!("step size must be positive, got {h}")));
    }
    let mut probe = theta.clone();
    let mut grad = vec![0.0; theta.numel()];
    for i in 0..theta.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite function value at coordinate {i}: f+={fp}, f-={fm}"
            )));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(theta.shape().to_vec(), grad)
}

/// Relative error between an analytic and a numeric gradient entry.
///
/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps finite-difference
/// round-off on near-zero entries from reading as large relative errors.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Max relative error over two same-shape gradient tensors.
pub fn max_rel_err(analytic: &Tensor<f64>, numeric: &Tensor<f64>, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| rel_err(a, b, floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative_at_three() {
        let theta = Tensor::new(vec![1], vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &theta, 1e-6).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6, "{}", g.data()[0]);
        // input restored
        assert_eq!(theta.data()[0], 3.0);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let theta = Tensor::new(vec![3], vec![0.3, -1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|_| 42.0, &theta, 1e-6).unwrap();
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn softmax_sum_is_conserved() {
        // f = sum(softmax(theta)) == 1 everywhere, so the gradient vanishes.
        let theta = Tensor::new(vec![3], vec![0.5, -0.2, 1.3]).unwrap();
        let f = |t: &Tensor<f64>| {
            let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = t.data().iter().map(|&v| (v - max).exp()).sum();
            t.data().iter().map(|&v| (v - max).exp() / sum).sum()
        };
        let g = finite_diff_grad(f, &theta, 1e-6).unwrap();
        assert!(g.data().iter().all(|&x| x.abs() < 1e-9), "{:?}", g.data());
    }

    #[test]
    fn rejects_non_positive_step() {
        let theta = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(finite_diff_grad(|t| t.data()[0], &theta, 0.0).is_err());
    }
}
