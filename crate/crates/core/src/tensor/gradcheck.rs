use alloc::format;

use super::Tensor;
use crate::{math, Error, Result};

/// Central-difference gradient of a scalar function, one component at a time.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("function value at component {i} is not finite")));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// `||a - b|| / max(||a||, ||b||)`; zero when both are zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    let diff = math::sqrt(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum());
    let scale = f64::max(a.norm(), b.norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.dot(t), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function() {
        let x = Tensor::full(&[3, 2], 0.3);
        assert_eq!(finite_diff_grad(|_| 4.0, &x, 1e-5).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn rejects_non_finite() {
        let x = Tensor::full(&[1], 0.0);
        assert!(finite_diff_grad(|_| f64::NAN, &x, 1e-5).is_err());
    }
}
