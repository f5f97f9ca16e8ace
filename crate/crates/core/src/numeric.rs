//! Finite-difference gradient oracle.

use crate::tensor::Tensor;

/// Denominator floor used by [`relative_error`].
pub const REL_ERR_GUARD: f64 = 1e-8;

/// Central differences `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every
/// coordinate of `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::from_parts(x.shape().to_vec(), grad)
}

/// `max |a − b| / max(max |a|, max |b|, 1e-8)`: the largest coordinate error
/// relative to the magnitude of the gradient tensor as a whole.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let abs_max = |t: &Tensor| t.data().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let scale = abs_max(analytic).max(abs_max(numeric)).max(REL_ERR_GUARD);
    analytic.max_abs_diff(numeric) / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_gives_ones() {
        let x = Tensor::vector(&[0.3, -2.0, 5.0]);
        let g = finite_diff_grad(|t| t.sum(), &x, 1e-5);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn squared_norm_matches_analytic() {
        let x = Tensor::vector(&[1.0, 2.0]);
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_gives_zeros() {
        let x = Tensor::vector(&[1.0, 2.0, 3.0]);
        let g = finite_diff_grad(|_| 4.2, &x, 1e-5);
        assert_eq!(g, Tensor::zeros(&[3]));
    }

    #[test]
    fn relative_error_guard() {
        let z = Tensor::zeros(&[2]);
        assert_eq!(relative_error(&z, &z), 0.0);
        let a = Tensor::vector(&[1.0, 2.0]);
        let b = Tensor::vector(&[1.0, 2.2]);
        assert!((relative_error(&a, &b) - 0.2 / 2.2).abs() < 1e-15);
    }
}
