//! Central finite differences, used as the independent oracle for autodiff.

use super::{Matrix, ParamId, ParamStore};
use crate::Scalar;

/// Per-entry relative error with an absolute floor of `1e-3` on the scale,
/// so vanishing gradients compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Largest [`relative_error`] across two equally shaped matrices.
pub fn max_relative_error<S: Scalar>(analytic: &Matrix<S>, numeric: &Matrix<S>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(a, n)| relative_error(a.as_f64(), n.as_f64()))
        .fold(0.0, f64::max)
}

/// Central-difference estimate of `d f / d p` for every entry of each
/// parameter in `ids`. Parameters are restored exactly afterwards.
pub fn finite_difference_gradient<S: Scalar>(
    mut f: impl FnMut(&ParamStore<S>) -> S,
    store: &mut ParamStore<S>,
    ids: &[ParamId],
    step: f64,
) -> Vec<Matrix<S>> {
    let h = S::from_f64_lossy(step);
    let two_h = h + h;
    ids.iter()
        .map(|&id| {
            let (r, c) = store.tensor(id).shape();
            let mut grad = Matrix::zeros(r, c);
            for i in 0..r * c {
                let orig = store.tensor(id).as_slice()[i];
                store.tensor_mut(id).as_mut_slice()[i] = orig + h;
                let plus = f(store);
                store.tensor_mut(id).as_mut_slice()[i] = orig - h;
                let minus = f(store);
                store.tensor_mut(id).as_mut_slice()[i] = orig;
                grad.as_mut_slice()[i] = (plus - minus) / two_h;
            }
            grad
        })
        .collect()
}

/// Central-difference gradient of `f` with respect to a free matrix input.
pub fn finite_difference_input<S: Scalar>(
    mut f: impl FnMut(&Matrix<S>) -> S,
    x: &Matrix<S>,
    step: f64,
) -> Matrix<S> {
    let h = S::from_f64_lossy(step);
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let plus = f(&probe);
        probe.as_mut_slice()[i] = orig - h;
        let minus = f(&probe);
        probe.as_mut_slice()[i] = orig;
        grad.as_mut_slice()[i] = (plus - minus) / (h + h);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Group;

    #[test]
    fn square_at_three() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("x", Group::Main, Matrix::filled(1, 1, 3.0));
        let g = finite_difference_gradient(|s| s.tensor(id)[(0, 0)].powi(2), &mut s, &[id], 1e-4);
        assert!((g[0][(0, 0)] - 6.0).abs() <= 1e-6);
        assert_eq!(s.tensor(id)[(0, 0)], 3.0);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("x", Group::Main, Matrix::filled(2, 3, 0.7));
        let g = finite_difference_gradient(|_| 42.0, &mut s, &[id], 1e-5);
        assert!(g[0].as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_variant_matches_analytic() {
        let x = Matrix::<f64>::from_fn(2, 2, |r, c| r as f64 + 0.5 * c as f64);
        let g = finite_difference_input(|m| m.as_slice().iter().map(|v| v.sin()).sum(), &x, 1e-5);
        for (gv, xv) in g.as_slice().iter().zip(x.as_slice()) {
            assert!(relative_error(*gv, xv.cos()) < 1e-8);
        }
    }
}
