//! Central finite differences, the gradient oracle for every backward rule.

use crate::tensor::Tensor;

/// Default step for [`finite_diff_grad`].
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor used by [`max_rel_error`].
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Same as [`finite_diff_grad`] but only at the listed coordinates; the
/// result has one entry per index.
pub fn finite_diff_at(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    indices: &[usize],
    h: f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error of one analytic/numeric pair, with the denominator
/// `max(|a|, |fd|, 1e-8)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}
