//! Central finite differences, used as the independent oracle for every
//! analytic vector-Jacobian product.

use super::tensor::Tensor;
use crate::error::Result;

/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every element.
pub fn finite_diff_grad(
    f: impl Fn(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    eps: f64,
) -> Result<Vec<f64>> {
    let base = x.to_vec();
    let mut grad = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + eps;
        let plus = f(&Tensor::from_vec(x.shape(), probe.clone())?)?;
        probe[i] = base[i] - eps;
        let minus = f(&Tensor::from_vec(x.shape(), probe.clone())?)?;
        probe[i] = base[i];
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Max-norm relative error `|a - b|_inf / max(|a|_inf, |b|_inf)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}
