//! Central finite-difference oracle used to check derivative rules.

use super::{Real, Tensor};

/// Central-difference estimate of the gradient of `f` at `point`.
///
/// `f` is evaluated at `point ± step·e_i` for every coordinate `i`.
pub fn finite_diff_oracle<F>(mut f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x);
        x[i] = orig - step;
        let down = f(&x);
        x[i] = orig;
        grad.push((up - down) / (2.0 * step));
    }
    grad
}

/// Largest elementwise relative error `|a−b| / max(|a|, |b|, floor)`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Relative error of two vectors measured in the 2-norm.
pub fn rel_err_norm(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn tensor_f64<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.to_f64_vec()
}
