//! Central finite-difference gradient oracle.
//!
//! Independent of the tape: it only re-evaluates the provided closure with
//! perturbed inputs, so it can vet every backward rule.

use crate::error::{Error, Result};

use super::tensor::{lit, Scalar, Tensor};

/// Default step for f64 checks.
pub const DEFAULT_H: f64 = 1e-5;

/// Central difference (f(x+h*e_i) - f(x-h*e_i)) / 2h per coordinate.
pub fn finite_diff_grad<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    h: f64,
) -> Result<Tensor<T>> {
    if h <= 0.0 {
        return Err(Error::numeric(format!("finite difference step {h} must be > 0")));
    }
    let hh = lit::<T>(h);
    let two_h = lit::<T>(2.0 * h);
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + hh;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - hh;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite objective at coordinate {i} (f+ = {fp}, f- = {fm})"
            )));
        }
        grad.data_mut()[i] = (fp - fm) / two_h;
    }
    Ok(grad)
}

/// Finite difference restricted to a subset of coordinates (for large
/// parameter tensors). Returns (coordinate, derivative) pairs.
pub fn finite_diff_grad_at<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    coords: &[usize],
    h: f64,
) -> Result<Vec<(usize, T)>> {
    let hh = lit::<T>(h);
    let two_h = lit::<T>(2.0 * h);
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + hh;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - hh;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite objective at coordinate {i}"
            )));
        }
        out.push((i, (fp - fm) / two_h));
    }
    Ok(out)
}

/// Worst relative error between two gradient buffers.
///
/// Relative to the larger magnitude, with an absolute floor so that
/// near-zero pairs compare by absolute difference.
pub fn max_rel_err<T: Scalar>(got: &Tensor<T>, want: &Tensor<T>) -> f64 {
    assert_eq!(got.shape(), want.shape(), "gradient shape mismatch");
    let mut worst = 0.0f64;
    for (&a, &b) in got.data().iter().zip(want.data()) {
        worst = worst.max(rel_err(a.to_f64().unwrap(), b.to_f64().unwrap()));
    }
    worst
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}
