//! Training objectives: flow-matching loss over intermediate frames, the
//! temporal difference loss, and their weighted sum.
//!
//! Both losses reduce by element means (not sums) so the weight omega keeps
//! its meaning across frame counts and resolutions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{lit, Scalar, Tape, Tensor, Var};

/// Scalar components of one training objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub flow: f32,
    pub temp: f32,
    pub total: f32,
    pub omega: f32,
}

/// z_t = (1 - t) * z_1 + t * z_0, applied to intermediate frames only —
/// boundary latents stay clean. `z1` and `z0` hold just the intermediates.
pub fn make_noisy<T: Scalar>(z1: &Tensor<T>, z0: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    if z1.shape() != z0.shape() {
        return Err(Error::shape(format!(
            "make_noisy shape mismatch: {:?} vs {:?}",
            z1.shape(),
            z0.shape()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::config(format!("timestep {t} outside [0, 1]")));
    }
    let tt = lit::<T>(t);
    let one_minus = T::one() - tt;
    Ok(Tensor::new(
        z1.shape().to_vec(),
        z1.data()
            .iter()
            .zip(z0.data())
            .map(|(&a, &b)| one_minus * a + tt * b)
            .collect(),
    )?)
}

/// True velocity v = z_0 - z_1.
pub fn true_velocity<T: Scalar>(z0: &Tensor<T>, z1: &Tensor<T>) -> Result<Tensor<T>> {
    if z0.shape() != z1.shape() {
        return Err(Error::shape(format!(
            "true_velocity shape mismatch: {:?} vs {:?}",
            z0.shape(),
            z1.shape()
        )));
    }
    Ok(Tensor::new(
        z0.shape().to_vec(),
        z0.data()
            .iter()
            .zip(z1.data())
            .map(|(&a, &b)| a - b)
            .collect(),
    )?)
}

/// Mean squared error over intermediate-frame velocity predictions.
///
/// Both vars must already be restricted to intermediate frames, shaped
/// [N, ...] with N >= 1.
pub fn flow_loss_graph<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let shape = tape.value(pred).shape();
    if shape.is_empty() || shape[0] == 0 {
        return Err(Error::shape("flow loss needs at least one intermediate frame"));
    }
    if shape != tape.value(target).shape() {
        return Err(Error::shape(format!(
            "flow loss shape mismatch: {:?} vs {:?}",
            shape,
            tape.value(target).shape()
        )));
    }
    tape.mse(pred, target)
}

/// Temporal difference loss: mean squared error between predicted and true
/// frame-to-frame velocity differences, averaged over the N - 1 pairs.
///
/// With fewer than two intermediate frames the loss is inapplicable and
/// evaluates to zero (a warning is emitted once per call site semantics).
pub fn temp_loss_graph<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let shape = tape.value(pred).shape().to_vec();
    if shape != tape.value(target).shape() {
        return Err(Error::shape(format!(
            "temp loss shape mismatch: {:?} vs {:?}",
            shape,
            tape.value(target).shape()
        )));
    }
    let n = shape[0];
    if n < 2 {
        eprintln!("warning: temporal difference loss undefined for {n} intermediate frame(s); using 0");
        return Ok(tape.leaf(Tensor::scalar(T::zero())));
    }
    let pred_next = tape.slice(pred, 0, 1, n - 1)?;
    let pred_prev = tape.slice(pred, 0, 0, n - 1)?;
    let d_pred = tape.sub(pred_next, pred_prev)?;
    let tgt_next = tape.slice(target, 0, 1, n - 1)?;
    let tgt_prev = tape.slice(target, 0, 0, n - 1)?;
    let d_tgt = tape.sub(tgt_next, tgt_prev)?;
    tape.mse(d_pred, d_tgt)
}

/// total = flow + omega * temp.
pub fn total_loss(flow: f32, temp: f32, omega: f32) -> Result<LossBreakdown> {
    if omega < 0.0 {
        return Err(Error::config("omega must be >= 0"));
    }
    let total = flow + omega * temp;
    if !total.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite loss: flow {flow}, temp {temp}"
        )));
    }
    Ok(LossBreakdown {
        flow,
        temp,
        total,
        omega,
    })
}

/// Graph combination used in training: flow + omega * temp as a Var.
pub fn total_loss_graph<T: Scalar>(
    tape: &mut Tape<T>,
    flow: Var,
    temp: Var,
    omega: f64,
) -> Result<Var> {
    let weighted = tape.scale(temp, lit::<T>(omega));
    tape.add(flow, weighted)
}

/// Plain-tensor flow loss used by evaluation code.
pub fn flow_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.leaf(pred.clone());
    let t = tape.leaf(target.clone());
    let l = flow_loss_graph(&mut tape, p, t)?;
    Ok(tape.value(l).item()?.to_f64().unwrap())
}

/// Plain-tensor temporal difference loss.
pub fn temp_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.leaf(pred.clone());
    let t = tape.leaf(target.clone());
    let l = temp_loss_graph(&mut tape, p, t)?;
    Ok(tape.value(l).item()?.to_f64().unwrap())
}
