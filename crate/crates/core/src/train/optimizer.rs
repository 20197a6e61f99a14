//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || self.eps <= 0.0 {
            return Err(Error::config("learning rate must be >= 0 and eps > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// First/second moment buffers aligned with the parameter set order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = (0..params.len())
            .map(|i| Tensor::zeros(params.by_id(i).shape()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Extends moment buffers for parameters appended after creation
    /// (stage-2 control branch).
    pub fn extend_for(&mut self, params: &ParamSet<f32>) {
        for i in self.m.len()..params.len() {
            self.m.push(Tensor::zeros(params.by_id(i).shape()));
            self.v.push(Tensor::zeros(params.by_id(i).shape()));
        }
    }
}

/// One decoupled-weight-decay Adam step over the trainable parameters.
///
/// `grads[i]` holds the batch-mean gradient for parameter id i; `None`
/// means the parameter was frozen or unused (skipped entirely).
pub fn adamw_step(
    params: &mut ParamSet<f32>,
    grads: &[Option<Tensor<f32>>],
    state: &mut AdamState,
    trainable: &[bool],
    cfg: &OptimConfig,
) -> Result<()> {
    cfg.validate()?;
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::config("optimizer state misaligned with parameters"));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - (cfg.beta1 as f64).powf(t);
    let bc2 = 1.0 - (cfg.beta2 as f64).powf(t);
    for id in 0..params.len() {
        if !trainable[id] {
            continue;
        }
        let g = match &grads[id] {
            Some(g) => g,
            None => continue,
        };
        let p = params.by_id_mut(id);
        if g.shape() != p.shape() {
            return Err(Error::shape(format!(
                "gradient shape {:?} vs parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = state.m[id].data_mut();
        let v = state.v[id].data_mut();
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let mhat = *mv as f64 / bc1;
            let vhat = *vv as f64 / bc2;
            let update = mhat / (vhat.sqrt() + cfg.eps as f64);
            *pv -= cfg.lr * (update as f32 + cfg.weight_decay * *pv);
        }
    }
    Ok(())
}
