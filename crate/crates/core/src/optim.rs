//! AdamW without weight decay, and a linear-warmup cosine schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{ParamId, ToyModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub betas: (f64, f64),
    pub epsilon: f64,
    /// Always 0 in this toolkit; kept so the decoupled decay path is explicit.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            betas: (0.9, 0.999),
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub first: Matrix,
    pub second: Matrix,
}

/// Per-parameter moments for the trainable set of one task.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: BTreeMap<ParamId, Moments>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops moments for parameters the model no longer trains.
    pub fn retain_trainable(&mut self, model: &ToyModel) {
        self.moments.retain(|id, _| is_trainable(model, *id));
    }
}

fn is_trainable(model: &ToyModel, id: ParamId) -> bool {
    match id {
        ParamId::BranchA { layer, branch } | ParamId::BranchB { layer, branch } => model.layers()
            [layer]
            .branches()
            .get(branch)
            .is_some_and(|b| !b.is_frozen()),
        ParamId::HeadWeight(t) | ParamId::HeadBias(t) => {
            model.tasks().get(t).is_some_and(|t| !t.head.frozen)
        }
    }
}

/// One AdamW update of a single matrix, in place.
pub fn adamw_update(
    param: &mut Matrix,
    grad: &Matrix,
    moments: &mut Moments,
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape("optimizer_step", param.shape(), grad.shape()));
    }
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    let p = param.as_mut_slice();
    let m = moments.first.as_mut_slice();
    let v = moments.second.as_mut_slice();
    for (k, &g) in grad.as_slice().iter().enumerate() {
        m[k] = b1 * m[k] + (1.0 - b1) * g;
        v[k] = b2 * v[k] + (1.0 - b2) * g * g;
        let m_hat = m[k] / bc1;
        let v_hat = v[k] / bc2;
        if cfg.weight_decay != 0.0 {
            p[k] -= lr * cfg.weight_decay * p[k];
        }
        p[k] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Applies one step to every `(id, grad)` pair of `model`.
pub fn optimizer_step(
    model: &mut ToyModel,
    grads: &[(ParamId, Matrix)],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    state.step += 1;
    for (id, grad) in grads {
        let param = model.param_mut(*id)?;
        let moments = state.moments.entry(*id).or_insert_with(|| Moments {
            first: Matrix::zeros(param.rows(), param.cols()),
            second: Matrix::zeros(param.rows(), param.cols()),
        });
        adamw_update(param, grad, moments, state.step, lr, cfg)?;
    }
    Ok(())
}

/// Learning rate at `step` of `total`: linear warmup over
/// `w = ceil(warmup_ratio * total)` steps, then cosine decay to 0.
pub fn lr_at(step: usize, total: usize, lr_max: f64, warmup_ratio: f64) -> f64 {
    let w = (warmup_ratio * total as f64).ceil() as usize;
    if step < w {
        lr_max * (step + 1) as f64 / w as f64
    } else {
        let span = total.saturating_sub(w).max(1) as f64;
        let progress = (step - w) as f64 / span;
        lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
