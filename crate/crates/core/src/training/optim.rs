//! First-order optimizers over a [`ParamSet`].

use serde::{Deserialize, Serialize};

use crate::config::OptimizerKind;
use crate::encoder::ParamSet;
use crate::error::Result;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
}

/// Optimizer buffers. SGD uses only `first`; Adam uses both moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub updates: u64,
    pub first: ParamSet,
    pub second: ParamSet,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            updates: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }
}

/// Applies one update with learning rate `lr`; returns the gradient norm
/// measured before clipping.
pub fn apply_update(
    cfg: &OptimizerConfig,
    state: &mut OptimizerState,
    params: &mut ParamSet,
    grads: &mut ParamSet,
    lr: f64,
) -> Result<f64> {
    params.check_layout(grads)?;
    let norm = grads.l2_norm();
    if cfg.grad_clip_norm > 0.0 && norm > cfg.grad_clip_norm {
        grads.scale((cfg.grad_clip_norm / norm) as f32);
    }
    state.updates += 1;
    let t = state.updates as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, g), m), v) in params
        .tensors
        .iter_mut()
        .zip(&grads.tensors)
        .zip(state.first.tensors.iter_mut())
        .zip(state.second.tensors.iter_mut())
    {
        for i in 0..p.data.len() {
            let w = p.data[i] as f64;
            let grad = g.data[i] as f64 + cfg.weight_decay * w;
            match cfg.kind {
                OptimizerKind::Sgd => {
                    let vel = cfg.momentum * m.data[i] as f64 + grad;
                    m.data[i] = vel as f32;
                    p.data[i] = (w - lr * vel) as f32;
                }
                OptimizerKind::Adam => {
                    let m1 = ADAM_BETA1 * m.data[i] as f64 + (1.0 - ADAM_BETA1) * grad;
                    let m2 = ADAM_BETA2 * v.data[i] as f64 + (1.0 - ADAM_BETA2) * grad * grad;
                    m.data[i] = m1 as f32;
                    v.data[i] = m2 as f32;
                    p.data[i] = (w - lr * (m1 / bc1) / ((m2 / bc2).sqrt() + ADAM_EPS)) as f32;
                }
            }
        }
    }
    Ok(norm)
}
