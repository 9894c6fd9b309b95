//! AdamW with decoupled weight decay, plus the cosine learning-rate curve.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-tensor moment buffers.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One AdamW update. Weight decay is decoupled: parameters shrink by
/// lr * weight_decay directly, the gradient moments never see it.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    hyper: &AdamHyper,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension {
            op: "adamw_step",
            detail: alloc::format!(
                "params {}, grads {}, state {}",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    if !(lr > 0.0) {
        return Err(Error::Contract(alloc::format!("lr must be > 0, got {lr}")));
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - pow64(hyper.beta1, t);
    let bc2 = 1.0 - pow64(hyper.beta2, t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * weight_decay * params[i];
        params[i] -= lr * m_hat / (fmath::sqrt(v_hat) + hyper.eps);
    }
    Ok(())
}

fn pow64(base: f64, exp: f64) -> f64 {
    fmath::exp(exp * fmath::ln(base))
}

/// Cosine annealing from lr0 at step 0 to 0 at step == total_steps.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let phase = core::f64::consts::PI * step as f64 / total_steps as f64;
    lr0 * (1.0 + fmath::cos(phase)) / 2.0
}
