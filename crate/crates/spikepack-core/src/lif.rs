//! Discrete leaky integrate-and-fire dynamics with soft reset.
//!
//! The membrane update is u' = beta*u + i_in - beta*s_prev*u_thr, where
//! s_prev holds the previous step's spikes, and a spike fires on the
//! strict condition u' > u_thr. Subtracting beta*u_thr on the step after
//! a spike (soft reset) keeps sub-threshold charge instead of clearing it.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{SpikeMode, Tape, TensorId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifConfig {
    /// Membrane decay per step, in (0, 1].
    pub beta: f64,
    /// Firing threshold, > 0.
    pub u_thr: f64,
    /// Simulation steps per forward pass.
    pub t_steps: usize,
    /// Width of the arctangent surrogate, > 0.
    pub surrogate_alpha: f64,
}

impl Default for LifConfig {
    fn default() -> Self {
        LifConfig { beta: 0.5, u_thr: 1.0, t_steps: 4, surrogate_alpha: 2.0 }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Contract(alloc::format!("beta must be in (0, 1], got {}", self.beta)));
        }
        if !(self.u_thr > 0.0) {
            return Err(Error::Contract(alloc::format!("u_thr must be > 0, got {}", self.u_thr)));
        }
        if self.t_steps == 0 {
            return Err(Error::Contract("t_steps must be >= 1".into()));
        }
        if !(self.surrogate_alpha > 0.0) {
            return Err(Error::Contract(alloc::format!(
                "surrogate_alpha must be > 0, got {}",
                self.surrogate_alpha
            )));
        }
        Ok(())
    }
}

/// One membrane update on the tape. `u_prev` and `s_prev` are the previous
/// step's potential and spikes (zeros at t=0); `i_in` is the weighted input
/// for this step. Returns (spikes, new potential).
pub fn lif_step(
    tape: &mut Tape,
    i_in: TensorId,
    u_prev: TensorId,
    s_prev: TensorId,
    cfg: &LifConfig,
    mode: SpikeMode,
) -> Result<(TensorId, TensorId)> {
    let decayed = tape.scale(u_prev, cfg.beta);
    let charged = tape.add(decayed, i_in)?;
    let reset = tape.scale(s_prev, -cfg.beta * cfg.u_thr);
    let u_new = tape.add(charged, reset)?;
    let s_new = tape.spike(u_new, cfg.u_thr, cfg.surrogate_alpha, mode);
    Ok((s_new, u_new))
}

/// Copy a static input into T identical time slots: [N, ...] -> [N, T, ...].
pub fn encode_replicate(x: &Tensor, t_steps: usize) -> Result<Tensor> {
    if t_steps == 0 {
        return Err(Error::Contract("t_steps must be >= 1".into()));
    }
    let shape = x.shape();
    if shape.is_empty() {
        return Err(Error::Dimension {
            op: "encode_replicate",
            detail: "input must have a leading batch axis".into(),
        });
    }
    let n = shape[0];
    let rest: usize = shape[1..].iter().product();
    let mut out_shape = Vec::with_capacity(shape.len() + 1);
    out_shape.push(n);
    out_shape.push(t_steps);
    out_shape.extend_from_slice(&shape[1..]);
    let mut data = Vec::with_capacity(n * t_steps * rest);
    for b in 0..n {
        let slice = &x.data()[b * rest..(b + 1) * rest];
        for _ in 0..t_steps {
            data.extend_from_slice(slice);
        }
    }
    Tensor::new(out_shape, data)
}

/// Slice time step `t` out of an [N, T, ...] sequence as [N, ...].
pub fn time_slice(x_seq: &Tensor, t: usize) -> Result<Tensor> {
    let shape = x_seq.shape();
    if shape.len() < 2 {
        return Err(Error::Dimension {
            op: "time_slice",
            detail: alloc::format!("need [N, T, ...], got {shape:?}"),
        });
    }
    let (n, t_steps) = (shape[0], shape[1]);
    if t >= t_steps {
        return Err(Error::Dimension {
            op: "time_slice",
            detail: alloc::format!("step {t} out of range for T={t_steps}"),
        });
    }
    let rest: usize = shape[2..].iter().product();
    let mut out_shape = Vec::with_capacity(shape.len() - 1);
    out_shape.push(n);
    out_shape.extend_from_slice(&shape[2..]);
    let mut data = Vec::with_capacity(n * rest);
    for b in 0..n {
        let base = (b * t_steps + t) * rest;
        data.extend_from_slice(&x_seq.data()[base..base + rest]);
    }
    Tensor::new(out_shape, data)
}
