//! Trained ternary layers: effective weights in {-w_neg, 0, +w_pos}.
//!
//! The two scales are trained parameters; the dead-zone threshold tracks
//! the latent tensor as threshold_frac * max|latent| each forward pass.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD_FRAC: f64 = 0.05;

/// Floor for trained scales; keeps both sides of the ternary grid alive.
pub const MIN_SCALE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct TernaryLayer {
    pub latent: Tensor,
    pub w_pos: f64,
    pub w_neg: f64,
    pub threshold_frac: f64,
}

impl TernaryLayer {
    /// Scales start at the mean |latent| over each mask; an empty mask
    /// falls back to the global mean magnitude, and an all-zero tensor to
    /// the minimum scale.
    pub fn from_latent(latent: Tensor, threshold_frac: f64) -> Result<Self> {
        if !(threshold_frac > 0.0 && threshold_frac < 1.0) {
            return Err(Error::Contract(alloc::format!(
                "threshold_frac must be in (0, 1), got {threshold_frac}"
            )));
        }
        let delta = threshold_frac * max_abs(latent.data());
        let mut pos_sum = 0.0;
        let mut pos_n = 0usize;
        let mut neg_sum = 0.0;
        let mut neg_n = 0usize;
        let mut all_sum = 0.0;
        for &w in latent.data() {
            all_sum += fmath::abs(w);
            if w > delta {
                pos_sum += w;
                pos_n += 1;
            } else if w < -delta {
                neg_sum += -w;
                neg_n += 1;
            }
        }
        let global = if latent.numel() > 0 { all_sum / latent.numel() as f64 } else { 0.0 };
        let fallback = fmath::max(global, MIN_SCALE);
        let w_pos = if pos_n > 0 { pos_sum / pos_n as f64 } else { fallback };
        let w_neg = if neg_n > 0 { neg_sum / neg_n as f64 } else { fallback };
        Ok(TernaryLayer { latent, w_pos: fmath::max(w_pos, MIN_SCALE), w_neg: fmath::max(w_neg, MIN_SCALE), threshold_frac })
    }

    pub fn scales_tensor(&self) -> Tensor {
        Tensor::new(alloc::vec![2], alloc::vec![self.w_pos, self.w_neg]).expect("fixed shape")
    }

    pub fn set_scales(&mut self, w_pos: f64, w_neg: f64) {
        self.w_pos = fmath::max(w_pos, MIN_SCALE);
        self.w_neg = fmath::max(w_neg, MIN_SCALE);
    }

    /// Effective weights without a tape, for export and evaluation.
    pub fn effective_values(&self) -> Vec<f64> {
        let delta = self.threshold_frac * max_abs(self.latent.data());
        self.latent
            .data()
            .iter()
            .map(|&w| {
                if w > delta {
                    self.w_pos
                } else if w < -delta {
                    -self.w_neg
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Register latents and scales on the tape and build the snap op. Returns
/// (w_eff, latent node, scales node) so the trainer can read gradients.
pub fn effective_weights(
    tape: &mut Tape,
    layer: &TernaryLayer,
) -> Result<(TensorId, TensorId, TensorId)> {
    let latent_id = tape.input(layer.latent.clone());
    let scales_id = tape.input(layer.scales_tensor());
    let w_eff = tape.ternary(latent_id, scales_id, layer.threshold_frac)?;
    Ok((w_eff, latent_id, scales_id))
}

fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m, v| fmath::max(m, fmath::abs(*v)))
}
