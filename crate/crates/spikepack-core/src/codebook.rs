//! Learnable per-layer weight codebooks.
//!
//! Each clustered layer keeps full-precision latent weights plus a small
//! vector of levels. The forward pass snaps every latent to its nearest
//! level through a gather, so the effective weight tensor never holds
//! more distinct values than the codebook has levels; gradients reach the
//! latents straight-through and reach the levels both through the gather
//! read and through the commitment loss.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::kmeans::nearest;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// How codebook levels map onto the signed integer grid.
///
/// `UnitFloor` keeps scale = max(range, 1), which collapses any codebook
/// with range <= 1 onto {-1, 0, 1} regardless of bit width.
/// `ResolutionPreserving` spreads the range across the full grid instead;
/// it is never substituted silently, the mode is recorded wherever the
/// quantized codebook travels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    UnitFloor,
    ResolutionPreserving,
}

/// Integer side of a quantized codebook: level k reconstructs as
/// scale * q_levels[k].
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLevels {
    pub bits: u32,
    pub scale: f64,
    pub q_levels: Vec<i32>,
    pub mode: QuantMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub levels: Vec<f64>,
    pub quant: Option<QuantizedLevels>,
}

impl Codebook {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(Error::Contract(alloc::format!(
                "codebook needs at least 2 levels, got {}",
                levels.len()
            )));
        }
        if levels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("codebook levels must be finite".into()));
        }
        Ok(Codebook { levels, quant: None })
    }

    pub fn m(&self) -> usize {
        self.levels.len()
    }

    /// Map levels onto the signed grid of `bits`: with r = 2^(b-1) - 1,
    /// q_k = clip(round(c_k / s), -r, r), rounding half away from zero.
    pub fn quantize(&mut self, bits: u32, mode: QuantMode) -> Result<()> {
        if !matches!(bits, 2 | 4 | 8) {
            return Err(Error::Contract(alloc::format!("codebook bits must be 2, 4, or 8, got {bits}")));
        }
        let lo = self.levels.iter().fold(f64::INFINITY, |a, v| fmath::min(a, *v));
        let hi = self.levels.iter().fold(f64::NEG_INFINITY, |a, v| fmath::max(a, *v));
        let range = hi - lo;
        let r = ((1u32 << (bits - 1)) - 1) as f64;
        let scale = match mode {
            QuantMode::UnitFloor => fmath::max(range, 1.0),
            QuantMode::ResolutionPreserving => fmath::max(range, 1e-12) / r,
        };
        let q_levels: Vec<i32> = self
            .levels
            .iter()
            .map(|c| fmath::clamp(fmath::round(c / scale), -r, r) as i32)
            .collect();
        self.quant = Some(QuantizedLevels { bits, scale, q_levels, mode });
        Ok(())
    }

    /// Real values the quantized levels reconstruct to: scale * q_k.
    pub fn reconstruction_levels(&self) -> Result<Vec<f64>> {
        let q = self
            .quant
            .as_ref()
            .ok_or_else(|| Error::State("codebook has not been quantized".into()))?;
        Ok(q.q_levels.iter().map(|&c| q.scale * c as f64).collect())
    }

    /// Snap latents to the nearest reconstructed level.
    pub fn reconstruct(&self, latent: &[f64]) -> Result<(Vec<usize>, Vec<f64>)> {
        let levels = self.reconstruction_levels()?;
        Ok(assign(latent, &levels))
    }
}

/// Nearest-level assignment: per weight, k* = argmin_k (w - c_k)^2 with
/// ties to the lowest index. Returns (assignment, snapped values).
pub fn assign(latent: &[f64], levels: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let mut idx = Vec::with_capacity(latent.len());
    let mut snapped = Vec::with_capacity(latent.len());
    for &w in latent {
        let k = nearest(w, levels);
        idx.push(k);
        snapped.push(levels[k]);
    }
    (idx, snapped)
}

/// Per-layer CAT subgraph handles.
pub struct CatGraph {
    /// What the network multiplies by: value of w_q, straight-through to
    /// the latents.
    pub w_eff: TensorId,
    /// Codebook read (gather of levels), reshaped to the weight shape.
    pub w_q: TensorId,
    pub assignment: Vec<usize>,
}

/// Build the effective-weight subgraph for one layer. `latent_id` and
/// `levels_id` must already be on the tape; `passthrough` decides whether
/// task gradients reach the levels through the forward read.
pub fn effective_weights(
    tape: &mut Tape,
    latent_id: TensorId,
    levels_id: TensorId,
    passthrough: bool,
) -> Result<CatGraph> {
    if tape.value(levels_id).is_empty() {
        return Err(Error::Contract("empty codebook".into()));
    }
    let (assignment, _) = {
        let latent = tape.value(latent_id);
        let levels = tape.value(levels_id);
        assign(latent, levels)
    };
    let shape = tape.shape(latent_id).to_vec();
    let flat = tape.gather1d(levels_id, &assignment)?;
    let w_q = tape.reshape(flat, shape)?;
    let w_eff = tape.straight_through(latent_id, w_q, passthrough)?;
    Ok(CatGraph { w_eff, w_q, assignment })
}

/// Commitment term for one layer: mean over weights of
/// (w_q - stopgrad(latent))^2. The latent enters as a constant, so the
/// gradient flows only into the codebook levels behind `w_q`.
pub fn commitment_loss(tape: &mut Tape, w_q: TensorId, latent: &Tensor) -> Result<TensorId> {
    let frozen = tape.constant(latent.clone());
    let diff = tape.sub(w_q, frozen)?;
    let sq = tape.square(diff);
    Ok(tape.mean_all(sq))
}

/// Same residual as [`commitment_loss`] but summed, for callers that
/// normalize across several layers themselves.
pub fn commitment_sq_sum(tape: &mut Tape, w_q: TensorId, latent: &Tensor) -> Result<TensorId> {
    let frozen = tape.constant(latent.clone());
    let diff = tape.sub(w_q, frozen)?;
    let sq = tape.square(diff);
    Ok(tape.sum_all(sq))
}

/// task + beta_commit * commit.
pub fn total_loss(
    tape: &mut Tape,
    task: TensorId,
    commit: TensorId,
    beta_commit: f64,
) -> Result<TensorId> {
    if beta_commit < 0.0 {
        return Err(Error::Contract(alloc::format!("beta_commit must be >= 0, got {beta_commit}")));
    }
    let weighted = tape.scale(commit, beta_commit);
    tape.add(task, weighted)
}

/// Reseed every level in `levels` whose `used` flag is down at the latent
/// value farthest from that level (lowest index on distance ties).
/// Returns how many levels moved.
pub fn refresh_dead_levels(levels: &mut [f64], latent: &[f64], used: &[bool]) -> usize {
    debug_assert_eq!(levels.len(), used.len());
    let mut moved = 0;
    for k in 0..levels.len() {
        if used[k] || latent.is_empty() {
            continue;
        }
        let mut far_i = 0;
        let mut far_d = -1.0;
        for (i, &w) in latent.iter().enumerate() {
            let d = fmath::abs(w - levels[k]);
            if d > far_d {
                far_d = d;
                far_i = i;
            }
        }
        levels[k] = latent[far_i];
        moved += 1;
    }
    moved
}

/// Distinct values in a slice under exact equality.
pub fn distinct_count(values: &[f64]) -> usize {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    sorted.dedup();
    sorted.len()
}
