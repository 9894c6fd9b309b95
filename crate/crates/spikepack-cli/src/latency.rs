//! Wall-clock inference latency. A proxy measured on this machine, not a
//! neuromorphic-hardware number; everything derived from it is relative
//! to the host. Measurement is single-threaded and sequential so repeated
//! runs stay comparable.

use std::time::Instant;

use spikepack_core::data::Dataset;
use spikepack_core::tape::SpikeMode;
use spikepack_core::train::{evaluate, SnnModel};

use crate::CliError;

/// Mean seconds per input over `batches` forward passes; one warm-up
/// batch runs first and is not counted.
pub fn latency_s(
    model: &SnnModel,
    data: &Dataset,
    batches: usize,
    batch_size: usize,
) -> Result<f64, CliError> {
    if batches == 0 {
        return Err(CliError::Config("latency needs at least one batch".into()));
    }
    let n = batch_size.clamp(1, data.len());
    let batch: Vec<usize> = (0..n).collect();
    let (x, y) = data.gather(&batch)?;
    let probe = Dataset { x, y, classes: data.classes };

    evaluate(model, &probe, n, SpikeMode::Hard)?;
    let start = Instant::now();
    for _ in 0..batches {
        evaluate(model, &probe, n, SpikeMode::Hard)?;
    }
    let per_input = start.elapsed().as_secs_f64() / (batches * n) as f64;
    Ok(per_input)
}

/// Round to three significant digits, the precision latency is reported
/// at.
pub fn round_sig3(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let exp = x.abs().log10().floor() as i32;
    let factor = 10f64.powi(2 - exp);
    (x * factor).round() / factor
}
