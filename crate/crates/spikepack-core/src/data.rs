//! Synthetic pattern classification data.
//!
//! Each class owns a fixed random template in [0, 1]; samples are the
//! template plus gaussian noise, clamped back to [0, 1]. Small enough to
//! train in seconds, hard enough that compression mistakes show up as
//! accuracy loss.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::fmath;
use crate::rng::{normal, stream, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Dataset {
    /// [N, C, H, W] inputs.
    pub x: Tensor,
    /// N labels in [0, classes).
    pub y: Vec<usize>,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub planes: (usize, usize, usize),
    pub noise_sigma: f64,
    pub per_class_train: usize,
    pub per_class_test: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 3,
            planes: (3, 12, 12),
            noise_sigma: 0.25,
            per_class_train: 64,
            per_class_test: 32,
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Copy of the samples at `indices`, preserving order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let (c, h, w) = plane_dims(&self.x)?;
        let rest = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * rest);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Contract(alloc::format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&self.x.data()[i * rest..(i + 1) * rest]);
            labels.push(self.y[i]);
        }
        Ok((Tensor::new(alloc::vec![indices.len(), c, h, w], data)?, labels))
    }

    /// Deterministic epoch shuffle: batch index lists over the whole set.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = stream(seed, Stream::Shuffle { epoch });
        // Fisher-Yates.
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }
}

fn plane_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Dimension {
            op: "dataset",
            detail: alloc::format!("expected [N, C, H, W], got {s:?}"),
        });
    }
    Ok((s[1], s[2], s[3]))
}

/// Class templates drawn once from U[0, 1], keyed by seed only.
pub fn templates(spec: &SyntheticSpec, seed: u64) -> Vec<Vec<f64>> {
    let (c, h, w) = spec.planes;
    let numel = c * h * w;
    let mut rng = stream(seed, Stream::Other(0x7e7a));
    (0..spec.classes)
        .map(|_| (0..numel).map(|_| rng.random::<f64>()).collect())
        .collect()
}

/// Build the train and test splits. Both draw from the same templates;
/// noise streams differ so the splits are disjoint in content.
pub fn make_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    if spec.classes < 2 {
        return Err(Error::Contract("need at least 2 classes".into()));
    }
    let (c, h, w) = spec.planes;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Contract("planes must be non-empty".into()));
    }
    if spec.per_class_train == 0 || spec.per_class_test == 0 {
        return Err(Error::Contract("need at least one sample per class per split".into()));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(Error::Contract("noise sigma must be >= 0".into()));
    }
    let tpl = templates(spec, seed);
    let train = synthesize(spec, &tpl, spec.per_class_train, stream(seed, Stream::DataTrain))?;
    let test = synthesize(spec, &tpl, spec.per_class_test, stream(seed, Stream::DataTest))?;
    Ok((train, test))
}

fn synthesize(
    spec: &SyntheticSpec,
    templates: &[Vec<f64>],
    per_class: usize,
    mut rng: rand_chacha::ChaCha8Rng,
) -> Result<Dataset> {
    let (c, h, w) = spec.planes;
    let numel = c * h * w;
    let n = per_class * spec.classes;
    let mut data = Vec::with_capacity(n * numel);
    let mut labels = Vec::with_capacity(n);
    // Interleave classes so any contiguous batch is roughly balanced
    // even before shuffling.
    for _ in 0..per_class {
        for (k, tpl) in templates.iter().enumerate() {
            for &t in tpl {
                let v = t + spec.noise_sigma * normal(&mut rng);
                data.push(fmath::clamp(v, 0.0, 1.0));
            }
            labels.push(k);
        }
    }
    Ok(Dataset {
        x: Tensor::new(alloc::vec![n, c, h, w], data)?,
        y: labels,
        classes: spec.classes,
    })
}
