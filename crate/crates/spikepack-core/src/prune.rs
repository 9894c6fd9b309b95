//! Structured channel pruning for spiking conv layers.
//!
//! Saliency is scored per output channel, the lowest-scoring channels are
//! removed, and the consumer layer's weights are cut to match. Layers are
//! bias-free and LIF state starts at zero, so a removed channel is exactly
//! a silenced one: masked and pruned networks agree to the bit.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{Layer, NetSpec};
use crate::tensor::Tensor;
use crate::unroll::ActivityRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    /// Gradient-weighted spike contribution: mean over samples of the
    /// squared loss gradient times squared activity, summed over time and
    /// space per channel.
    Fsc,
    /// Spike count alone (mean activity per channel).
    Sca,
    /// L1 norm of the channel's weight slice.
    Mag,
    /// Loss increase when the channel is silenced, measured by forward
    /// passes (slow; the reference the cheap scores are judged against).
    Oracle,
}

/// Running per-channel sums over every spiking layer, fed batch by batch.
pub struct ActivityStats {
    channels: Vec<usize>,
    fsc_sums: Vec<Vec<f64>>,
    activity_sums: Vec<Vec<f64>>,
    elems: Vec<u64>,
    samples: u64,
}

impl ActivityStats {
    pub fn new(net: &NetSpec) -> Result<ActivityStats> {
        let shapes = net.feature_shapes()?;
        let weighted = net.weighted_layers();
        let mut channels = Vec::new();
        for l in net.spiking_weighted_layers() {
            channels.push(shapes[weighted[l]].0);
        }
        Ok(ActivityStats {
            fsc_sums: channels.iter().map(|&c| alloc::vec![0.0; c]).collect(),
            activity_sums: channels.iter().map(|&c| alloc::vec![0.0; c]).collect(),
            elems: alloc::vec![0; channels.len()],
            channels,
            samples: 0,
        })
    }

    /// Fold in one batch of per-layer records shaped [N, T, C, H, W]
    /// (or [N, T, F] for dense spiking layers).
    pub fn absorb(&mut self, records: &[ActivityRecord]) -> Result<()> {
        if records.len() != self.channels.len() {
            return Err(Error::Dimension {
                op: "activity_stats",
                detail: alloc::format!(
                    "{} records for {} spiking layers",
                    records.len(),
                    self.channels.len()
                ),
            });
        }
        let mut batch_n = None;
        for (l, rec) in records.iter().enumerate() {
            let shape = rec.y.shape();
            let (n, t, c, spatial) = match *shape {
                [n, t, c, h, w] => (n, t, c, h * w),
                [n, t, f] => (n, t, f, 1),
                _ => {
                    return Err(Error::Dimension {
                        op: "activity_stats",
                        detail: alloc::format!("layer {l}: rank {} record", shape.len()),
                    })
                }
            };
            if c != self.channels[l] {
                return Err(Error::Dimension {
                    op: "activity_stats",
                    detail: alloc::format!("layer {l}: {c} channels, expected {}", self.channels[l]),
                });
            }
            match batch_n {
                None => batch_n = Some(n),
                Some(prev) if prev != n => {
                    return Err(Error::Dimension {
                        op: "activity_stats",
                        detail: alloc::format!("layer {l}: batch {n} next to batch {prev}"),
                    })
                }
                _ => {}
            }
            let y = rec.y.data();
            let d = rec.delta.data();
            for nt in 0..n * t {
                for ch in 0..c {
                    let base = (nt * c + ch) * spatial;
                    let mut fsc = 0.0;
                    let mut act = 0.0;
                    for s in 0..spatial {
                        let yv = y[base + s];
                        let dv = d[base + s];
                        fsc += dv * dv * yv * yv;
                        act += yv;
                    }
                    self.fsc_sums[l][ch] += fsc;
                    self.activity_sums[l][ch] += act;
                }
            }
            self.elems[l] += (n * t * spatial) as u64;
        }
        self.samples += batch_n.unwrap_or(0) as u64;
        Ok(())
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    /// Per layer, per channel: (1/N) sum of squared-gradient-weighted
    /// squared activity.
    pub fn fsc_scores(&self) -> Result<Vec<Vec<f64>>> {
        self.normalized(&self.fsc_sums, |sums, l| sums / self.samples_f(l).0)
    }

    /// Per layer, per channel: mean spike activity.
    pub fn sca_scores(&self) -> Result<Vec<Vec<f64>>> {
        self.normalized(&self.activity_sums, |sums, l| sums / self.samples_f(l).1)
    }

    fn samples_f(&self, l: usize) -> (f64, f64) {
        (self.samples as f64, self.elems[l] as f64)
    }

    fn normalized<F: Fn(f64, usize) -> f64>(
        &self,
        sums: &[Vec<f64>],
        f: F,
    ) -> Result<Vec<Vec<f64>>> {
        if self.samples == 0 {
            return Err(Error::State("no activity absorbed yet".into()));
        }
        Ok(sums
            .iter()
            .enumerate()
            .map(|(l, per_ch)| per_ch.iter().map(|&s| f(s, l)).collect())
            .collect())
    }
}

/// L1 norm of each output slice: rows of a conv tensor [out, in, kh, kw],
/// columns of a dense tensor [in, out].
pub fn magnitude_scores(weights: &Tensor) -> Result<Vec<f64>> {
    let shape = weights.shape();
    let data = weights.data();
    match *shape {
        [out, rest0, rest1, rest2] => {
            let stride = rest0 * rest1 * rest2;
            Ok((0..out)
                .map(|o| data[o * stride..(o + 1) * stride].iter().map(|v| v.abs()).sum())
                .collect())
        }
        [rows, cols] => Ok((0..cols)
            .map(|c| (0..rows).map(|r| data[r * cols + c].abs()).sum())
            .collect()),
        _ => Err(Error::Dimension {
            op: "magnitude_scores",
            detail: alloc::format!("rank {} weights", shape.len()),
        }),
    }
}

/// Indices of the floor(ratio * C) lowest-scoring channels, lower index
/// first on equal scores. Result is sorted ascending. Removing every
/// channel is refused.
pub fn select_prune_channels(scores: &[f64], ratio: f64) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::Contract("no channels to score".into()));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Contract(alloc::format!("prune ratio {ratio} outside [0, 1]")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Contract("saliency scores must be finite".into()));
    }
    let k = (ratio * scores.len() as f64) as usize;
    if k >= scores.len() {
        return Err(Error::Contract(alloc::format!(
            "refusing to remove all {} channels",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].partial_cmp(&scores[j]).expect("finite").then(i.cmp(&j)));
    let mut removed: Vec<usize> = order[..k].to_vec();
    removed.sort_unstable();
    Ok(removed)
}

/// One layer's removal set, addressed by weighted-layer index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPrune {
    pub weighted_layer: usize,
    pub removed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPruneSummary {
    pub weighted_layer: usize,
    pub channels_before: usize,
    pub removed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneReport {
    pub per_layer: Vec<LayerPruneSummary>,
    pub params_before: u64,
    pub params_after: u64,
}

fn validate_plan(
    net: &NetSpec,
    weights: &[Tensor],
    plan: &[LayerPrune],
) -> Result<BTreeMap<usize, Vec<usize>>> {
    net.validate()?;
    let weighted = net.weighted_layers();
    if weights.len() != weighted.len() {
        return Err(Error::Dimension {
            op: "prune",
            detail: alloc::format!("{} tensors for {} weighted layers", weights.len(), weighted.len()),
        });
    }
    let shapes = net.weight_shapes()?;
    for (w, shape) in weights.iter().zip(&shapes) {
        if w.shape() != &shape[..] {
            return Err(Error::Dimension {
                op: "prune",
                detail: alloc::format!("weights {:?} do not match layer {:?}", w.shape(), shape),
            });
        }
    }
    let mut by_layer = BTreeMap::new();
    for entry in plan {
        let l = entry.weighted_layer;
        if l + 1 >= weighted.len() {
            return Err(Error::Contract(alloc::format!(
                "weighted layer {l} has no consumer to rewire"
            )));
        }
        let out_c = match net.layers[weighted[l]] {
            Layer::Conv { out_c, .. } => out_c,
            _ => {
                return Err(Error::Contract(alloc::format!(
                    "weighted layer {l} is not a conv layer"
                )))
            }
        };
        let mut removed = entry.removed.clone();
        removed.sort_unstable();
        removed.dedup();
        if removed.len() != entry.removed.len() {
            return Err(Error::Contract(alloc::format!("layer {l}: duplicate channel ids")));
        }
        if let Some(&hi) = removed.last() {
            if hi >= out_c {
                return Err(Error::Contract(alloc::format!(
                    "layer {l}: channel {hi} out of range {out_c}"
                )));
            }
        }
        if removed.len() >= out_c {
            return Err(Error::Contract(alloc::format!("layer {l}: removing all channels")));
        }
        if by_layer.insert(l, removed).is_some() {
            return Err(Error::Contract(alloc::format!("layer {l} listed twice")));
        }
    }
    Ok(by_layer)
}

fn keep_of(total: usize, removed: &[usize]) -> Vec<usize> {
    let mut keep = Vec::with_capacity(total - removed.len());
    let mut r = 0;
    for i in 0..total {
        if r < removed.len() && removed[r] == i {
            r += 1;
        } else {
            keep.push(i);
        }
    }
    keep
}

fn take_conv_out(w: &Tensor, keep: &[usize]) -> Tensor {
    let s = w.shape();
    let stride = s[1] * s[2] * s[3];
    let mut data = Vec::with_capacity(keep.len() * stride);
    for &o in keep {
        data.extend_from_slice(&w.data()[o * stride..(o + 1) * stride]);
    }
    Tensor::new(alloc::vec![keep.len(), s[1], s[2], s[3]], data).expect("kept rows")
}

fn take_conv_in(w: &Tensor, keep: &[usize]) -> Tensor {
    let s = w.shape();
    let tap = s[2] * s[3];
    let mut data = Vec::with_capacity(s[0] * keep.len() * tap);
    for o in 0..s[0] {
        for &c in keep {
            let base = (o * s[1] + c) * tap;
            data.extend_from_slice(&w.data()[base..base + tap]);
        }
    }
    Tensor::new(alloc::vec![s[0], keep.len(), s[2], s[3]], data).expect("kept slices")
}

/// Dense rows come from flattening [C, H, W] channel-major, so channel c
/// owns the contiguous row block [c * H * W, (c + 1) * H * W).
fn take_dense_row_groups(w: &Tensor, keep: &[usize], group: usize) -> Tensor {
    let s = w.shape();
    let cols = s[1];
    let mut data = Vec::with_capacity(keep.len() * group * cols);
    for &c in keep {
        let base = c * group * cols;
        data.extend_from_slice(&w.data()[base..base + group * cols]);
    }
    Tensor::new(alloc::vec![keep.len() * group, cols], data).expect("kept row groups")
}

/// Remove the planned channels and rewire each consumer. Returns the
/// smaller network, its weights, and a summary.
pub fn prune_channels(
    net: &NetSpec,
    weights: &[Tensor],
    plan: &[LayerPrune],
) -> Result<(NetSpec, Vec<Tensor>, PruneReport)> {
    let by_layer = validate_plan(net, weights, plan)?;
    let weighted = net.weighted_layers();
    let feats = net.feature_shapes()?;

    let mut new_net = net.clone();
    for (&l, removed) in &by_layer {
        match &mut new_net.layers[weighted[l]] {
            Layer::Conv { out_c, .. } => *out_c -= removed.len(),
            _ => unreachable!("validated as conv"),
        }
    }

    let mut new_weights = Vec::with_capacity(weights.len());
    let mut per_layer = Vec::new();
    for (l, w) in weights.iter().enumerate() {
        let mut t = w.clone();
        // Producer side: the previous weighted layer lost output channels.
        if l > 0 {
            if let Some(removed) = by_layer.get(&(l - 1)) {
                let prev_c = w_in_channels(net, &weighted, l);
                let keep = keep_of(prev_c, removed);
                t = match net.layers[weighted[l]] {
                    Layer::Conv { .. } => take_conv_in(&t, &keep),
                    Layer::Dense { .. } => {
                        // Spatial extent feeding this dense layer.
                        let (c, h, wd) = dense_input_shape(net, &feats, weighted[l]);
                        debug_assert_eq!(c, prev_c);
                        take_dense_row_groups(&t, &keep, h * wd)
                    }
                    Layer::Pool => unreachable!("weighted layer"),
                };
            }
        }
        if let Some(removed) = by_layer.get(&l) {
            let out_c = t.shape()[0];
            let keep = keep_of(out_c, removed);
            per_layer.push(LayerPruneSummary {
                weighted_layer: l,
                channels_before: out_c,
                removed: removed.clone(),
            });
            t = take_conv_out(&t, &keep);
        }
        new_weights.push(t);
    }

    new_net.validate()?;
    let count = |ws: &[Tensor]| ws.iter().map(|t| t.data().len() as u64).sum();
    let report = PruneReport {
        per_layer,
        params_before: count(weights),
        params_after: count(&new_weights),
    };
    Ok((new_net, new_weights, report))
}

/// Zero the planned channels' outgoing weights without changing shapes.
/// Forward passes then match the pruned network exactly.
pub fn mask_channels(
    net: &NetSpec,
    weights: &[Tensor],
    plan: &[LayerPrune],
) -> Result<Vec<Tensor>> {
    let by_layer = validate_plan(net, weights, plan)?;
    let mut out = weights.to_vec();
    for (&l, removed) in &by_layer {
        let t = &mut out[l];
        let s = t.shape().to_vec();
        let stride = s[1] * s[2] * s[3];
        let data = t.data_mut();
        for &c in removed {
            for v in &mut data[c * stride..(c + 1) * stride] {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Channels feeding weighted layer l: the previous weighted layer's
/// output width (pools in between preserve channels).
fn w_in_channels(net: &NetSpec, weighted: &[usize], l: usize) -> usize {
    match net.layers[weighted[l - 1]] {
        Layer::Conv { out_c, .. } => out_c,
        Layer::Dense { out_f } => out_f,
        Layer::Pool => unreachable!("weighted layer"),
    }
}

fn dense_input_shape(
    net: &NetSpec,
    feats: &[(usize, usize, usize)],
    layer_idx: usize,
) -> (usize, usize, usize) {
    if layer_idx == 0 {
        net.input
    } else {
        feats[layer_idx - 1]
    }
}
