//! Model container and pipeline stages: dense training, quantization-aware
//! training, codebook compression, ternarization, pruning, and evaluation.
//!
//! A model is the network description plus one payload per weighted layer.
//! The payload decides how the effective weights the network multiplies by
//! are produced from the stored parameters, both on the tape during
//! training and off the tape for export and validation.

use alloc::vec::Vec;

use crate::codebook::{self, Codebook, QuantMode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kmeans;
use crate::lif::encode_replicate;
use crate::metrics::{self, LayerFacts, SizeMode};
use crate::model::{Layer, NetSpec};
use crate::optim::{adamw_step, cosine_lr, AdamHyper, AdamState};
use crate::prune::{self, ActivityStats, Criterion, LayerPrune, PruneReport};
use crate::tape::{fake_quant_values, SpikeMode, Tape, TensorId};
use crate::tensor::Tensor;
use crate::ternary::{self, TernaryLayer};
use crate::unroll;

#[derive(Debug, Clone)]
pub enum LayerPayload {
    /// Dense weights, optionally snapped through a fake-quantizer on the
    /// forward pass (quantization-aware training).
    Fp { weight: Tensor, qat_bits: Option<u32> },
    /// Latent weights tied to a shared per-layer codebook.
    Cat { latent: Tensor, codebook: Codebook },
    /// Latent weights snapped to {-w_neg, 0, +w_pos}.
    Ternary { layer: TernaryLayer },
}

impl LayerPayload {
    /// The weights the network actually multiplies by, off the tape.
    pub fn effective(&self) -> Result<Tensor> {
        match self {
            LayerPayload::Fp { weight, qat_bits: None } => Ok(weight.clone()),
            LayerPayload::Fp { weight, qat_bits: Some(b) } => {
                Tensor::new(weight.shape().to_vec(), fake_quant_values(weight.data(), *b))
            }
            LayerPayload::Cat { latent, codebook } => {
                let values = if codebook.quant.is_some() {
                    codebook.reconstruct(latent.data())?.1
                } else {
                    codebook::assign(latent.data(), &codebook.levels).1
                };
                Tensor::new(latent.shape().to_vec(), values)
            }
            LayerPayload::Ternary { layer } => {
                Tensor::new(layer.latent.shape().to_vec(), layer.effective_values())
            }
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            LayerPayload::Fp { weight, .. } => weight.shape(),
            LayerPayload::Cat { latent, .. } => latent.shape(),
            LayerPayload::Ternary { layer } => layer.latent.shape(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn distinct_effective(&self) -> Result<usize> {
        Ok(codebook::distinct_count(self.effective()?.data()))
    }

    /// Stored precision per weight for size accounting: fp32 unless the
    /// payload pins something narrower.
    pub fn nominal_bits(&self) -> u32 {
        match self {
            LayerPayload::Fp { qat_bits: Some(b), .. } => *b,
            LayerPayload::Fp { qat_bits: None, .. } => 32,
            LayerPayload::Cat { codebook, .. } => {
                codebook.quant.as_ref().map(|q| q.bits).unwrap_or(32)
            }
            LayerPayload::Ternary { .. } => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SnnModel {
    pub net: NetSpec,
    pub payloads: Vec<LayerPayload>,
}

impl SnnModel {
    pub fn fresh(net: NetSpec, seed: u64) -> Result<SnnModel> {
        net.validate()?;
        let payloads = net
            .init_weights(seed)?
            .into_iter()
            .map(|weight| LayerPayload::Fp { weight, qat_bits: None })
            .collect();
        Ok(SnnModel { net, payloads })
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        let shapes = self.net.weight_shapes()?;
        if shapes.len() != self.payloads.len() {
            return Err(Error::Dimension {
                op: "model",
                detail: alloc::format!(
                    "{} payloads for {} weighted layers",
                    self.payloads.len(),
                    shapes.len()
                ),
            });
        }
        for (p, s) in self.payloads.iter().zip(&shapes) {
            if p.shape() != &s[..] {
                return Err(Error::Dimension {
                    op: "model",
                    detail: alloc::format!("payload {:?} does not match layer {:?}", p.shape(), s),
                });
            }
        }
        Ok(())
    }

    pub fn effective_weights(&self) -> Result<Vec<Tensor>> {
        self.payloads.iter().map(|p| p.effective()).collect()
    }

    pub fn param_count(&self) -> u64 {
        self.payloads.iter().map(|p| p.param_count() as u64).sum()
    }

    /// Total stored bits under the chosen accounting.
    pub fn model_bits(&self, mode: SizeMode) -> u64 {
        self.payloads
            .iter()
            .map(|p| match (p, mode) {
                (LayerPayload::Cat { latent, codebook }, SizeMode::IndexCodebook) => {
                    metrics::codebook_layer_bits(
                        latent.numel() as u64,
                        codebook.m(),
                        p.nominal_bits(),
                        mode,
                    )
                }
                _ => p.param_count() as u64 * p.nominal_bits() as u64,
            })
            .sum()
    }

    pub fn size_mb(&self, mode: SizeMode) -> f64 {
        self.model_bits(mode) as f64 / 8e6
    }

    /// Start codebook training (or a post-hoc clustering baseline) from a
    /// dense model: per layer, k-means over the weights seeds the levels
    /// and the weights become the latents.
    pub fn to_cat(&self, m: usize, kmeans_iters: usize, seed: u64) -> Result<SnnModel> {
        let mut payloads = Vec::with_capacity(self.payloads.len());
        for (l, p) in self.payloads.iter().enumerate() {
            let weight = match p {
                LayerPayload::Fp { weight, .. } => weight,
                _ => return Err(Error::State("codebook conversion starts from dense weights".into())),
            };
            let km = kmeans::kmeans_1d(weight.data(), m, kmeans_iters, seed.wrapping_add(l as u64))?;
            payloads.push(LayerPayload::Cat {
                latent: weight.clone(),
                codebook: Codebook::new(km.centroids)?,
            });
        }
        Ok(SnnModel { net: self.net.clone(), payloads })
    }

    pub fn to_ternary(&self, threshold_frac: f64) -> Result<SnnModel> {
        let mut payloads = Vec::with_capacity(self.payloads.len());
        for p in &self.payloads {
            let weight = match p {
                LayerPayload::Fp { weight, .. } => weight,
                _ => return Err(Error::State("ternarization starts from dense weights".into())),
            };
            payloads.push(LayerPayload::Ternary {
                layer: TernaryLayer::from_latent(weight.clone(), threshold_frac)?,
            });
        }
        Ok(SnnModel { net: self.net.clone(), payloads })
    }

    /// Snap every effective weight back into a plain dense payload.
    pub fn to_dense(&self) -> Result<SnnModel> {
        let payloads = self
            .effective_weights()?
            .into_iter()
            .map(|weight| LayerPayload::Fp { weight, qat_bits: None })
            .collect();
        Ok(SnnModel { net: self.net.clone(), payloads })
    }

    pub fn set_qat(&mut self, bits: u32) -> Result<()> {
        for p in &mut self.payloads {
            match p {
                LayerPayload::Fp { qat_bits, .. } => *qat_bits = Some(bits),
                _ => return Err(Error::State("fake-quant training needs dense payloads".into())),
            }
        }
        Ok(())
    }

    pub fn quantize_codebooks(&mut self, bits: u32, mode: QuantMode) -> Result<()> {
        let mut any = false;
        for p in &mut self.payloads {
            if let LayerPayload::Cat { codebook, .. } = p {
                codebook.quantize(bits, mode)?;
                any = true;
            }
        }
        if !any {
            return Err(Error::State("no codebook layers to quantize".into()));
        }
        Ok(())
    }

    /// Facts the hardware-profile validator consumes, one per weighted
    /// layer: neurons are output units, synapses are weights.
    pub fn layer_facts(&self) -> Result<Vec<LayerFacts>> {
        self.validate()?;
        let feats = self.net.feature_shapes()?;
        let weighted = self.net.weighted_layers();
        let mut out = Vec::new();
        for (l, p) in self.payloads.iter().enumerate() {
            let (c, h, w) = feats[weighted[l]];
            out.push(LayerFacts {
                unique_weight_values: p.distinct_effective()?,
                bits: p.nominal_bits(),
                neurons: (c * h * w) as u64,
                synapses: p.param_count() as u64,
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight of the codebook commitment term.
    pub commit_beta: f64,
    /// Whether task gradients reach codebook levels through the forward
    /// read (in addition to the commitment term).
    pub passthrough: bool,
    pub cosine: bool,
    pub seed: u64,
    pub mode: SpikeMode,
    /// Train the static ReLU variant of the topology instead of the
    /// spiking unroll; used to pretrain weights for conversion.
    pub analog: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            lr: 0.01,
            weight_decay: 1e-4,
            commit_beta: 0.5,
            passthrough: true,
            cosine: true,
            seed: 0,
            mode: SpikeMode::Hard,
            analog: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Task plus commitment, duplicated as task alone next to it.
    pub mean_loss: f64,
    pub task_loss: f64,
    pub train_acc: f64,
    /// Worst per-layer distinct effective-value count seen after any step
    /// this epoch; None for dense payloads.
    pub max_distinct: Option<usize>,
    pub refreshed_levels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
    /// Worst per-layer distinct count right after any optimizer step of
    /// the whole run; None for dense payloads.
    pub max_step_distinct: Option<usize>,
}

#[derive(Clone, Copy)]
enum Slot {
    Weight,
    Latent,
    Levels,
    Scales,
}

struct Binding {
    id: TensorId,
    slot: Slot,
    decay: bool,
}

struct Bound {
    w_eff: TensorId,
    bindings: Vec<Binding>,
    commit_sq: Option<TensorId>,
}

fn bind_payload(tape: &mut Tape, payload: &LayerPayload, passthrough: bool) -> Result<Bound> {
    match payload {
        LayerPayload::Fp { weight, qat_bits } => {
            let id = tape.input(weight.clone());
            let w_eff = match qat_bits {
                Some(b) => tape.fake_quant(id, *b)?,
                None => id,
            };
            Ok(Bound {
                w_eff,
                bindings: alloc::vec![Binding { id, slot: Slot::Weight, decay: true }],
                commit_sq: None,
            })
        }
        LayerPayload::Cat { latent, codebook } => {
            let latent_id = tape.input(latent.clone());
            if codebook.quant.is_some() {
                // Post-quantization finetune: the grid is frozen, only the
                // latents (and with them the assignments) keep moving.
                let levels = codebook.reconstruction_levels()?;
                let levels_id = tape.constant(Tensor::new(alloc::vec![levels.len()], levels)?);
                let graph = codebook::effective_weights(tape, latent_id, levels_id, passthrough)?;
                return Ok(Bound {
                    w_eff: graph.w_eff,
                    bindings: alloc::vec![Binding { id: latent_id, slot: Slot::Latent, decay: true }],
                    commit_sq: None,
                });
            }
            let levels_id = tape.input(Tensor::new(
                alloc::vec![codebook.m()],
                codebook.levels.clone(),
            )?);
            let graph = codebook::effective_weights(tape, latent_id, levels_id, passthrough)?;
            let commit_sq = codebook::commitment_sq_sum(tape, graph.w_q, latent)?;
            Ok(Bound {
                w_eff: graph.w_eff,
                bindings: alloc::vec![
                    Binding { id: latent_id, slot: Slot::Latent, decay: true },
                    Binding { id: levels_id, slot: Slot::Levels, decay: false },
                ],
                commit_sq: Some(commit_sq),
            })
        }
        LayerPayload::Ternary { layer } => {
            let (w_eff, latent_id, scales_id) = ternary::effective_weights(tape, layer)?;
            Ok(Bound {
                w_eff,
                bindings: alloc::vec![
                    Binding { id: latent_id, slot: Slot::Latent, decay: true },
                    Binding { id: scales_id, slot: Slot::Scales, decay: false },
                ],
                commit_sq: None,
            })
        }
    }
}

fn apply_update(
    payload: &mut LayerPayload,
    slot: Slot,
    grad: &[f64],
    state: &mut AdamState,
    hyper: &AdamHyper,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    match (payload, slot) {
        (LayerPayload::Fp { weight, .. }, Slot::Weight) => {
            adamw_step(weight.data_mut(), grad, state, hyper, lr, weight_decay)
        }
        (LayerPayload::Cat { latent, .. }, Slot::Latent) => {
            adamw_step(latent.data_mut(), grad, state, hyper, lr, weight_decay)
        }
        (LayerPayload::Cat { codebook, .. }, Slot::Levels) => {
            adamw_step(&mut codebook.levels, grad, state, hyper, lr, 0.0)
        }
        (LayerPayload::Ternary { layer }, Slot::Latent) => {
            adamw_step(layer.latent.data_mut(), grad, state, hyper, lr, weight_decay)
        }
        (LayerPayload::Ternary { layer }, Slot::Scales) => {
            let mut scales = alloc::vec![layer.w_pos, layer.w_neg];
            adamw_step(&mut scales, grad, state, hyper, lr, 0.0)?;
            layer.set_scales(scales[0], scales[1]);
            Ok(())
        }
        _ => Err(Error::State("parameter slot does not match payload".into())),
    }
}

/// Distinct counts only matter for payloads whose effective values are
/// supposed to collapse; dense layers report None.
fn tracked_distinct(model: &SnnModel) -> Result<Option<usize>> {
    let mut worst = None;
    for p in &model.payloads {
        match p {
            LayerPayload::Cat { .. } | LayerPayload::Ternary { .. } => {
                let d = p.distinct_effective()?;
                worst = Some(worst.map_or(d, |w: usize| w.max(d)));
            }
            LayerPayload::Fp { .. } => {}
        }
    }
    Ok(worst)
}

/// Run the optimizer over the dataset, updating the model in place.
pub fn train(model: &mut SnnModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, data, cfg, |_, _| Ok(()))
}

/// [`train`] with a hook called after every finished epoch, for logging
/// or per-epoch evaluation.
pub fn train_with<F>(
    model: &mut SnnModel,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainReport>
where
    F: FnMut(&SnnModel, &EpochStats) -> Result<()>,
{
    model.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if data.classes != model.net.classes() {
        return Err(Error::Contract(alloc::format!(
            "dataset has {} classes, head emits {}",
            data.classes,
            model.net.classes()
        )));
    }
    let hyper = AdamHyper::default();
    let mut states: Vec<Vec<AdamState>> = model
        .payloads
        .iter()
        .map(|p| match p {
            LayerPayload::Fp { weight, .. } => alloc::vec![AdamState::new(weight.numel())],
            LayerPayload::Cat { latent, codebook } => {
                if codebook.quant.is_some() {
                    alloc::vec![AdamState::new(latent.numel())]
                } else {
                    alloc::vec![AdamState::new(latent.numel()), AdamState::new(codebook.m())]
                }
            }
            LayerPayload::Ternary { layer } => {
                alloc::vec![AdamState::new(layer.latent.numel()), AdamState::new(2)]
            }
        })
        .collect();

    let total_params: usize = model.payloads.iter().map(|p| p.param_count()).sum();
    let steps_per_epoch = data.batches(cfg.batch_size, cfg.seed, 0).len();
    let total_steps = steps_per_epoch * cfg.epochs;
    let t_steps = model.net.lif.t_steps;

    let mut report = TrainReport { epochs: Vec::new(), steps: 0, max_step_distinct: None };
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut task_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut epoch_distinct: Option<usize> = None;

        for batch in data.batches(cfg.batch_size, cfg.seed, epoch as u64) {
            let (x, labels) = data.gather(&batch)?;

            let mut tape = Tape::new();
            let mut bounds = Vec::with_capacity(model.payloads.len());
            for p in &model.payloads {
                bounds.push(bind_payload(&mut tape, p, cfg.passthrough)?);
            }
            let w_ids: Vec<TensorId> = bounds.iter().map(|b| b.w_eff).collect();
            let logits_id = if cfg.analog {
                unroll::analog_forward(&mut tape, &model.net, &w_ids, &x)?
            } else {
                let x_seq = encode_replicate(&x, t_steps)?;
                unroll::unroll(&mut tape, &model.net, &w_ids, &x_seq, cfg.mode)?.logits
            };
            let task = tape.softmax_xent(logits_id, &labels)?;

            let mut commit_total = None;
            for b in &bounds {
                if let Some(sq) = b.commit_sq {
                    commit_total = Some(match commit_total {
                        None => sq,
                        Some(acc) => tape.add(acc, sq)?,
                    });
                }
            }
            let loss = match commit_total {
                Some(sq_sum) => {
                    let commit = tape.scale(sq_sum, 1.0 / total_params as f64);
                    codebook::total_loss(&mut tape, task, commit, cfg.commit_beta)?
                }
                None => task,
            };
            tape.backward(loss)?;

            let lr = if cfg.cosine {
                cosine_lr(report.steps, total_steps.max(1), cfg.lr)
            } else {
                cfg.lr
            };
            for (l, bound) in bounds.iter().enumerate() {
                for (s, binding) in bound.bindings.iter().enumerate() {
                    let grad = tape.grad(binding.id).to_vec();
                    let wd = if binding.decay { cfg.weight_decay } else { 0.0 };
                    apply_update(
                        &mut model.payloads[l],
                        binding.slot,
                        &grad,
                        &mut states[l][s],
                        &hyper,
                        lr,
                        wd,
                    )?;
                }
            }
            report.steps += 1;

            if let Some(d) = tracked_distinct(model)? {
                epoch_distinct = Some(epoch_distinct.map_or(d, |w| w.max(d)));
                report.max_step_distinct =
                    Some(report.max_step_distinct.map_or(d, |w| w.max(d)));
            }

            let logits = tape.value(logits_id);
            let k = data.classes;
            for (i, &label) in labels.iter().enumerate() {
                if argmax(&logits[i * k..(i + 1) * k]) == label {
                    correct += 1;
                }
            }
            loss_sum += tape.value(loss)[0] * batch.len() as f64;
            task_sum += tape.value(task)[0] * batch.len() as f64;
            seen += batch.len();
        }

        let mut refreshed = 0;
        for p in &mut model.payloads {
            if let LayerPayload::Cat { latent, codebook } = p {
                if codebook.quant.is_some() {
                    continue;
                }
                let (assignment, _) = codebook::assign(latent.data(), &codebook.levels);
                let mut used = alloc::vec![false; codebook.m()];
                for &a in &assignment {
                    used[a] = true;
                }
                refreshed += codebook::refresh_dead_levels(&mut codebook.levels, latent.data(), &used);
            }
        }

        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / seen as f64,
            task_loss: task_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            max_distinct: epoch_distinct,
            refreshed_levels: refreshed,
        };
        on_epoch(model, &stats)?;
        report.epochs.push(stats);
    }
    Ok(report)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mean_loss: f64,
    /// Mean spike activity of each spiking weighted layer over the set.
    pub spike_rates: Vec<f64>,
    pub preds: Vec<usize>,
}

/// Forward-only pass over the whole set with the model's effective
/// weights.
pub fn evaluate(
    model: &SnnModel,
    data: &Dataset,
    batch_size: usize,
    mode: SpikeMode,
) -> Result<EvalReport> {
    model.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let weights = model.effective_weights()?;
    let t_steps = model.net.lif.t_steps;
    let spiking = model.net.spiking_weighted_layers().len();

    let mut preds = Vec::with_capacity(data.len());
    let mut loss_sum = 0.0;
    let mut spike_sum = alloc::vec![0.0; spiking];
    let mut spike_n = alloc::vec![0u64; spiking];

    let order: Vec<usize> = (0..data.len()).collect();
    for batch in order.chunks(batch_size.max(1)) {
        let (x, labels) = data.gather(batch)?;
        let x_seq = encode_replicate(&x, t_steps)?;
        let mut tape = Tape::new();
        let w_ids: Vec<TensorId> =
            weights.iter().map(|w| tape.constant(w.clone())).collect();
        let un = unroll::unroll(&mut tape, &model.net, &w_ids, &x_seq, mode)?;
        let loss = tape.softmax_xent(un.logits, &labels)?;
        loss_sum += tape.value(loss)[0] * batch.len() as f64;

        let logits = tape.value(un.logits);
        let k = data.classes;
        for i in 0..batch.len() {
            preds.push(argmax(&logits[i * k..(i + 1) * k]));
        }
        for (l, steps) in un.spikes.iter().enumerate() {
            for &id in steps {
                let v = tape.value(id);
                spike_sum[l] += v.iter().sum::<f64>();
                spike_n[l] += v.len() as u64;
            }
        }
    }

    let m = metrics::classification_metrics(&preds, &data.y, data.classes)?;
    Ok(EvalReport {
        accuracy: m.accuracy,
        macro_f1: m.macro_f1,
        mean_loss: loss_sum / data.len() as f64,
        spike_rates: spike_sum
            .iter()
            .zip(&spike_n)
            .map(|(&s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
            .collect(),
        preds,
    })
}

/// [`evaluate`] for the static ReLU variant of the topology. Spike rates
/// are empty: nothing spikes.
pub fn evaluate_analog(model: &SnnModel, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    model.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let weights = model.effective_weights()?;
    let mut preds = Vec::with_capacity(data.len());
    let mut loss_sum = 0.0;
    let order: Vec<usize> = (0..data.len()).collect();
    for batch in order.chunks(batch_size.max(1)) {
        let (x, labels) = data.gather(batch)?;
        let mut tape = Tape::new();
        let w_ids: Vec<TensorId> =
            weights.iter().map(|w| tape.constant(w.clone())).collect();
        let logits_id = unroll::analog_forward(&mut tape, &model.net, &w_ids, &x)?;
        let loss = tape.softmax_xent(logits_id, &labels)?;
        loss_sum += tape.value(loss)[0] * batch.len() as f64;
        let logits = tape.value(logits_id);
        let k = data.classes;
        for i in 0..batch.len() {
            preds.push(argmax(&logits[i * k..(i + 1) * k]));
        }
    }
    let m = metrics::classification_metrics(&preds, &data.y, data.classes)?;
    Ok(EvalReport {
        accuracy: m.accuracy,
        macro_f1: m.macro_f1,
        mean_loss: loss_sum / data.len() as f64,
        spike_rates: Vec::new(),
        preds,
    })
}

/// Rates feeding each weighted layer, for the energy model: layer 0 is
/// analog (None), layer l > 0 sees the spikes of spiking layer l - 1.
pub fn input_rates(spike_rates: &[f64], weighted_layers: usize) -> Vec<Option<f64>> {
    (0..weighted_layers)
        .map(|l| if l == 0 { None } else { spike_rates.get(l - 1).copied() })
        .collect()
}

fn mean_loss_with(
    net: &NetSpec,
    weights: &[Tensor],
    data: &Dataset,
    batch_size: usize,
    mode: SpikeMode,
) -> Result<f64> {
    let t_steps = net.lif.t_steps;
    let order: Vec<usize> = (0..data.len()).collect();
    let mut loss_sum = 0.0;
    for batch in order.chunks(batch_size.max(1)) {
        let (x, labels) = data.gather(batch)?;
        let x_seq = encode_replicate(&x, t_steps)?;
        let mut tape = Tape::new();
        let w_ids: Vec<TensorId> =
            weights.iter().map(|w| tape.constant(w.clone())).collect();
        let un = unroll::unroll(&mut tape, net, &w_ids, &x_seq, mode)?;
        let loss = tape.softmax_xent(un.logits, &labels)?;
        loss_sum += tape.value(loss)[0] * batch.len() as f64;
    }
    Ok(loss_sum / data.len() as f64)
}

/// Spike statistics with loss gradients over the whole set; the slow part
/// of saliency scoring.
pub fn activity_saliency(
    model: &SnnModel,
    data: &Dataset,
    batch_size: usize,
    mode: SpikeMode,
) -> Result<ActivityStats> {
    model.validate()?;
    let weights = model.effective_weights()?;
    let t_steps = model.net.lif.t_steps;
    let mut stats = ActivityStats::new(&model.net)?;
    let order: Vec<usize> = (0..data.len()).collect();
    for batch in order.chunks(batch_size.max(1)) {
        let (x, labels) = data.gather(batch)?;
        let x_seq = encode_replicate(&x, t_steps)?;
        let mut tape = Tape::new();
        // Weights enter as differentiable inputs so the spike nodes carry
        // loss gradients for the backward pass to fill in.
        let w_ids: Vec<TensorId> = weights.iter().map(|w| tape.input(w.clone())).collect();
        let un = unroll::unroll(&mut tape, &model.net, &w_ids, &x_seq, mode)?;
        let loss = tape.softmax_xent(un.logits, &labels)?;
        tape.backward(loss)?;
        let records = unroll::collect_activity(&tape, &un);
        stats.absorb(&records)?;
    }
    Ok(stats)
}

/// Loss increase from silencing each channel of one spiking layer, by
/// direct measurement.
pub fn oracle_scores(
    model: &SnnModel,
    data: &Dataset,
    batch_size: usize,
    weighted_layer: usize,
    mode: SpikeMode,
) -> Result<Vec<f64>> {
    model.validate()?;
    let weights = model.effective_weights()?;
    let channels = weights
        .get(weighted_layer)
        .ok_or_else(|| Error::Contract(alloc::format!("no weighted layer {weighted_layer}")))?
        .shape()[0];
    let base = mean_loss_with(&model.net, &weights, data, batch_size, mode)?;
    let mut scores = Vec::with_capacity(channels);
    for c in 0..channels {
        let plan = [LayerPrune { weighted_layer, removed: alloc::vec![c] }];
        let masked = prune::mask_channels(&model.net, &weights, &plan)?;
        let loss = mean_loss_with(&model.net, &masked, data, batch_size, mode)?;
        scores.push(loss - base);
    }
    Ok(scores)
}

/// Per spiking conv layer: saliency scores under the chosen criterion,
/// in weighted-layer order.
pub fn saliency_scores(
    model: &SnnModel,
    data: &Dataset,
    batch_size: usize,
    criterion: Criterion,
    mode: SpikeMode,
) -> Result<Vec<Vec<f64>>> {
    match criterion {
        Criterion::Fsc => activity_saliency(model, data, batch_size, mode)?.fsc_scores(),
        Criterion::Sca => activity_saliency(model, data, batch_size, mode)?.sca_scores(),
        Criterion::Mag => {
            let weights = model.effective_weights()?;
            model
                .net
                .spiking_weighted_layers()
                .iter()
                .map(|&l| prune::magnitude_scores(&weights[l]))
                .collect()
        }
        Criterion::Oracle => model
            .net
            .spiking_weighted_layers()
            .iter()
            .map(|&l| oracle_scores(model, data, batch_size, l, mode))
            .collect(),
    }
}

/// Remove the lowest-salience channels of every spiking conv layer.
/// Scores arrive per spiking weighted layer, as [`saliency_scores`]
/// returns them.
///
/// Surgery acts on each payload's stored tensor (weights or latents);
/// codebooks and ternary scales carry over unchanged. For dense and
/// codebook payloads the result is exactly the masked model with the
/// dead slices cut out; a per-tensor quantization grid (QAT, ternary
/// threshold) can shift when the extremal value was in a removed slice.
pub fn prune_model(
    model: &SnnModel,
    scores: &[Vec<f64>],
    ratio: f64,
) -> Result<(SnnModel, PruneReport)> {
    model.validate()?;
    let weights: Vec<Tensor> = model
        .payloads
        .iter()
        .map(|p| match p {
            LayerPayload::Fp { weight, .. } => weight.clone(),
            LayerPayload::Cat { latent, .. } => latent.clone(),
            LayerPayload::Ternary { layer } => layer.latent.clone(),
        })
        .collect();
    let spiking = model.net.spiking_weighted_layers();
    if scores.len() != spiking.len() {
        return Err(Error::Dimension {
            op: "prune_model",
            detail: alloc::format!("{} score sets for {} spiking layers", scores.len(), spiking.len()),
        });
    }
    let weighted = model.net.weighted_layers();
    let mut plan = Vec::new();
    for (&l, layer_scores) in spiking.iter().zip(scores) {
        if !matches!(model.net.layers[weighted[l]], Layer::Conv { .. }) {
            continue;
        }
        let removed = prune::select_prune_channels(layer_scores, ratio)?;
        if !removed.is_empty() {
            plan.push(LayerPrune { weighted_layer: l, removed });
        }
    }
    let (net, new_weights, report) = prune::prune_channels(&model.net, &weights, &plan)?;
    let payloads = new_weights
        .into_iter()
        .zip(&model.payloads)
        .map(|(tensor, old)| match old {
            LayerPayload::Fp { qat_bits, .. } => {
                LayerPayload::Fp { weight: tensor, qat_bits: *qat_bits }
            }
            LayerPayload::Cat { codebook, .. } => {
                LayerPayload::Cat { latent: tensor, codebook: codebook.clone() }
            }
            LayerPayload::Ternary { layer } => LayerPayload::Ternary {
                layer: TernaryLayer { latent: tensor, ..layer.clone() },
            },
        })
        .collect();
    Ok((SnnModel { net, payloads }, report))
}
