//! Deployability metrics: model size, energy estimate, DeployRatio,
//! classification scores, rank correlation, and hardware-profile checks.
//!
//! Energy follows the usual SNN op-count convention: the first layer sees
//! analog input and is billed as multiply-accumulates once per inference;
//! every later weighted layer is billed as accumulates gated by its input
//! spike rate and the number of time steps. Latency is measured by the
//! companion crate (wall clock needs an OS), so DeployRatio here takes
//! the three denominator components as plain numbers.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::model::{Layer, NetSpec};

pub const E_MAC_PJ: f64 = 4.6;
pub const E_AC_PJ: f64 = 0.9;
pub const DEFAULT_SPIKE_RATE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyModel {
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
    /// Used for a layer when no measured input rate is supplied.
    pub default_rate: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel { e_mac_pj: E_MAC_PJ, e_ac_pj: E_AC_PJ, default_rate: DEFAULT_SPIKE_RATE }
    }
}

/// Synaptic operations per weighted layer for ONE sample: every
/// multiply-accumulate (or accumulate) the layer's linear map performs.
pub fn op_counts(net: &NetSpec) -> Result<Vec<u64>> {
    net.validate()?;
    let mut out = Vec::new();
    let (mut c, mut h, mut w) = net.input;
    for layer in &net.layers {
        match *layer {
            Layer::Conv { out_c, kernel, stride, pad } => {
                let ho = (h + 2 * pad - kernel) / stride + 1;
                let wo = (w + 2 * pad - kernel) / stride + 1;
                out.push((out_c * ho * wo) as u64 * (c * kernel * kernel) as u64);
                c = out_c;
                h = ho;
                w = wo;
            }
            Layer::Pool => {
                h /= 2;
                w /= 2;
            }
            Layer::Dense { out_f } => {
                out.push((c * h * w) as u64 * out_f as u64);
                c = out_f;
                h = 1;
                w = 1;
            }
        }
    }
    Ok(out)
}

/// Estimated energy per inference in millijoules.
///
/// `input_rates[l]` is the measured mean spike rate feeding weighted
/// layer l; `None` falls back to the model default. Layer 0 ignores its
/// entry (analog input, MAC-billed once, no rate or time factor).
pub fn energy_mj(
    net: &NetSpec,
    input_rates: &[Option<f64>],
    em: &EnergyModel,
    t_steps: usize,
) -> Result<f64> {
    let counts = op_counts(net)?;
    if input_rates.len() != counts.len() {
        return Err(Error::Dimension {
            op: "energy_mj",
            detail: alloc::format!("{} rates for {} weighted layers", input_rates.len(), counts.len()),
        });
    }
    let mut pj = counts[0] as f64 * em.e_mac_pj;
    for (l, &ops) in counts.iter().enumerate().skip(1) {
        let rate = input_rates[l].unwrap_or(em.default_rate);
        pj += ops as f64 * rate * t_steps as f64 * em.e_ac_pj;
    }
    Ok(pj * 1e-9)
}

/// S = P * b / (8 * 10^6) megabytes.
pub fn model_size_mb(param_count: u64, bits_per_weight: u32) -> Result<f64> {
    if param_count == 0 || bits_per_weight == 0 {
        return Err(Error::Contract("size needs positive parameter count and bit width".into()));
    }
    Ok(param_count as f64 * bits_per_weight as f64 / 8e6)
}

/// How codebook-compressed layers are billed for size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeMode {
    /// b bits for every weight, indices billed like plain weights.
    FlatBits,
    /// ceil(log2 M) bits per weight index plus b bits per codebook level.
    IndexCodebook,
}

/// Bits needed to index `m` codebook levels.
pub fn index_bits(m: usize) -> u32 {
    let mut bits = 0u32;
    while (1usize << bits) < m {
        bits += 1;
    }
    bits.max(1)
}

/// Size of one codebook layer in bits under the chosen accounting.
pub fn codebook_layer_bits(weights: u64, m: usize, level_bits: u32, mode: SizeMode) -> u64 {
    match mode {
        SizeMode::FlatBits => weights * level_bits as u64,
        SizeMode::IndexCodebook => weights * index_bits(m) as u64 + m as u64 * level_bits as u64,
    }
}

/// perf / (latency * energy * size).
pub fn deploy_ratio(perf: f64, latency_s: f64, energy_mj: f64, size_mb: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&perf) {
        return Err(Error::Contract(alloc::format!("perf must be in [0, 1], got {perf}")));
    }
    if !(latency_s > 0.0) || !(energy_mj > 0.0) || !(size_mb > 0.0) {
        return Err(Error::Contract(alloc::format!(
            "denominator components must be positive: L={latency_s} E={energy_mj} S={size_mb}"
        )));
    }
    Ok(perf / (latency_s * energy_mj * size_mb))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// Macro-averaged classification scores. Classes never seen in the labels
/// still divide the macro means, contributing zero.
pub fn classification_metrics(
    preds: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<Classification> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Contract(alloc::format!(
            "need equal non-empty predictions and labels, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    if classes == 0 {
        return Err(Error::Contract("need at least one class".into()));
    }
    for &v in preds.iter().chain(labels) {
        if v >= classes {
            return Err(Error::Contract(alloc::format!("class id {v} out of range {classes}")));
        }
    }
    let mut tp = alloc::vec![0u64; classes];
    let mut fp = alloc::vec![0u64; classes];
    let mut fng = alloc::vec![0u64; classes];
    let mut correct = 0u64;
    for (&p, &l) in preds.iter().zip(labels) {
        if p == l {
            tp[l] += 1;
            correct += 1;
        } else {
            fp[p] += 1;
            fng[l] += 1;
        }
    }
    let mut prec_sum = 0.0;
    let mut rec_sum = 0.0;
    let mut f1_sum = 0.0;
    for k in 0..classes {
        let prec = ratio(tp[k], tp[k] + fp[k]);
        let rec = ratio(tp[k], tp[k] + fng[k]);
        let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
        prec_sum += prec;
        rec_sum += rec;
        f1_sum += f1;
    }
    let kf = classes as f64;
    Ok(Classification {
        accuracy: correct as f64 / preds.len() as f64,
        macro_precision: prec_sum / kf,
        macro_recall: rec_sum / kf,
        macro_f1: f1_sum / kf,
    })
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Spearman rank correlation with average ranks on ties. Returns an error
/// when either side is constant (correlation undefined).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Contract(alloc::format!(
            "spearman needs two equal series of length >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let ra = ranks(a);
    let rb = ranks(b);
    pearson(&ra, &rb)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite scores"));
    let mut out = alloc::vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Average rank over the tie run, 1-based.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Contract("correlation undefined for a constant series".into()));
    }
    Ok(cov / fmath::sqrt(va * vb))
}

/// Declarative deployment constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct HardwareProfile {
    pub name: String,
    pub max_unique_states: usize,
    pub allowed_bits: Vec<u32>,
    pub max_neurons: u64,
    pub max_synapses: u64,
}

/// What profile validation needs to know about one weighted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFacts {
    pub unique_weight_values: usize,
    /// Stored precision of the layer's weights.
    pub bits: u32,
    /// Output units (spiking or head neurons).
    pub neurons: u64,
    /// Weight count.
    pub synapses: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileCheck {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileReport {
    pub profile: String,
    pub checks: Vec<ProfileCheck>,
}

impl ProfileReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn validate_profile(layers: &[LayerFacts], profile: &HardwareProfile) -> ProfileReport {
    let mut checks = Vec::new();
    for (i, l) in layers.iter().enumerate() {
        checks.push(ProfileCheck {
            name: alloc::format!("layer{}-unique-states", i),
            passed: l.unique_weight_values <= profile.max_unique_states,
            measured: l.unique_weight_values as f64,
            bound: profile.max_unique_states as f64,
        });
        checks.push(ProfileCheck {
            name: alloc::format!("layer{}-bit-width", i),
            passed: profile.allowed_bits.contains(&l.bits),
            measured: l.bits as f64,
            bound: profile.allowed_bits.iter().copied().max().unwrap_or(0) as f64,
        });
    }
    let neurons: u64 = layers.iter().map(|l| l.neurons).sum();
    let synapses: u64 = layers.iter().map(|l| l.synapses).sum();
    checks.push(ProfileCheck {
        name: "total-neurons".into(),
        passed: neurons <= profile.max_neurons,
        measured: neurons as f64,
        bound: profile.max_neurons as f64,
    });
    checks.push(ProfileCheck {
        name: "total-synapses".into(),
        passed: synapses <= profile.max_synapses,
        measured: synapses as f64,
        bound: profile.max_synapses as f64,
    });
    ProfileReport { profile: profile.name.clone(), checks }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeployMetrics {
    pub perf_acc: f64,
    pub perf_f1: f64,
    pub latency_s: f64,
    pub energy_mj: f64,
    pub size_mb: f64,
    pub dr_acc: f64,
    pub dr_f1: f64,
}

impl DeployMetrics {
    pub fn new(
        perf_acc: f64,
        perf_f1: f64,
        latency_s: f64,
        energy_mj: f64,
        size_mb: f64,
    ) -> Result<Self> {
        Ok(DeployMetrics {
            perf_acc,
            perf_f1,
            latency_s,
            energy_mj,
            size_mb,
            dr_acc: deploy_ratio(perf_acc, latency_s, energy_mj, size_mb)?,
            dr_f1: deploy_ratio(perf_f1, latency_s, energy_mj, size_mb)?,
        })
    }
}
