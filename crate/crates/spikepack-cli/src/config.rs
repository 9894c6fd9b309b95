//! Pipeline configuration: a TOML file with typed sections. Unknown keys
//! are rejected so a config always means what it says.

use serde::{Deserialize, Serialize};
use spikepack_core::codebook::QuantMode;
use spikepack_core::data::SyntheticSpec;
use spikepack_core::lif::LifConfig;
use spikepack_core::metrics::SizeMode;
use spikepack_core::model::{Layer, NetSpec, Readout};
use spikepack_core::tape::SpikeMode;
use spikepack_core::train::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub arch: ArchConfig,
    pub lif: LifSection,
    pub train: TrainSection,
    pub compress: CompressSection,
    pub prune: PruneSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub classes: usize,
    pub planes: [usize; 3],
    pub noise_sigma: f64,
    pub per_class_train: usize,
    pub per_class_test: usize,
    /// IDX file paths, used when kind = "idx".
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        DatasetConfig {
            kind: DatasetKind::Synthetic,
            classes: s.classes,
            planes: [s.planes.0, s.planes.1, s.planes.2],
            noise_sigma: s.noise_sigma,
            per_class_train: s.per_class_train,
            per_class_test: s.per_class_test,
            train_images: String::new(),
            train_labels: String::new(),
            test_images: String::new(),
            test_labels: String::new(),
        }
    }
}

impl DatasetConfig {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            planes: (self.planes[0], self.planes[1], self.planes[2]),
            noise_sigma: self.noise_sigma,
            per_class_train: self.per_class_train,
            per_class_test: self.per_class_test,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Output channels of the conv stack; each conv is followed by a LIF
    /// layer and a 2x2 average pool.
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    #[serde(rename = "readout")]
    pub readout: ReadoutKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReadoutKind {
    Mean,
    Sum,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig { conv_channels: vec![16, 32], kernel: 3, readout: ReadoutKind::Mean }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifSection {
    pub beta: f64,
    pub u_thr: f64,
    pub t_steps: usize,
    pub surrogate_alpha: f64,
}

impl Default for LifSection {
    fn default() -> Self {
        let c = LifConfig::default();
        LifSection {
            beta: c.beta,
            u_thr: c.u_thr,
            t_steps: c.t_steps,
            surrogate_alpha: c.surrogate_alpha,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub cosine: bool,
    /// 0 disables fake-quantized training.
    pub qat_bits: u32,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 30,
            batch_size: 64,
            lr: 0.01,
            weight_decay: 1e-4,
            cosine: true,
            qat_bits: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressSection {
    pub m: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub cosine: bool,
    pub beta_commit: f64,
    pub passthrough: bool,
    pub kmeans_iters: usize,
    pub ternary_threshold: f64,
    /// Codebook grid width written by the quantize step.
    pub bits: u32,
    pub quant_mode: QuantModeKind,
    /// Post-quantization finetune length as a fraction of the stage.
    pub quant_finetune_frac: f64,
}

impl Default for CompressSection {
    fn default() -> Self {
        CompressSection {
            m: 4,
            epochs: 15,
            batch_size: 64,
            lr: 1e-4,
            weight_decay: 1e-4,
            cosine: true,
            beta_commit: 0.5,
            passthrough: true,
            kmeans_iters: 50,
            ternary_threshold: 0.05,
            bits: 8,
            quant_mode: QuantModeKind::UnitFloor,
            quant_finetune_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantModeKind {
    /// Scale never drops below one; narrow codebooks land on the integer grid.
    UnitFloor,
    /// Scale spreads the range over the whole grid.
    Resolution,
}

impl QuantModeKind {
    pub fn to_core(self) -> QuantMode {
        match self {
            QuantModeKind::UnitFloor => QuantMode::UnitFloor,
            QuantModeKind::Resolution => QuantMode::ResolutionPreserving,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    pub ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub cosine: bool,
    /// Training batches used to estimate saliency.
    pub calib_batches: usize,
}

impl Default for PruneSection {
    fn default() -> Self {
        PruneSection {
            ratio: 0.3,
            epochs: 15,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 1e-4,
            cosine: true,
            calib_batches: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub repeats: usize,
    pub batch_size: usize,
    pub latency_batches: usize,
    pub size_mode: SizeModeKind,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            repeats: 5,
            batch_size: 64,
            latency_batches: 3,
            size_mode: SizeModeKind::Flat,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SizeModeKind {
    /// Every weight billed at the level bit width.
    Flat,
    /// Index bits per weight plus the codebook table.
    Index,
}

impl SizeModeKind {
    pub fn to_core(self) -> SizeMode {
        match self {
            SizeModeKind::Flat => SizeMode::FlatBits,
            SizeModeKind::Index => SizeMode::IndexCodebook,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &std::path::Path) -> Result<PipelineConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.dataset.classes < 2 {
            return bad(format!("dataset.classes must be >= 2, got {}", self.dataset.classes));
        }
        if self.dataset.planes.iter().any(|&d| d == 0) {
            return bad(format!("dataset.planes must be positive, got {:?}", self.dataset.planes));
        }
        if self.dataset.kind == DatasetKind::Idx {
            for (name, v) in [
                ("train_images", &self.dataset.train_images),
                ("train_labels", &self.dataset.train_labels),
                ("test_images", &self.dataset.test_images),
                ("test_labels", &self.dataset.test_labels),
            ] {
                if v.is_empty() {
                    return bad(format!("dataset.{name} is required when kind = \"idx\""));
                }
            }
        }
        if self.arch.conv_channels.is_empty() || self.arch.conv_channels.contains(&0) {
            return bad(format!(
                "arch.conv_channels must be non-empty positive, got {:?}",
                self.arch.conv_channels
            ));
        }
        if self.arch.kernel == 0 || self.arch.kernel % 2 == 0 {
            return bad(format!("arch.kernel must be odd, got {}", self.arch.kernel));
        }
        if self.compress.m < 2 {
            return bad(format!("compress.m must be >= 2, got {}", self.compress.m));
        }
        if !matches!(self.compress.bits, 2 | 4 | 8) {
            return bad(format!("compress.bits must be 2, 4, or 8, got {}", self.compress.bits));
        }
        if self.train.qat_bits != 0 && !(2..=16).contains(&self.train.qat_bits) {
            return bad(format!("train.qat_bits must be 0 or 2..16, got {}", self.train.qat_bits));
        }
        if !(0.0..1.0).contains(&self.prune.ratio) {
            return bad(format!("prune.ratio must be in [0, 1), got {}", self.prune.ratio));
        }
        if self.eval.repeats == 0 {
            return bad("eval.repeats must be >= 1".into());
        }
        if self.eval.latency_batches == 0 {
            return bad("eval.latency_batches must be >= 1".into());
        }
        for (name, v) in [
            ("train.batch_size", self.train.batch_size),
            ("compress.batch_size", self.compress.batch_size),
            ("prune.batch_size", self.prune.batch_size),
            ("eval.batch_size", self.eval.batch_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        self.net_spec().map_err(|e| CliError::Config(format!("architecture: {e}")))?;
        Ok(())
    }

    pub fn lif_config(&self) -> LifConfig {
        LifConfig {
            beta: self.lif.beta,
            u_thr: self.lif.u_thr,
            t_steps: self.lif.t_steps,
            surrogate_alpha: self.lif.surrogate_alpha,
        }
    }

    /// conv -> pool per entry in conv_channels, then the classifier head.
    pub fn net_spec(&self) -> spikepack_core::Result<NetSpec> {
        let mut layers = Vec::new();
        for &c in &self.arch.conv_channels {
            layers.push(Layer::Conv {
                out_c: c,
                kernel: self.arch.kernel,
                stride: 1,
                pad: self.arch.kernel / 2,
            });
            layers.push(Layer::Pool);
        }
        layers.push(Layer::Dense { out_f: self.dataset.classes });
        let net = NetSpec {
            input: (self.dataset.planes[0], self.dataset.planes[1], self.dataset.planes[2]),
            layers,
            lif: self.lif_config(),
            readout: match self.arch.readout {
                ReadoutKind::Mean => Readout::Mean,
                ReadoutKind::Sum => Readout::Sum,
            },
        };
        net.validate()?;
        Ok(net)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            cosine: self.train.cosine,
            seed: self.seed,
            mode: SpikeMode::Hard,
            ..TrainConfig::default()
        }
    }

    pub fn compress_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.compress.epochs,
            batch_size: self.compress.batch_size,
            lr: self.compress.lr,
            weight_decay: self.compress.weight_decay,
            cosine: self.compress.cosine,
            commit_beta: self.compress.beta_commit,
            passthrough: self.compress.passthrough,
            seed: self.seed,
            mode: SpikeMode::Hard,
            ..TrainConfig::default()
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.prune.epochs,
            batch_size: self.prune.batch_size,
            lr: self.prune.lr,
            weight_decay: self.prune.weight_decay,
            cosine: self.prune.cosine,
            seed: self.seed,
            mode: SpikeMode::Hard,
            ..TrainConfig::default()
        }
    }

    /// Stable fingerprint of the effective configuration, stored in model
    /// files so a model can be traced to the run that produced it.
    pub fn hash(&self) -> u64 {
        let text = toml::to_string(self).expect("config serializes");
        fnv1a(text.as_bytes())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
