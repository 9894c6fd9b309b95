//! Filesystem, file formats, and command plumbing around the core library.
//! The binary in `main.rs` is a thin argument parser over [`runs`].

pub mod config;
pub mod idx;
pub mod latency;
pub mod lut;
pub mod modelfile;
pub mod profiles;
pub mod runs;

use clap::ValueEnum;

/// Failures split by exit code: configuration and usage problems exit 2,
/// anything that went wrong while running exits 1.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Run(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) | CliError::Run(msg) => write!(f, "{msg}"),
        }
    }
}

impl From<spikepack_core::error::Error> for CliError {
    fn from(e: spikepack_core::error::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CompressMethod {
    /// Codebook training with a commitment pull on the latents.
    Cat,
    /// Conversion baseline: analog pretrain, fake-quant finetune, cluster
    /// snap, brief snapped finetune.
    Cluster,
    /// Two trained scales and a zero band.
    Ternary,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PruneCriterion {
    /// Loss-gradient spike saliency.
    Fsc,
    /// Mean spike activity.
    Sca,
    /// Output-slice weight magnitude.
    Mag,
    /// Measured loss change per masked channel.
    Oracle,
}
