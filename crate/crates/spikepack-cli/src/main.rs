use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spikepack_cli::{runs, CliError, CompressMethod, PruneCriterion};

#[derive(Parser)]
#[command(name = "spikepack", version, about = "Compression pipeline for spiking networks")]
struct Cli {
    /// TOML configuration; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for models, logs, and reports.
    #[arg(long, global = true, default_value = "spikepack-out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision spiking model
    Train,
    /// Re-express trained weights in a compressed form
    Compress {
        #[arg(value_enum)]
        method: CompressMethod,
        /// Input model; defaults to <out-dir>/model_fp32.bin.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Drop low-salience channels, then finetune
    Prune {
        #[arg(value_enum)]
        criterion: PruneCriterion,
        /// Input model; defaults to <out-dir>/model_cat.bin.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Classification metrics over repeated test passes
    Eval {
        /// Model to evaluate; defaults to <out-dir>/model_cat.bin.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Check a model against a named hardware profile
    DeployCheck {
        #[arg(long)]
        profile: String,
        /// Model to check; defaults to <out-dir>/model_cat.bin.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Alternative profile catalog file.
        #[arg(long)]
        profile_catalog: Option<PathBuf>,
    },
    /// Write the weight lookup table and its validation manifest
    ExportLut {
        /// Model to export; defaults to <out-dir>/model_cat.bin.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Alternative profile catalog file.
        #[arg(long)]
        profile_catalog: Option<PathBuf>,
    },
    /// One CSV row of deployment metrics per model
    ReportDr {
        #[arg(required = true)]
        models: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = match runs::RunContext::prepare(cli.config.as_deref(), cli.seed, &cli.out_dir) {
        Ok(ctx) => ctx,
        Err(e) => return report(e),
    };
    let result = match cli.cmd {
        Command::Train => runs::train(&ctx),
        Command::Compress { method, model } => runs::compress(&ctx, method, model.as_deref()),
        Command::Prune { criterion, model } => runs::prune(&ctx, criterion, model.as_deref()),
        Command::Eval { model } => runs::eval(&ctx, model.as_deref()),
        Command::DeployCheck { profile, model, profile_catalog } => {
            runs::deploy_check(&ctx, &profile, model.as_deref(), profile_catalog.as_deref())
        }
        Command::ExportLut { model, profile_catalog } => {
            runs::export_lut(&ctx, model.as_deref(), profile_catalog.as_deref())
        }
        Command::ReportDr { models } => runs::report_dr(&ctx, &models),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        CliError::Config(_) => ExitCode::from(2),
        CliError::Run(_) => ExitCode::from(1),
    }
}
