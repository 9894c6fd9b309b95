//! One function per subcommand. Every run reads its settings from the
//! prepared [`RunContext`], writes models and CSV logs under the output
//! directory, and prints a short summary.
//!
//! Wall-clock latency never enters the per-stage or eval CSVs; those stay
//! byte-reproducible for a fixed config and seed. `report-dr` is the one
//! command that measures time, and its output is machine-relative.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use spikepack_core::data::{make_synthetic, Dataset};
use spikepack_core::metrics::{energy_mj, validate_profile, DeployMetrics, EnergyModel};
use spikepack_core::prune::Criterion;
use spikepack_core::tape::SpikeMode;
use spikepack_core::train::{
    evaluate, evaluate_analog, input_rates, prune_model, saliency_scores, train_with, EpochStats,
    EvalReport, LayerPayload, SnnModel, TrainConfig,
};

use crate::config::{DatasetKind, PipelineConfig};
use crate::latency;
use crate::lut::{manifest_csv, LutFile};
use crate::modelfile::ModelFile;
use crate::profiles;
use crate::{CliError, CompressMethod, PruneCriterion};

pub struct RunContext {
    pub cfg: PipelineConfig,
    pub out_dir: PathBuf,
}

impl RunContext {
    pub fn prepare(
        config: Option<&Path>,
        seed: Option<u64>,
        out_dir: &Path,
    ) -> Result<RunContext, CliError> {
        let mut cfg = match config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        std::fs::create_dir_all(out_dir)
            .map_err(|e| CliError::Run(format!("cannot create {}: {e}", out_dir.display())))?;
        Ok(RunContext { cfg, out_dir: out_dir.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn datasets(&self) -> Result<(Dataset, Dataset), CliError> {
        match self.cfg.dataset.kind {
            DatasetKind::Synthetic => {
                Ok(make_synthetic(&self.cfg.dataset.synthetic_spec(), self.cfg.seed)?)
            }
            DatasetKind::Idx => {
                let d = &self.cfg.dataset;
                let train = crate::idx::load_dataset(
                    Path::new(&d.train_images),
                    Path::new(&d.train_labels),
                    d.classes,
                )?;
                let test = crate::idx::load_dataset(
                    Path::new(&d.test_images),
                    Path::new(&d.test_labels),
                    d.classes,
                )?;
                let have = &train.x.shape()[1..];
                if have != d.planes {
                    return Err(CliError::Config(format!(
                        "dataset.planes is {:?} but the image files hold {have:?}",
                        d.planes
                    )));
                }
                Ok((train, test))
            }
        }
    }

    fn load_model(
        &self,
        explicit: Option<&Path>,
        default_name: &str,
    ) -> Result<(ModelFile, PathBuf), CliError> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => self.path(default_name),
        };
        Ok((ModelFile::load(&path)?, path))
    }
}

/// Per-epoch rows for one or more stages, written once at the end.
struct StageLog {
    body: String,
}

impl StageLog {
    fn new() -> StageLog {
        StageLog {
            body: "stage,epoch,train_loss,task_loss,train_acc,max_distinct,refreshed_levels,\
                   test_acc,test_f1,test_loss\n"
                .into(),
        }
    }

    fn epoch(&mut self, stage: &str, s: &EpochStats, ev: &EvalReport) {
        let distinct = s.max_distinct.map(|d| d.to_string()).unwrap_or_default();
        let _ = writeln!(
            self.body,
            "{stage},{},{},{},{},{distinct},{},{},{},{}",
            s.epoch,
            s.mean_loss,
            s.task_loss,
            s.train_acc,
            s.refreshed_levels,
            ev.accuracy,
            ev.macro_f1,
            ev.mean_loss
        );
    }

    fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, &self.body)
            .map_err(|e| CliError::Run(format!("cannot write {}: {e}", path.display())))
    }
}

fn stage_err(stage: &str) -> impl Fn(spikepack_core::error::Error) -> CliError + '_ {
    move |e| CliError::Run(format!("{stage} stage: {e}"))
}

pub fn train(ctx: &RunContext) -> Result<(), CliError> {
    let (train_set, test_set) = ctx.datasets()?;
    let mut model = SnnModel::fresh(ctx.cfg.net_spec()?, ctx.cfg.seed)?;
    let stage = if ctx.cfg.train.qat_bits > 0 {
        model.set_qat(ctx.cfg.train.qat_bits).map_err(stage_err("qat"))?;
        "qat"
    } else {
        "fp32-train"
    };
    let cfg = ctx.cfg.train_config();
    let eval_bs = ctx.cfg.eval.batch_size;
    let mut log = StageLog::new();
    train_with(&mut model, &train_set, &cfg, |m, stats| {
        let ev = evaluate(m, &test_set, eval_bs, SpikeMode::Hard)?;
        log.epoch(stage, stats, &ev);
        Ok(())
    })
    .map_err(stage_err(stage))?;

    let ev = evaluate(&model, &test_set, eval_bs, SpikeMode::Hard)?;
    let out = if stage == "qat" { "model_qat.bin" } else { "model_fp32.bin" };
    ModelFile::new(model, ctx.cfg.hash(), stage).save(&ctx.path(out))?;
    log.save(&ctx.path("train_log.csv"))?;
    println!(
        "{stage}: {} epochs, test acc {:.4}, macro-f1 {:.4} -> {}",
        cfg.epochs,
        ev.accuracy,
        ev.macro_f1,
        ctx.path(out).display()
    );
    Ok(())
}

pub fn compress(
    ctx: &RunContext,
    method: CompressMethod,
    model_path: Option<&Path>,
) -> Result<(), CliError> {
    match method {
        CompressMethod::Cat => compress_cat(ctx, model_path),
        CompressMethod::Cluster => {
            if model_path.is_some() {
                return Err(CliError::Config(
                    "compress cluster pretrains from scratch and takes no --model".into(),
                ));
            }
            compress_cluster(ctx)
        }
        CompressMethod::Ternary => compress_ternary(ctx, model_path),
    }
}

fn compress_cat(ctx: &RunContext, model_path: Option<&Path>) -> Result<(), CliError> {
    let (file, _) = ctx.load_model(model_path, "model_fp32.bin")?;
    let (train_set, test_set) = ctx.datasets()?;
    let c = &ctx.cfg.compress;
    let mut model =
        file.model.to_cat(c.m, c.kmeans_iters, ctx.cfg.seed).map_err(stage_err("cat"))?;

    let cfg = ctx.cfg.compress_config();
    let eval_bs = ctx.cfg.eval.batch_size;
    let mut log = StageLog::new();
    let report = train_with(&mut model, &train_set, &cfg, |m, stats| {
        let ev = evaluate(m, &test_set, eval_bs, SpikeMode::Hard)?;
        log.epoch("cat", stats, &ev);
        Ok(())
    })
    .map_err(stage_err("cat"))?;

    let ev = evaluate(&model, &test_set, eval_bs, SpikeMode::Hard)?;
    file.derive(model, "cat").save(&ctx.path("model_cat.bin"))?;
    log.save(&ctx.path("compress_log.csv"))?;
    println!(
        "cat: M={}, worst distinct after any step {:?}, test acc {:.4} -> {}",
        c.m,
        report.max_step_distinct,
        ev.accuracy,
        ctx.path("model_cat.bin").display()
    );
    Ok(())
}

/// The conversion baseline: analog pretrain, analog fake-quant finetune,
/// per-layer clustering, a brief snapped finetune, then the weights run
/// as a spiking net. Each stage leaves a checkpoint.
fn compress_cluster(ctx: &RunContext) -> Result<(), CliError> {
    let (train_set, test_set) = ctx.datasets()?;
    let c = &ctx.cfg.compress;
    let eval_bs = ctx.cfg.eval.batch_size;
    let mut log = StageLog::new();

    let mut model = SnnModel::fresh(ctx.cfg.net_spec()?, ctx.cfg.seed)?;
    let pre_cfg = TrainConfig { analog: true, ..ctx.cfg.train_config() };
    train_with(&mut model, &train_set, &pre_cfg, |m, stats| {
        let ev = evaluate_analog(m, &test_set, eval_bs)?;
        log.epoch("analog-pretrain", stats, &ev);
        Ok(())
    })
    .map_err(stage_err("analog-pretrain"))?;
    let mut file = ModelFile::new(model.clone(), ctx.cfg.hash(), "analog-pretrain");
    file.save(&ctx.path("cluster_analog.bin"))?;

    model.set_qat(c.bits).map_err(stage_err("analog-qat"))?;
    let qat_cfg = TrainConfig { analog: true, ..ctx.cfg.compress_config() };
    train_with(&mut model, &train_set, &qat_cfg, |m, stats| {
        let ev = evaluate_analog(m, &test_set, eval_bs)?;
        log.epoch("analog-qat", stats, &ev);
        Ok(())
    })
    .map_err(stage_err("analog-qat"))?;
    file = file.derive(model.clone(), "analog-qat");
    file.save(&ctx.path("cluster_qat.bin"))?;

    let mut model = model
        .to_dense()
        .and_then(|m| m.to_cat(c.m, c.kmeans_iters, ctx.cfg.seed))
        .map_err(stage_err("cluster"))?;
    file = file.derive(model.clone(), "cluster");
    file.save(&ctx.path("cluster_snap.bin"))?;

    let brief = (c.epochs as f64 * c.quant_finetune_frac).round() as usize;
    let brief_cfg = TrainConfig {
        analog: true,
        commit_beta: 0.0,
        epochs: brief,
        ..ctx.cfg.compress_config()
    };
    train_with(&mut model, &train_set, &brief_cfg, |m, stats| {
        let ev = evaluate_analog(m, &test_set, eval_bs)?;
        log.epoch("cluster-finetune", stats, &ev);
        Ok(())
    })
    .map_err(stage_err("cluster-finetune"))?;

    let analog_ev = evaluate_analog(&model, &test_set, eval_bs)?;
    let snn_ev = evaluate(&model, &test_set, eval_bs, SpikeMode::Hard)?;
    file.derive(model, "cluster-finetune").save(&ctx.path("model_cluster.bin"))?;
    log.save(&ctx.path("compress_log.csv"))?;
    println!(
        "cluster: M={}, analog acc {:.4}, spiking acc {:.4} -> {}",
        c.m,
        analog_ev.accuracy,
        snn_ev.accuracy,
        ctx.path("model_cluster.bin").display()
    );
    Ok(())
}

fn compress_ternary(ctx: &RunContext, model_path: Option<&Path>) -> Result<(), CliError> {
    let (file, _) = ctx.load_model(model_path, "model_fp32.bin")?;
    let (train_set, test_set) = ctx.datasets()?;
    let mut model = file
        .model
        .to_ternary(ctx.cfg.compress.ternary_threshold)
        .map_err(stage_err("ternary"))?;

    let cfg = ctx.cfg.compress_config();
    let eval_bs = ctx.cfg.eval.batch_size;
    let mut log = StageLog::new();
    let report = train_with(&mut model, &train_set, &cfg, |m, stats| {
        let ev = evaluate(m, &test_set, eval_bs, SpikeMode::Hard)?;
        log.epoch("ternary", stats, &ev);
        Ok(())
    })
    .map_err(stage_err("ternary"))?;

    let ev = evaluate(&model, &test_set, eval_bs, SpikeMode::Hard)?;
    file.derive(model, "ternary").save(&ctx.path("model_ternary.bin"))?;
    log.save(&ctx.path("compress_log.csv"))?;
    println!(
        "ternary: worst distinct after any step {:?}, test acc {:.4} -> {}",
        report.max_step_distinct,
        ev.accuracy,
        ctx.path("model_ternary.bin").display()
    );
    Ok(())
}

pub fn prune(
    ctx: &RunContext,
    criterion: PruneCriterion,
    model_path: Option<&Path>,
) -> Result<(), CliError> {
    let (file, _) = ctx.load_model(model_path, "model_cat.bin")?;
    let (train_set, test_set) = ctx.datasets()?;
    let p = &ctx.cfg.prune;

    // Saliency comes from a fixed calibration slice of the training set.
    let batches = train_set.batches(p.batch_size, ctx.cfg.seed, 0);
    let take = p.calib_batches.clamp(1, batches.len());
    let mut indices = Vec::new();
    for b in &batches[..take] {
        indices.extend_from_slice(b);
    }
    let (x, y) = train_set.gather(&indices)?;
    let calib = Dataset { x, y, classes: train_set.classes };

    let (crit, stage) = match criterion {
        PruneCriterion::Fsc => (Criterion::Fsc, "fsc-prune"),
        PruneCriterion::Sca => (Criterion::Sca, "sca-prune"),
        PruneCriterion::Mag => (Criterion::Mag, "mag-prune"),
        PruneCriterion::Oracle => (Criterion::Oracle, "oracle-prune"),
    };
    let scores = saliency_scores(&file.model, &calib, p.batch_size, crit, SpikeMode::Hard)
        .map_err(stage_err(stage))?;
    let (mut model, report) = prune_model(&file.model, &scores, p.ratio).map_err(stage_err(stage))?;

    let mut report_csv = String::from("weighted_layer,channels_before,removed_count,removed\n");
    println!("{stage}: ratio {}", p.ratio);
    for l in &report.per_layer {
        let removed: Vec<String> = l.removed.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(
            report_csv,
            "{},{},{},{}",
            l.weighted_layer,
            l.channels_before,
            l.removed.len(),
            removed.join(";")
        );
        println!(
            "  layer {}: {} -> {} channels (removed {})",
            l.weighted_layer,
            l.channels_before,
            l.channels_before - l.removed.len(),
            removed.join(" ")
        );
    }
    let _ = writeln!(report_csv, "params,{},{},", report.params_before, report.params_after);
    println!("  parameters {} -> {}", report.params_before, report.params_after);
    std::fs::write(ctx.path("prune_report.csv"), &report_csv)
        .map_err(|e| CliError::Run(format!("cannot write prune_report.csv: {e}")))?;

    let file = file.derive(model.clone(), stage);
    file.save(&ctx.path("model_pruned_raw.bin"))?;

    let cfg = ctx.cfg.finetune_config();
    let eval_bs = ctx.cfg.eval.batch_size;
    let mut log = StageLog::new();
    train_with(&mut model, &train_set, &cfg, |m, stats| {
        let ev = evaluate(m, &test_set, eval_bs, SpikeMode::Hard)?;
        log.epoch("finetune", stats, &ev);
        Ok(())
    })
    .map_err(stage_err("finetune"))?;

    let ev = evaluate(&model, &test_set, eval_bs, SpikeMode::Hard)?;
    file.derive(model, "finetune").save(&ctx.path("model_pruned.bin"))?;
    log.save(&ctx.path("prune_log.csv"))?;
    println!(
        "finetune: test acc {:.4}, macro-f1 {:.4} -> {}",
        ev.accuracy,
        ev.macro_f1,
        ctx.path("model_pruned.bin").display()
    );
    Ok(())
}

pub fn eval(ctx: &RunContext, model_path: Option<&Path>) -> Result<(), CliError> {
    let (file, from) = ctx.load_model(model_path, "model_cat.bin")?;
    let (_, test_set) = ctx.datasets()?;
    let e = &ctx.cfg.eval;

    let mut accs = Vec::new();
    let mut f1s = Vec::new();
    let mut losses = Vec::new();
    let mut last = None;
    for r in 0..e.repeats {
        // Repeats differ only in evaluation order.
        let order = &test_set.batches(test_set.len(), ctx.cfg.seed, r as u64)[0];
        let (x, y) = test_set.gather(order)?;
        let shuffled = Dataset { x, y, classes: test_set.classes };
        let ev = evaluate(&file.model, &shuffled, e.batch_size, SpikeMode::Hard)?;
        accs.push(ev.accuracy);
        f1s.push(ev.macro_f1);
        losses.push(ev.mean_loss);
        last = Some(ev);
    }
    let ev = last.expect("repeats >= 1");

    let rates = input_rates(&ev.spike_rates, file.model.net.weighted_layers().len());
    let energy =
        energy_mj(&file.model.net, &rates, &EnergyModel::default(), file.model.net.lif.t_steps)?;
    let size = file.model.size_mb(e.size_mode.to_core());
    let rate_list: Vec<String> = ev.spike_rates.iter().map(|r| r.to_string()).collect();

    let name = from.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut csv = String::from(
        "model,repeats,acc_mean,acc_std,f1_mean,f1_std,loss_mean,loss_std,\
         spike_rates,params,size_mb,energy_mj\n",
    );
    let _ = writeln!(
        csv,
        "{name},{},{},{},{},{},{},{},{},{},{},{}",
        e.repeats,
        mean(&accs),
        std_dev(&accs),
        mean(&f1s),
        std_dev(&f1s),
        mean(&losses),
        std_dev(&losses),
        rate_list.join(";"),
        file.model.param_count(),
        size,
        energy
    );
    std::fs::write(ctx.path("eval.csv"), &csv)
        .map_err(|er| CliError::Run(format!("cannot write eval.csv: {er}")))?;

    println!("eval {name} over {} repeats:", e.repeats);
    println!("  accuracy  {:.4} +/- {:.4}", mean(&accs), std_dev(&accs));
    println!("  macro-f1  {:.4} +/- {:.4}", mean(&f1s), std_dev(&f1s));
    println!("  loss      {:.4} +/- {:.4}", mean(&losses), std_dev(&losses));
    println!("  spike rates {}", rate_list.join(" "));
    println!("  {} params, {:.4} MB, {:.6} mJ/inference", file.model.param_count(), size, energy);
    Ok(())
}

pub fn deploy_check(
    ctx: &RunContext,
    profile_name: &str,
    model_path: Option<&Path>,
    catalog_path: Option<&Path>,
) -> Result<(), CliError> {
    let catalog = profiles::load_catalog(catalog_path)?;
    let profile = profiles::find(&catalog, profile_name)?;
    let (file, from) = ctx.load_model(model_path, "model_cat.bin")?;
    let facts = file.model.layer_facts()?;
    let report = validate_profile(&facts, profile);

    println!("{} against {}:", from.display(), profile.name);
    for c in &report.checks {
        println!(
            "  {:<28} measured {:>12} bound {:>12} {}",
            c.name,
            c.measured,
            c.bound,
            if c.passed { "pass" } else { "FAIL" }
        );
    }
    if report.passed() {
        println!("profile {}: pass", profile.name);
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        Err(CliError::Run(format!("profile {}: {failed} checks failed", profile.name)))
    }
}

pub fn export_lut(
    ctx: &RunContext,
    model_path: Option<&Path>,
    catalog_path: Option<&Path>,
) -> Result<(), CliError> {
    let (mut file, _) = ctx.load_model(model_path, "model_cat.bin")?;
    let needs_quant = file.model.payloads.iter().any(
        |p| matches!(p, LayerPayload::Cat { codebook, .. } if codebook.quant.is_none()),
    );
    if needs_quant {
        let mut model = file.model.clone();
        let c = &ctx.cfg.compress;
        model.quantize_codebooks(c.bits, c.quant_mode.to_core())
            .map_err(stage_err("quantize-codebook"))?;
        file = file.derive(model, "quantize-codebook");
        file.save(&ctx.path("model_quantized.bin"))?;
        println!(
            "quantize-codebook: b={} -> {}",
            c.bits,
            ctx.path("model_quantized.bin").display()
        );
    }

    let lut = LutFile::from_model(&file.model)?;
    lut.save(&ctx.path("model.lut"))?;
    let catalog = profiles::load_catalog(catalog_path)?;
    let manifest = manifest_csv(&file.model, &catalog)?;
    std::fs::write(ctx.path("lut_manifest.csv"), &manifest)
        .map_err(|e| CliError::Run(format!("cannot write lut_manifest.csv: {e}")))?;

    let facts = file.model.layer_facts()?;
    for profile in &catalog {
        let ok = validate_profile(&facts, profile).passed();
        println!("  {}: {}", profile.name, if ok { "pass" } else { "FAIL" });
    }
    println!(
        "export: {} layers -> {} plus {}",
        lut.layers.len(),
        ctx.path("model.lut").display(),
        ctx.path("lut_manifest.csv").display()
    );
    Ok(())
}

pub fn report_dr(ctx: &RunContext, models: &[PathBuf]) -> Result<(), CliError> {
    let (_, test_set) = ctx.datasets()?;
    let e = &ctx.cfg.eval;
    let mut csv =
        String::from("model,perf_acc,perf_f1,latency_s,energy_mj,size_mb,dr_acc,dr_f1\n");
    println!("deployment report (latency is host wall clock; ratios are machine-relative):");
    for path in models {
        let file = ModelFile::load(path)?;
        let ev = evaluate(&file.model, &test_set, e.batch_size, SpikeMode::Hard)?;
        let rates = input_rates(&ev.spike_rates, file.model.net.weighted_layers().len());
        let energy = energy_mj(
            &file.model.net,
            &rates,
            &EnergyModel::default(),
            file.model.net.lif.t_steps,
        )?;
        let size = file.model.size_mb(e.size_mode.to_core());
        let lat = latency::round_sig3(latency::latency_s(
            &file.model,
            &test_set,
            e.latency_batches,
            e.batch_size,
        )?);
        let dm = DeployMetrics::new(ev.accuracy, ev.macro_f1, lat, energy, size)?;
        let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{name},{},{},{},{},{},{},{}",
            dm.perf_acc, dm.perf_f1, dm.latency_s, dm.energy_mj, dm.size_mb, dm.dr_acc, dm.dr_f1
        );
        println!(
            "  {name}: acc {:.4}, L {:.3e} s, E {:.3e} mJ, S {:.4} MB, DR(acc) {:.4}",
            dm.perf_acc, dm.latency_s, dm.energy_mj, dm.size_mb, dm.dr_acc
        );
    }
    std::fs::write(ctx.path("report_dr.csv"), &csv)
        .map_err(|er| CliError::Run(format!("cannot write report_dr.csv: {er}")))?;
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}
