//! Drives the installed binary end to end against throwaway directories.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spikepack_cli::modelfile::ModelFile;
use spikepack_core::train::SnnModel;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_spikepack")
}

const TINY: &str = "\
seed = 11

[dataset]
classes = 3
planes = [2, 8, 8]
per_class_train = 12
per_class_test = 8

[arch]
conv_channels = [4]
kernel = 3

[train]
epochs = 2
batch_size = 12
lr = 0.02

[compress]
m = 4
epochs = 2
batch_size = 12

[prune]
ratio = 0.3
epochs = 1
batch_size = 12

[eval]
repeats = 2
batch_size = 12
latency_batches = 1
";

fn run(cfg: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .arg("--config")
        .arg(cfg)
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("no signal")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_cfg(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn pipeline_writes_models_logs_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), TINY);
    let out = tmp.path().join("out");

    for args in [
        vec!["train"],
        vec!["compress", "cat"],
        vec!["prune", "fsc"],
        vec!["export-lut"],
        vec!["eval"],
    ] {
        let o = run(&cfg, &out, &args.iter().map(|s| &**s).collect::<Vec<_>>());
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
    }
    for name in [
        "model_fp32.bin",
        "model_cat.bin",
        "model_pruned_raw.bin",
        "model_pruned.bin",
        "model_quantized.bin",
        "model.lut",
        "train_log.csv",
        "compress_log.csv",
        "prune_report.csv",
        "prune_log.csv",
        "lut_manifest.csv",
        "eval.csv",
    ] {
        assert!(out.join(name).exists(), "missing {name}");
    }

    let o = run(
        &cfg,
        &out,
        &["deploy-check", "--profile", "truenorth-like", "--model", "out/model_quantized.bin"],
    );
    // --model is relative to the test cwd, so hand it the absolute path.
    assert_eq!(code(&o), 1);
    let quant = out.join("model_quantized.bin");
    let o = run(
        &cfg,
        &out,
        &["deploy-check", "--profile", "truenorth-like", "--model", quant.to_str().unwrap()],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let fp32 = out.join("model_fp32.bin");
    let o = run(&cfg, &out, &["report-dr", fp32.to_str().unwrap(), quant.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dr = std::fs::read_to_string(out.join("report_dr.csv")).unwrap();
    assert_eq!(dr.lines().count(), 3, "header plus one row per model:\n{dr}");
    assert!(dr.starts_with("model,perf_acc,perf_f1,latency_s,energy_mj,size_mb,dr_acc,dr_f1"));

    let eval = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    // Same model and data every repeat: the spread collapses to zero.
    let row: Vec<&str> = eval.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[3], "0");
    assert_eq!(row[5], "0");
}

#[test]
fn unknown_config_keys_and_bad_values_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");

    let cfg = write_cfg(tmp.path(), &format!("{TINY}\n[typo_section]\nx = 1\n"));
    let o = run(&cfg, &out, &["train"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("typo_section"), "{}", stderr(&o));

    let cfg = write_cfg(tmp.path(), &TINY.replace("kernel = 3", "kernel = 4"));
    let o = run(&cfg, &out, &["train"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("kernel"), "{}", stderr(&o));

    let o = run(Path::new("/nonexistent/cfg.toml"), &out, &["train"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn usage_and_run_failures_split_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), TINY);
    let out = tmp.path().join("out");

    let o = Command::new(bin()).arg("frobnicate").output().unwrap();
    assert_eq!(code(&o), 2);

    // Nothing trained yet: eval has no model to load.
    let o = run(&cfg, &out, &["eval"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("model_cat.bin"), "{}", stderr(&o));

    let o = run(&cfg, &out, &["deploy-check", "--profile", "no-such-chip"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no-such-chip"), "{}", stderr(&o));

    let o = run(&cfg, &out, &["compress", "cluster", "--model", "whatever.bin"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn zero_epoch_training_leaves_the_fresh_model_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), &TINY.replace("epochs = 2", "epochs = 0"));
    let out = tmp.path().join("out");
    let o = run(&cfg, &out, &["train"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1, "header only:\n{log}");

    let loaded = ModelFile::load(&out.join("model_fp32.bin")).unwrap();
    let pipeline = spikepack_cli::config::PipelineConfig::load(&cfg).unwrap();
    let fresh = SnnModel::fresh(pipeline.net_spec().unwrap(), pipeline.seed).unwrap();
    assert_eq!(
        loaded.model.effective_weights().unwrap(),
        fresh.effective_weights().unwrap()
    );
}

#[test]
fn ternary_stage_refuses_a_codebook_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), TINY);
    let out = tmp.path().join("out");
    assert_eq!(code(&run(&cfg, &out, &["train"])), 0);
    assert_eq!(code(&run(&cfg, &out, &["compress", "cat"])), 0);

    let cat = out.join("model_cat.bin");
    let o = run(&cfg, &out, &["compress", "ternary", "--model", cat.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let msg = stderr(&o);
    assert!(msg.contains("ternary") && msg.contains("dense"), "{msg}");
}

#[test]
fn idx_datasets_train_and_shape_mismatches_are_caught() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");

    // Two 4x4 single-plane images per class, three classes.
    let n = 6u32;
    let (h, w) = (4u32, 4u32);
    let mut images = Vec::new();
    images.extend(0x0000_0803u32.to_be_bytes());
    images.extend(n.to_be_bytes());
    images.extend(h.to_be_bytes());
    images.extend(w.to_be_bytes());
    for i in 0..n {
        for p in 0..(h * w) {
            images.push(((i * 40 + p * 3) % 256) as u8);
        }
    }
    let mut labels = Vec::new();
    labels.extend(0x0000_0801u32.to_be_bytes());
    labels.extend(n.to_be_bytes());
    labels.extend([0u8, 1, 2, 0, 1, 2]);
    std::fs::write(tmp.path().join("imgs.idx"), &images).unwrap();
    std::fs::write(tmp.path().join("labels.idx"), &labels).unwrap();

    let body = format!(
        "seed = 3\n\n[dataset]\nkind = \"idx\"\nclasses = 3\nplanes = [1, 4, 4]\n\
         train_images = {0:?}\ntrain_labels = {1:?}\ntest_images = {0:?}\ntest_labels = {1:?}\n\n\
         [arch]\nconv_channels = [2]\n\n[train]\nepochs = 1\nbatch_size = 6\n\n\
         [eval]\nbatch_size = 6\nlatency_batches = 1\n",
        tmp.path().join("imgs.idx").to_str().unwrap(),
        tmp.path().join("labels.idx").to_str().unwrap(),
    );
    let cfg = write_cfg(tmp.path(), &body);
    let o = run(&cfg, &out, &["train"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let cfg = write_cfg(tmp.path(), &body.replace("planes = [1, 4, 4]", "planes = [1, 8, 8]"));
    let o = run(&cfg, &out, &["train"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("planes"), "{}", stderr(&o));
}
