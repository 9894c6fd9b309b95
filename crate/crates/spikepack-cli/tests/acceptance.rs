//! Release gates. One test per acceptance criterion; each prints a
//! single verdict line with its measured margin. The heavy ones train
//! real models on one core, so this target is the slow half of the
//! suite.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use spikepack_cli::lut::LutFile;
use spikepack_cli::profiles;
use spikepack_core::codebook::{self, Codebook, QuantMode};
use spikepack_core::data::{make_synthetic, Dataset, SyntheticSpec};
use spikepack_core::kmeans::kmeans_1d;
use spikepack_core::lif::encode_replicate;
use spikepack_core::metrics::{deploy_ratio, spearman, validate_profile};
use spikepack_core::model::NetSpec;
use spikepack_core::prune::{self, Criterion, LayerPrune};
use spikepack_core::rng::{stream, Stream};
use spikepack_core::tape::{grad_check_at, SpikeMode, Tape};
use spikepack_core::tensor::Tensor;
use spikepack_core::train::{
    evaluate, prune_model, saliency_scores, train_with, SnnModel, TrainConfig,
};
use spikepack_core::unroll;

fn desk_net() -> NetSpec {
    NetSpec::desk((3, 12, 12), 16, 32, 3)
}

fn desk_data(seed: u64) -> (Dataset, Dataset) {
    make_synthetic(&SyntheticSpec::default(), seed).unwrap()
}

/// Hard-mode logits of one input batch, replicated over time.
fn logits_of(net: &NetSpec, weights: &[Tensor], x: &Tensor) -> Vec<f64> {
    let x_seq = encode_replicate(x, net.lif.t_steps).unwrap();
    let mut tape = Tape::new();
    let ids: Vec<_> = weights.iter().map(|w| tape.constant(w.clone())).collect();
    let un = unroll::unroll(&mut tape, net, &ids, &x_seq, SpikeMode::Hard).unwrap();
    tape.value(un.logits).to_vec()
}

#[test]
fn criterion_01_surrogate_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let net = desk_net();
    let shapes = net.weight_shapes().unwrap();
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let in_elems = 3 * 12 * 12;

    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let weights = net.init_weights(seed).unwrap();
        let flat: Vec<f64> = weights.iter().flat_map(|t| t.data().iter().copied()).collect();
        let theta = Tensor::new(vec![total], flat).unwrap();

        let mut drng = stream(seed, Stream::DataTrain);
        let x_data: Vec<f64> = (0..2 * in_elems).map(|_| drng.random::<f64>()).collect();
        let x = Tensor::new(vec![2, 3, 12, 12], x_data).unwrap();
        let x_seq = encode_replicate(&x, net.lif.t_steps).unwrap();
        let targets = vec![drng.random_range(0..3), drng.random_range(0..3)];

        // One backward covers every coordinate; the finite differences
        // sample a fixed fraction of them.
        let mut crng = stream(seed, Stream::GradCheck);
        let mut coords: Vec<usize> = (0..32).map(|_| crng.random_range(0..total)).collect();
        coords.sort_unstable();
        coords.dedup();

        let report = grad_check_at(
            |tape, id| {
                let ws = unroll::slice_weights(tape, id, &shapes)?;
                let un = unroll::unroll(tape, &net, &ws, &x_seq, SpikeMode::Smooth)?;
                tape.softmax_xent(un.logits, &targets)
            },
            &theta,
            &coords,
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(
            report.pass,
            "seed {seed}: rel err {} at flat coordinate {}",
            report.max_rel_err, report.worst_index
        );
        worst = worst.max(report.max_rel_err);
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 60.0, "took {secs:.1}s, budget is one minute");
    println!("criterion 01: PASS  worst rel err {worst:.2e} over 20 seeds, {secs:.1}s");
}

#[test]
fn criterion_02_codebook_stays_within_hardware_cardinality() {
    let (train_set, _) = desk_data(7);
    let mut model = SnnModel::fresh(desk_net(), 7).unwrap();
    let warm = TrainConfig { epochs: 3, batch_size: 64, seed: 7, ..TrainConfig::default() };
    train_with(&mut model, &train_set, &warm, |_, _| Ok(())).unwrap();

    let mut model = model.to_cat(4, 50, 7).unwrap();
    let cat_cfg = TrainConfig { epochs: 3, batch_size: 64, lr: 1e-4, seed: 7, ..TrainConfig::default() };
    let report = train_with(&mut model, &train_set, &cat_cfg, |_, stats| {
        let d = stats.max_distinct.expect("codebook layers report distinct counts");
        assert!(d <= 4, "epoch {}: {d} distinct effective values", stats.epoch);
        Ok(())
    })
    .unwrap();
    let step_worst = report.max_step_distinct.unwrap();
    assert!(step_worst <= 4, "some step left {step_worst} distinct values");

    model.quantize_codebooks(8, QuantMode::UnitFloor).unwrap();
    let lut = LutFile::from_model(&model).unwrap();
    assert_eq!(lut.layers.len(), model.payloads.len());
    let eff = model.effective_weights().unwrap();
    for (l, layer) in lut.layers.iter().enumerate() {
        assert!(layer.q_levels.len() <= 4);
        let back = layer.effective_weights().unwrap();
        let drift = back
            .data()
            .iter()
            .zip(eff[l].data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert_eq!(drift, 0.0, "layer {l}: lookup table loses {drift}");
    }

    let catalog = profiles::load_catalog(None).unwrap();
    let tn = profiles::find(&catalog, "truenorth-like").unwrap();
    let facts = model.layer_facts().unwrap();
    let check = validate_profile(&facts, tn);
    assert!(check.passed(), "{check:?}");
    println!(
        "criterion 02: PASS  worst step distinct {step_worst} <= 4, 8-bit export fits {}",
        tn.name
    );
}

#[test]
fn criterion_03_commitment_pulls_levels_to_cluster_means() {
    let mut r = stream(3, Stream::Other(0xc0));
    let mut latent = Vec::with_capacity(100);
    for _ in 0..50 {
        latent.push(-1.0 + 0.05 * spikepack_core::rng::normal(&mut r));
    }
    for _ in 0..50 {
        latent.push(1.0 + 0.05 * spikepack_core::rng::normal(&mut r));
    }
    let latent_t = Tensor::new(vec![100], latent.clone()).unwrap();
    let mean_of = |side: &[f64]| side.iter().sum::<f64>() / side.len() as f64;
    let lo_mean = mean_of(&latent[..50]);
    let hi_mean = mean_of(&latent[50..]);

    // Plain gradient descent on the commitment term alone, latents
    // frozen. Levels start well inside the gap so neither begins at its
    // target.
    let mut levels = vec![-0.1, 0.1];
    for _ in 0..200 {
        let (assignment, _) = codebook::assign(&latent, &levels);
        let mut tape = Tape::new();
        let lev_id = tape.input(Tensor::new(vec![2], levels.clone()).unwrap());
        let w_q = tape.gather1d(lev_id, &assignment).unwrap();
        let commit = codebook::commitment_loss(&mut tape, w_q, &latent_t).unwrap();
        let loss = tape.scale(commit, 0.5);
        tape.backward(loss).unwrap();
        let g = tape.grad(lev_id).to_vec();
        for (c, gc) in levels.iter_mut().zip(&g) {
            *c -= gc;
        }
    }

    let (assignment, _) = codebook::assign(&latent, &levels);
    assert!(assignment[..50].iter().all(|&k| k == 0));
    assert!(assignment[50..].iter().all(|&k| k == 1));
    let res = (levels[0] - lo_mean).abs().max((levels[1] - hi_mean).abs());
    assert!(res <= 1e-3, "levels {levels:?} vs means [{lo_mean}, {hi_mean}]");
    println!("criterion 03: PASS  both levels within {res:.2e} of their cluster means");
}

#[test]
fn criterion_04_codebook_quantizer_hand_values_and_error_bound() {
    let hand: [(&[f64], u32, f64, &[i32]); 3] = [
        (&[0.0, 1.0], 8, 1.0, &[0, 1]),
        // round(-0.5) moves away from zero: the half-step case.
        (&[-2.0, 2.0], 2, 4.0, &[-1, 1]),
        (&[-0.5, 0.25], 8, 1.0, &[-1, 0]),
    ];
    for (levels, bits, scale, want) in hand {
        let mut cb = Codebook::new(levels.to_vec()).unwrap();
        cb.quantize(bits, QuantMode::UnitFloor).unwrap();
        let q = cb.quant.as_ref().unwrap();
        assert_eq!(q.scale, scale);
        assert_eq!(q.q_levels, want);
    }
    // Reconstruction snaps to the nearest surviving level.
    let mut cb = Codebook::new(vec![0.0, 1.0]).unwrap();
    cb.quantize(8, QuantMode::UnitFloor).unwrap();
    assert_eq!(cb.reconstruct(&[0.9]).unwrap().1, vec![1.0]);

    let mut rng = stream(4, Stream::Other(0x9b));
    let bits_cycle = [2u32, 4, 8];
    let mut in_range = 0usize;
    for case in 0..1000 {
        let m = rng.random_range(2..=8);
        let levels: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let bits = bits_cycle[case % 3];
        let mode = if case % 2 == 0 { QuantMode::UnitFloor } else { QuantMode::ResolutionPreserving };
        let mut cb = Codebook::new(levels.clone()).unwrap();
        cb.quantize(bits, mode).unwrap();
        let q = cb.quant.as_ref().unwrap();
        let r = ((1u32 << (bits - 1)) - 1) as f64;
        for (k, &c) in levels.iter().enumerate() {
            if (c / q.scale).round().abs() > r {
                continue; // clipped: the bound only covers the grid interior
            }
            in_range += 1;
            let err = (c - q.scale * q.q_levels[k] as f64).abs();
            assert!(
                err <= 0.5 * q.scale * (1.0 + 1e-12),
                "case {case} level {k}: |{c} - {} * {}| = {err} > s/2",
                q.scale,
                q.q_levels[k]
            );
        }
    }
    println!("criterion 04: PASS  3 hand cases bit-exact, s/2 bound on {in_range} in-range levels");
}

#[test]
fn criterion_05_gradient_weighted_saliency_tracks_channel_ablation() {
    let t0 = Instant::now();
    let spec = SyntheticSpec { per_class_train: 200, per_class_test: 1, ..SyntheticSpec::default() };
    let (train_set, _) = make_synthetic(&spec, 42).unwrap();
    let mut model = SnnModel::fresh(desk_net(), 42).unwrap();
    let cfg = TrainConfig { epochs: 10, batch_size: 64, seed: 42, ..TrainConfig::default() };
    train_with(&mut model, &train_set, &cfg, |_, _| Ok(())).unwrap();

    let fsc = saliency_scores(&model, &train_set, 64, Criterion::Fsc, SpikeMode::Hard).unwrap();
    let sca = saliency_scores(&model, &train_set, 64, Criterion::Sca, SpikeMode::Hard).unwrap();
    let oracle = saliency_scores(&model, &train_set, 64, Criterion::Oracle, SpikeMode::Hard).unwrap();

    let mut beats = 0;
    let mut line = String::new();
    for l in 0..fsc.len() {
        let rho_f = spearman(&fsc[l], &oracle[l]).unwrap();
        let rho_s = spearman(&sca[l], &oracle[l]).unwrap();
        assert!(rho_f >= 0.8, "layer {l}: gradient-weighted rank corr {rho_f:.3} < 0.8");
        if rho_f > rho_s {
            beats += 1;
        }
        line.push_str(&format!("  layer {l}: {rho_f:.3} vs activity {rho_s:.3}"));
    }
    assert!(beats >= 1, "activity count matched ablation at least as well on every layer");
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 600.0, "took {secs:.1}s, budget is ten minutes");
    println!("criterion 05: PASS {line}, {secs:.1}s");
}

#[test]
fn criterion_06_pruned_and_masked_networks_agree() {
    let net = desk_net();
    let in_elems = 3 * 12 * 12;
    let mut rng = stream(6, Stream::Other(0x6c));
    let x_data: Vec<f64> = (0..100 * in_elems).map(|_| rng.random::<f64>()).collect();
    let x = Tensor::new(vec![100, 3, 12, 12], x_data).unwrap();

    // Dense payloads and codebook payloads both have to survive surgery
    // with bit-identical logits.
    let dense = SnnModel::fresh(net.clone(), 11).unwrap();
    let cat = dense.to_cat(4, 50, 11).unwrap();
    let mut worst = 0.0f64;
    for model in [dense, cat] {
        let weights = model.effective_weights().unwrap();
        let scores: Vec<Vec<f64>> = model
            .net
            .spiking_weighted_layers()
            .iter()
            .map(|&l| prune::magnitude_scores(&weights[l]).unwrap())
            .collect();
        let (pruned, report) = prune_model(&model, &scores, 0.3).unwrap();
        let plan: Vec<LayerPrune> = report
            .per_layer
            .iter()
            .map(|s| LayerPrune { weighted_layer: s.weighted_layer, removed: s.removed.clone() })
            .collect();
        let masked = prune::mask_channels(&model.net, &weights, &plan).unwrap();

        let a = logits_of(&model.net, &masked, &x);
        let b = logits_of(&pruned.net, &pruned.effective_weights().unwrap(), &x);
        for (ya, yb) in a.iter().zip(&b) {
            let d = (ya - yb).abs();
            assert!(d <= 1e-12, "masked {ya} vs pruned {yb}");
            worst = worst.max(d);
        }
    }
    println!("criterion 06: PASS  worst logit gap {worst:.1e} over 100 inputs, dense and codebook");
}

#[test]
fn criterion_07_codebook_seeding_matches_exhaustive_clustering() {
    fn exhaustive_inertia(points: &[f64], m: usize) -> f64 {
        fn run_cost(g: &[f64]) -> f64 {
            let mean = g.iter().sum::<f64>() / g.len() as f64;
            g.iter().map(|x| (x - mean) * (x - mean)).sum()
        }
        // Optimal 1-d clusters are contiguous in sorted order, so trying
        // every split point is a complete search.
        fn best(points: &[f64], m: usize) -> f64 {
            if m == 1 {
                return run_cost(points);
            }
            let mut lowest = f64::INFINITY;
            for cut in 1..=(points.len() - (m - 1)) {
                let c = run_cost(&points[..cut]) + best(&points[cut..], m - 1);
                if c < lowest {
                    lowest = c;
                }
            }
            lowest
        }
        let mut sorted = points.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        best(&sorted, m)
    }

    let mut rng = stream(7, Stream::Other(0x7a));
    let mut checked = 0;
    let mut gap = 0.0f64;
    for _ in 0..400 {
        let n = rng.random_range(1..=12);
        let m = rng.random_range(1..=3usize.min(n));
        let points: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut distinct = points.clone();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        if distinct.len() < m {
            continue;
        }
        let got = kmeans_1d(&points, m, 50, 0).unwrap();
        let want = exhaustive_inertia(&points, m);
        let d = (got.inertia - want).abs();
        assert!(d <= 1e-9, "n={n} m={m}: inertia {} vs exhaustive {want}", got.inertia);
        gap = gap.max(d);
        checked += 1;
    }
    println!("criterion 07: PASS  {checked} exhaustive cases, worst inertia gap {gap:.1e}");
}

#[test]
fn criterion_08_compression_pipeline_holds_accuracy() {
    let seed = 42;
    let (train_set, test_set) = desk_data(seed);

    let t0 = Instant::now();
    let mut fp32 = SnnModel::fresh(desk_net(), seed).unwrap();
    let base_cfg = TrainConfig { epochs: 30, batch_size: 64, seed, ..TrainConfig::default() };
    train_with(&mut fp32, &train_set, &base_cfg, |_, _| Ok(())).unwrap();
    let fp32_secs = t0.elapsed().as_secs_f64();
    let acc_fp32 = evaluate(&fp32, &test_set, 64, SpikeMode::Hard).unwrap().accuracy;
    assert!(acc_fp32 >= 0.90, "full-precision accuracy {acc_fp32:.4}");
    assert!(fp32_secs < 300.0, "training took {fp32_secs:.1}s, budget is five minutes");

    let cat_cfg = TrainConfig { epochs: 15, batch_size: 64, lr: 1e-4, seed, ..TrainConfig::default() };
    let mut acc_cat = [0.0; 2];
    for (i, m) in [4, 2].into_iter().enumerate() {
        let mut cat = fp32.to_cat(m, 50, seed).unwrap();
        train_with(&mut cat, &train_set, &cat_cfg, |_, _| Ok(())).unwrap();
        acc_cat[i] = evaluate(&cat, &test_set, 64, SpikeMode::Hard).unwrap().accuracy;
    }
    let [acc_m4, acc_m2] = acc_cat;
    assert!(acc_m4 >= acc_fp32 - 0.05, "4 levels: {acc_m4:.4} vs full precision {acc_fp32:.4}");
    assert!(acc_m4 >= acc_m2, "4 levels ({acc_m4:.4}) under 2 levels ({acc_m2:.4})");

    // Rebuild the better codebook model and prune it the way the
    // pipeline does: saliency on a short calibration slice.
    let mut cat4 = fp32.to_cat(4, 50, seed).unwrap();
    train_with(&mut cat4, &train_set, &cat_cfg, |_, _| Ok(())).unwrap();
    let batches = train_set.batches(64, seed, 0);
    let mut indices = Vec::new();
    for b in &batches[..3.min(batches.len())] {
        indices.extend_from_slice(b);
    }
    let (x, y) = train_set.gather(&indices).unwrap();
    let calib = Dataset { x, y, classes: train_set.classes };
    let scores = saliency_scores(&cat4, &calib, 64, Criterion::Fsc, SpikeMode::Hard).unwrap();
    let (mut pruned, _) = prune_model(&cat4, &scores, 0.3).unwrap();
    let tune_cfg = TrainConfig { epochs: 15, batch_size: 64, lr: 1e-3, seed, ..TrainConfig::default() };
    train_with(&mut pruned, &train_set, &tune_cfg, |_, _| Ok(())).unwrap();
    let acc_pruned = evaluate(&pruned, &test_set, 64, SpikeMode::Hard).unwrap().accuracy;
    let acc_cat4 = evaluate(&cat4, &test_set, 64, SpikeMode::Hard).unwrap().accuracy;
    assert!(acc_pruned >= acc_cat4 - 0.05, "pruned {acc_pruned:.4} vs pre-prune {acc_cat4:.4}");

    println!(
        "criterion 08: PASS  fp32 {acc_fp32:.3} in {fp32_secs:.0}s, 4-level {acc_m4:.3} >= 2-level {acc_m2:.3}, pruned {acc_pruned:.3}"
    );
}

#[test]
fn criterion_09_ternary_baseline_stays_three_valued_and_learns() {
    let seed = 9;
    let (train_set, test_set) = desk_data(seed);
    let mut model = SnnModel::fresh(desk_net(), seed).unwrap();
    let warm = TrainConfig { epochs: 10, batch_size: 64, seed, ..TrainConfig::default() };
    train_with(&mut model, &train_set, &warm, |_, _| Ok(())).unwrap();

    let mut model = model.to_ternary(0.05).unwrap();
    for (l, p) in model.payloads.iter().enumerate() {
        assert!(p.distinct_effective().unwrap() <= 3, "layer {l} after conversion");
    }
    let cfg = TrainConfig { epochs: 5, batch_size: 64, lr: 1e-3, seed, ..TrainConfig::default() };
    let report = train_with(&mut model, &train_set, &cfg, |_, stats| {
        let d = stats.max_distinct.expect("ternary layers report distinct counts");
        assert!(d <= 3, "epoch {}: {d} distinct effective values", stats.epoch);
        Ok(())
    })
    .unwrap();
    let step_worst = report.max_step_distinct.unwrap();
    assert!(step_worst <= 3, "some step left {step_worst} distinct values");
    for (l, p) in model.payloads.iter().enumerate() {
        assert!(p.distinct_effective().unwrap() <= 3, "layer {l} after training");
    }

    let acc = evaluate(&model, &test_set, 64, SpikeMode::Hard).unwrap().accuracy;
    assert!(acc > 1.0 / 3.0, "accuracy {acc:.4} is no better than guessing");
    println!("criterion 09: PASS  never over {step_worst} values per layer, test acc {acc:.3}");
}

#[test]
fn criterion_10_deploy_ratio_identity_and_monotonicity() {
    assert_eq!(deploy_ratio(0.9, 0.1, 0.5, 2.0).unwrap(), 9.0);

    let mut rng = stream(10, Stream::Other(0xd2));
    for trial in 0..1000 {
        let perf = rng.random_range(0.05..1.0);
        let lat = rng.random_range(0.01..10.0);
        let energy = rng.random_range(0.01..10.0);
        let size = rng.random_range(0.01..10.0);
        let base = deploy_ratio(perf, lat, energy, size).unwrap();
        let direct = perf / (lat * energy * size);
        assert!(
            (base - direct).abs() <= 1e-12 * direct.abs(),
            "trial {trial}: {base} vs quotient {direct}"
        );

        // Worsening exactly one component must lower the score.
        let f = rng.random_range(1.01..2.0);
        let worse = match trial % 4 {
            0 => deploy_ratio(perf / f, lat, energy, size),
            1 => deploy_ratio(perf, lat * f, energy, size),
            2 => deploy_ratio(perf, lat, energy * f, size),
            _ => deploy_ratio(perf, lat, energy, size * f),
        }
        .unwrap();
        assert!(worse < base, "trial {trial}: {worse} not below {base} after factor {f}");
    }
    println!("criterion 10: PASS  hand value exact, 1000 single-axis perturbations ordered");
}

const RERUN_CFG: &str = "\
seed = 5

[dataset]
classes = 3
planes = [2, 8, 8]
per_class_train = 12
per_class_test = 8

[arch]
conv_channels = [4]
kernel = 3

[train]
epochs = 3
batch_size = 12

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

#[test]
fn criterion_11_pipeline_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, RERUN_CFG).unwrap();

    let drive = |out: &Path| {
        for args in [
            vec!["train"],
            vec!["compress", "cat"],
            vec!["prune", "fsc"],
            vec!["export-lut"],
            vec!["eval"],
        ] {
            let o = Command::new(env!("CARGO_BIN_EXE_spikepack"))
                .arg("--config")
                .arg(&cfg)
                .arg("--seed")
                .arg("5")
                .arg("--out-dir")
                .arg(out)
                .args(&args)
                .output()
                .expect("binary runs");
            assert_eq!(
                o.status.code(),
                Some(0),
                "{args:?}: {}",
                String::from_utf8_lossy(&o.stderr)
            );
        }
    };
    let a: PathBuf = tmp.path().join("a");
    let b: PathBuf = tmp.path().join("b");
    drive(&a);
    drive(&b);

    // Wall-clock latency is deliberately confined to the benchmark
    // report, so everything the pipeline wrote here must match.
    let names = [
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
    ];
    let mut bytes = 0usize;
    for name in names {
        let left = std::fs::read(a.join(name)).unwrap();
        let right = std::fs::read(b.join(name)).unwrap();
        assert_eq!(left, right, "{name} differs between reruns");
        bytes += left.len();
    }
    println!("criterion 11: PASS  {} artifacts, {bytes} bytes, byte-identical across reruns", names.len());
}
