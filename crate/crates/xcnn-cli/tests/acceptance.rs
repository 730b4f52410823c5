//! The shipping gate: one test per release criterion. Each test states its
//! tolerance inline, checks it against an independent oracle, and prints a
//! pass line with the measured margin (visible with `--nocapture`).

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use tempfile::TempDir;

use xcnn_core::data::class_weights_with_total;
use xcnn_core::eval::{macro_prf1, pairwise_auc, roc_curve, ConfusionMatrix};
use xcnn_core::nn::{ArchitectureSpec, DataShape, LayerSpec};
use xcnn_core::rng;
use xcnn_core::shap::{exact_shapley, kernel_shap, ShapError};
use xcnn_core::tensor::check::gradient_check_many;
use xcnn_core::tensor::{Element, GradTape, NodeId, Tensor, TensorError};
use xcnn_core::train::{EarlyStopping, StopSignal};

// ── 1. Parameter-count goldens ─────────────────────────────────────────────

#[test]
fn criterion_1_parameter_count_goldens() {
    let started = Instant::now();
    let spec = ArchitectureSpec::custom_cnn();
    let counts = spec.parameter_counts();
    let by_kind = |kind: &str| -> Vec<u64> {
        counts
            .iter()
            .filter(|c| c.kind == kind)
            .map(|c| c.count)
            .collect()
    };
    assert_eq!(by_kind("conv2d"), [168, 660, 3_488]);
    assert_eq!(by_kind("batchnorm2d"), [12, 24, 64]);
    assert_eq!(by_kind("linear"), [178_951_509, 16_386]);

    let head = ArchitectureSpec::head(2048, 256, 3, 0.5).unwrap();
    assert_eq!(head.total_parameters(), 525_315);

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    println!("criterion 1 pass: conv 168/660/3488, linear 178951509/16386, head 525315 ({elapsed:?})");
}

// ── 2. Shape goldens ───────────────────────────────────────────────────────

#[test]
fn criterion_2_forward_shape_goldens() {
    use DataShape::{Chw, Flat};
    let shapes = ArchitectureSpec::custom_cnn().output_shapes().unwrap();
    let golden = [
        Chw(6, 256, 256),  // conv1
        Chw(6, 256, 256),  // bn
        Chw(6, 256, 256),  // relu
        Chw(6, 128, 128),  // pool
        Chw(12, 128, 128), // conv2
        Chw(12, 128, 128), // bn
        Chw(12, 128, 128), // relu
        Chw(12, 64, 64),   // pool
        Chw(32, 64, 64),   // conv3
        Chw(32, 64, 64),   // bn
        Chw(32, 64, 64),   // relu
        Chw(32, 32, 32),   // pool
        Flat(32_768),      // flatten
        Flat(5_461),       // fc1
        Flat(5_461),       // relu
        Flat(5_461),       // dropout
        Flat(3),           // fc2
        Flat(3),           // softmax
    ];
    assert_eq!(shapes, golden);
    println!("criterion 2 pass: 18 stage shapes match (spatial 256→128→64→32, flatten 32768)");
}

// ── 3. Gradient suite ──────────────────────────────────────────────────────

/// Signed values with |v| >= `min_abs`, keeping finite differences clear of
/// the relu kink at zero.
fn away_from_zero<E: Element>(
    shape: Vec<usize>,
    min_abs: f64,
    max_abs: f64,
    r: &mut impl Rng,
) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data: Vec<E> = (0..n)
        .map(|_| {
            let mag = r.gen_range(min_abs..max_abs);
            let sign = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
            E::from_f64(sign * mag)
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Uniform values plus a deterministic per-component offset, so no two
/// entries of a pooling window can sit within a finite-difference step of
/// each other.
fn tie_broken<E: Element>(shape: Vec<usize>, r: &mut impl Rng) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data: Vec<E> = (0..n)
        .map(|i| E::from_f64(r.gen_range(-1.0..1.0) + (i % 97) as f64 * 2e-3))
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Rebuilds a model's forward pass from spec + parameter leaves (params in
/// `Model::params` order, input batch last) and returns the weighted CE loss.
fn spec_loss<E: Element>(
    spec: &ArchitectureSpec,
    tape: &mut GradTape<E>,
    ids: &[NodeId],
    labels: &[usize],
    weights: &[E],
) -> Result<NodeId, TensorError> {
    let mut it = ids.iter().copied();
    let mut per_layer: Vec<Option<(NodeId, NodeId)>> = Vec::new();
    for layer in &spec.layers {
        per_layer.push(match layer {
            LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. } | LayerSpec::BatchNorm2d { .. } => {
                Some((it.next().unwrap(), it.next().unwrap()))
            }
            _ => None,
        });
    }
    let input = it.next().unwrap();
    let batch = tape.value(input).shape()[0];
    let mut x = input;
    for (idx, layer) in spec.layers.iter().enumerate() {
        x = match *layer {
            LayerSpec::Conv2d {
                stride, padding, ..
            } => {
                let (w, b) = per_layer[idx].unwrap();
                tape.conv2d(x, w, b, stride, padding)?
            }
            LayerSpec::Linear { .. } => {
                let (w, b) = per_layer[idx].unwrap();
                tape.linear(x, w, b)?
            }
            LayerSpec::BatchNorm2d { eps, .. } => {
                let (g, bt) = per_layer[idx].unwrap();
                tape.batchnorm_train(x, g, bt, eps)?.node
            }
            LayerSpec::Relu => tape.relu(x),
            LayerSpec::MaxPool2x2 => tape.maxpool2x2(x)?,
            LayerSpec::Flatten => {
                let numel = tape.value(x).numel();
                tape.reshape(x, vec![batch, numel / batch])?
            }
            LayerSpec::Dropout { rate } => tape.dropout(x, rate, 99)?,
            LayerSpec::Softmax => tape.softmax(x)?,
        };
    }
    tape.weighted_cross_entropy(x, labels, weights)
}

/// Worst relative error across every layer kind, checked at one seed.
fn layer_suite<E: Element>(seed: u64, step: f64) -> f64 {
    let mut worst = 0.0f64;
    let mut note = |err: f64| worst = worst.max(err);
    let square_sum = |t: &mut GradTape<E>, y: NodeId| -> Result<NodeId, TensorError> {
        let sq = t.mul(y, y)?;
        Ok(t.sum_all(sq))
    };

    // conv2d
    let mut r = rng::rng(seed, &[31]);
    let x = Tensor::<E>::uniform(vec![1, 2, 5, 5], -1.0, 1.0, &mut r);
    let w = Tensor::<E>::uniform(vec![3, 2, 3, 3], -0.5, 0.5, &mut r);
    let b = Tensor::<E>::uniform(vec![3], -0.1, 0.1, &mut r);
    note(
        gradient_check_many(
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
                square_sum(t, y)
            },
            &[x, w, b],
            step,
            None,
            seed,
        )
        .unwrap(),
    );

    // linear
    let mut r = rng::rng(seed, &[32]);
    let x = Tensor::<E>::uniform(vec![2, 4], -1.0, 1.0, &mut r);
    let w = Tensor::<E>::uniform(vec![3, 4], -0.6, 0.6, &mut r);
    let b = Tensor::<E>::uniform(vec![3], -0.2, 0.2, &mut r);
    note(
        gradient_check_many(
            |t, ids| {
                let y = t.linear(ids[0], ids[1], ids[2])?;
                square_sum(t, y)
            },
            &[x, w, b],
            step,
            None,
            seed,
        )
        .unwrap(),
    );

    // batch norm (train statistics)
    let mut r = rng::rng(seed, &[33]);
    let x = Tensor::<E>::uniform(vec![2, 2, 3, 3], -1.0, 1.0, &mut r);
    let g = Tensor::<E>::uniform(vec![2], 0.5, 1.5, &mut r);
    let bt = Tensor::<E>::uniform(vec![2], -0.3, 0.3, &mut r);
    note(
        gradient_check_many(
            |t, ids| {
                let y = t.batchnorm_train(ids[0], ids[1], ids[2], 1e-5)?.node;
                square_sum(t, y)
            },
            &[x, g, bt],
            step,
            None,
            seed,
        )
        .unwrap(),
    );

    // relu, clear of the kink
    let mut r = rng::rng(seed, &[34]);
    let x = away_from_zero::<E>(vec![3, 5], 0.05, 1.0, &mut r);
    note(
        gradient_check_many(
            |t, ids| {
                let y = t.relu(ids[0]);
                square_sum(t, y)
            },
            &[x],
            step,
            None,
            seed,
        )
        .unwrap(),
    );

    // max pooling, ties broken
    let mut r = rng::rng(seed, &[35]);
    let x = tie_broken::<E>(vec![1, 2, 6, 6], &mut r);
    note(
        gradient_check_many(
            |t, ids| {
                let y = t.maxpool2x2(ids[0])?;
                square_sum(t, y)
            },
            &[x],
            step,
            None,
            seed,
        )
        .unwrap(),
    );

    // softmax
    let mut r = rng::rng(seed, &[36]);
    let x = Tensor::<E>::uniform(vec![2, 4], -1.5, 1.5, &mut r);
    note(
        gradient_check_many(
            |t, ids| {
                let y = t.softmax(ids[0])?;
                square_sum(t, y)
            },
            &[x],
            step,
            None,
            seed,
        )
        .unwrap(),
    );

    // weighted cross entropy on logits
    let mut r = rng::rng(seed, &[37]);
    let z = Tensor::<E>::uniform(vec![3, 4], -1.0, 1.0, &mut r);
    let weights = [
        E::from_f64(1.0),
        E::from_f64(2.5),
        E::from_f64(0.5),
        E::from_f64(1.5),
    ];
    note(
        gradient_check_many(
            |t, ids| t.weighted_cross_entropy(ids[0], &[1, 0, 3], &weights),
            &[z],
            step,
            None,
            seed,
        )
        .unwrap(),
    );

    // inverted dropout (deterministic mask)
    let mut r = rng::rng(seed, &[38]);
    let x = Tensor::<E>::uniform(vec![4, 4], -1.0, 1.0, &mut r);
    note(
        gradient_check_many(
            |t, ids| {
                let y = t.dropout(ids[0], 0.5, 7)?;
                square_sum(t, y)
            },
            &[x],
            step,
            None,
            seed,
        )
        .unwrap(),
    );

    // elementwise algebra: exp, log, add, sub, mul, matmul, reshape, sum
    let mut r = rng::rng(seed, &[39]);
    let a = Tensor::<E>::uniform(vec![2, 3], 0.2, 1.5, &mut r);
    let b = Tensor::<E>::uniform(vec![3, 2], 0.2, 1.5, &mut r);
    note(
        gradient_check_many(
            |t, ids| {
                let la = t.log(ids[0])?;
                let ea = t.exp(la);
                let sum = t.add(ea, ids[0])?;
                let diff = t.sub(sum, ids[0])?;
                let prod = t.matmul(diff, ids[1])?;
                let sq = t.mul(prod, prod)?;
                let flat = t.reshape(sq, vec![4])?;
                Ok(t.sum_all(flat))
            },
            &[a, b],
            step,
            None,
            seed,
        )
        .unwrap(),
    );

    worst
}

fn full_model_err<E: Element>(seed: u64, step: f64) -> f64 {
    let spec = ArchitectureSpec::custom_cnn_for((8, 8), 2, 3).unwrap();
    let model = xcnn_core::nn::Model::<E>::new(spec.clone(), seed).unwrap();
    let mut r = rng::rng(seed, &[40]);
    let batch = Tensor::<E>::uniform(vec![2, 3, 8, 8], 0.1, 0.9, &mut r);
    let labels = [0usize, 1];
    let weights = [E::from_f64(1.25), E::from_f64(0.75)];

    let mut params: Vec<Tensor<E>> = model.params().into_iter().map(|(_, t)| t.clone()).collect();
    params.push(batch);
    gradient_check_many(
        |tape, ids| spec_loss(&spec, tape, ids, &labels, &weights),
        &params,
        step,
        Some(12),
        seed,
    )
    .unwrap()
}

#[test]
fn criterion_3_gradient_suite_100_seeds() {
    let started = Instant::now();
    let mut worst_wide = 0.0f64;
    let mut worst_std = 0.0f64;
    for seed in 0..100 {
        let wide = layer_suite::<f64>(seed, 1e-5).max(full_model_err::<f64>(seed, 1e-5));
        assert!(wide < 1e-6, "wide precision, seed {seed}: rel err {wide}");
        worst_wide = worst_wide.max(wide);

        let std = layer_suite::<f32>(seed, 3e-3).max(full_model_err::<f32>(seed, 3e-3));
        assert!(std < 1e-4, "standard precision, seed {seed}: rel err {std}");
        worst_std = worst_std.max(std);
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    println!(
        "criterion 3 pass: 100 seeds, worst rel err {worst_wide:.2e} wide / {worst_std:.2e} standard ({elapsed:?})"
    );
}

// ── 4. Metric oracles ──────────────────────────────────────────────────────

#[test]
fn criterion_4_metric_oracles() {
    let started = Instant::now();

    // Confusion matrix, accuracy, macro P/R/F1 against a naive recount.
    for case in 0..1_000u64 {
        let mut r = rng::rng(4, &[case]);
        let k = r.gen_range(2..=5usize);
        let n = r.gen_range(1..=60usize);
        let truth: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();

        let cm = ConfusionMatrix::from_labels(&truth, &pred, k).unwrap();
        let mut naive = vec![vec![0u64; k]; k];
        for (&t, &p) in truth.iter().zip(&pred) {
            naive[t][p] += 1;
        }
        for t in 0..k {
            for p in 0..k {
                assert_eq!(cm.count(t, p), naive[t][p]);
            }
        }
        let trace: u64 = (0..k).map(|c| naive[c][c]).sum();
        assert_eq!(cm.accuracy(), trace as f64 / n as f64);

        let report = macro_prf1(&cm);
        let (mut sp, mut sr, mut sf) = (0.0f64, 0.0f64, 0.0f64);
        for c in 0..k {
            let tp = naive[c][c];
            let fp: u64 = (0..k).filter(|&t| t != c).map(|t| naive[t][c]).sum();
            let fno: u64 = (0..k).filter(|&p| p != c).map(|p| naive[c][p]).sum();
            let p = if tp + fp == 0 {
                0.0
            } else {
                tp as f64 / (tp + fp) as f64
            };
            let rec = if tp + fno == 0 {
                0.0
            } else {
                tp as f64 / (tp + fno) as f64
            };
            let f1 = if p + rec == 0.0 {
                0.0
            } else {
                2.0 * p * rec / (p + rec)
            };
            assert_eq!(report.per_class[c].precision, p, "case {case} class {c}");
            assert_eq!(report.per_class[c].recall, rec, "case {case} class {c}");
            assert_eq!(report.per_class[c].f1, f1, "case {case} class {c}");
            sp += p;
            sr += rec;
            sf += f1;
        }
        assert_eq!(report.macro_precision, sp / k as f64);
        assert_eq!(report.macro_recall, sr / k as f64);
        assert_eq!(report.macro_f1, sf / k as f64);
    }

    // Trapezoid AUC == pairwise statistic, as exact rationals, ties included.
    for case in 0..200u64 {
        let mut r = rng::rng(44, &[case]);
        let n = r.gen_range(2..=200usize);
        let (scores, labels) = loop {
            let s: Vec<f64> = (0..n).map(|_| r.gen_range(0..8) as f64 / 7.0).collect();
            let l: Vec<bool> = (0..n).map(|_| r.gen_bool(0.4)).collect();
            if l.iter().any(|&b| b) && l.iter().any(|&b| !b) {
                break (s, l);
            }
        };
        let curve = roc_curve(&scores, &labels).unwrap();
        let (pw_num, pw_den) = pairwise_auc(&scores, &labels).unwrap();
        assert_eq!(
            curve.auc_num as u128 * pw_den,
            pw_num * curve.auc_den as u128,
            "case {case}: sweep {}/{} vs pairwise {pw_num}/{pw_den}",
            curve.auc_num,
            curve.auc_den
        );
    }

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    println!("criterion 4 pass: 1000 label sets exact, 200 AUC sets exact ({elapsed:?})");
}

// ── 5. SHAP axioms and oracle ──────────────────────────────────────────────

fn table_value(table: &[f64]) -> impl FnMut(&[bool]) -> Result<f64, ShapError> + '_ {
    move |coalition: &[bool]| {
        let idx: usize = coalition
            .iter()
            .enumerate()
            .map(|(i, &b)| if b { 1usize << i } else { 0 })
            .sum();
        Ok(table[idx])
    }
}

#[test]
fn criterion_5_shap_oracle_and_axioms() {
    let started = Instant::now();

    // Exhaustive KernelSHAP vs exact enumeration, 50 random tables, M <= 8.
    let mut worst = 0.0f64;
    for t in 0..50u64 {
        let m = (t % 8 + 1) as usize;
        let mut r = rng::rng(55, &[t]);
        let table: Vec<f64> = (0..1usize << m).map(|_| r.gen_range(-2.0..2.0)).collect();

        let exact = exact_shapley(&mut table_value(&table), m).unwrap();
        let budget = (1usize << m).max(4);
        let fit = kernel_shap(&mut table_value(&table), m, budget, t).unwrap();
        assert!(fit.exhaustive, "table {t} (m = {m}) should enumerate");
        for i in 0..m {
            let diff = (fit.phi[i] - exact[i]).abs();
            assert!(diff <= 1e-6, "table {t} player {i}: |kernel - exact| = {diff}");
            worst = worst.max(diff);
        }
        assert!(
            fit.efficiency_gap() <= 1e-9,
            "table {t}: exhaustive efficiency gap {}",
            fit.efficiency_gap()
        );
    }

    // Efficiency in sampled mode with budget >= 4M.
    for &m in &[8usize, 10, 12] {
        let mut r = rng::rng(56, &[m as u64]);
        let table: Vec<f64> = (0..1usize << m).map(|_| r.gen_range(-2.0..2.0)).collect();
        let fit = kernel_shap(&mut table_value(&table), m, 4 * m, 9).unwrap();
        assert!(!fit.exhaustive, "budget {} must sample for m = {m}", 4 * m);
        assert!(
            fit.efficiency_gap() <= 1e-3,
            "sampled efficiency gap {} at m = {m}",
            fit.efficiency_gap()
        );
    }

    // Dummy axiom: a player that never changes the value gets exactly zero.
    let m = 6;
    let mut r = rng::rng(57, &[1]);
    let base: Vec<f64> = (0..1usize << (m - 1)).map(|_| r.gen_range(-2.0..2.0)).collect();
    let mut dummy_value = |z: &[bool]| -> Result<f64, ShapError> {
        let idx: usize = z[..m - 1]
            .iter()
            .enumerate()
            .map(|(i, &b)| if b { 1usize << i } else { 0 })
            .sum();
        Ok(base[idx])
    };
    let exact = exact_shapley(&mut dummy_value, m).unwrap();
    assert_eq!(exact[m - 1], 0.0, "exact dummy attribution must be exactly zero");
    let fit = kernel_shap(&mut dummy_value, m, 1 << m, 2).unwrap();
    assert!(
        fit.phi[m - 1].abs() <= 1e-9,
        "kernel dummy attribution {}",
        fit.phi[m - 1]
    );

    // Symmetry axiom: interchangeable players receive equal credit.
    let mut r = rng::rng(57, &[2]);
    let by_size: Vec<f64> = (0..=m).map(|_| r.gen_range(-1.0..1.0)).collect();
    let pair_bonus: Vec<f64> = (0..=2).map(|_| r.gen_range(-1.0..1.0)).collect();
    let (pi, pj) = (1usize, 4usize);
    let mut sym_value = |z: &[bool]| -> Result<f64, ShapError> {
        let size = z.iter().filter(|&&b| b).count();
        let pair = z[pi] as usize + z[pj] as usize;
        Ok(by_size[size] + pair_bonus[pair])
    };
    let exact = exact_shapley(&mut sym_value, m).unwrap();
    assert!(
        (exact[pi] - exact[pj]).abs() <= 1e-12,
        "exact symmetry gap {}",
        (exact[pi] - exact[pj]).abs()
    );
    let fit = kernel_shap(&mut sym_value, m, 1 << m, 3).unwrap();
    assert!(
        (fit.phi[pi] - fit.phi[pj]).abs() <= 1e-9,
        "kernel symmetry gap {}",
        (fit.phi[pi] - fit.phi[pj]).abs()
    );

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    println!("criterion 5 pass: 50 tables worst |Δφ| {worst:.2e}, axioms hold ({elapsed:?})");
}

// ── 6. Cost-sensitive loss goldens ─────────────────────────────────────────

#[test]
fn criterion_6_weighted_loss_goldens() {
    // Probabilities (0.7, 0.2, 0.1), true label 1, weights (1, 2, 1):
    // loss = 2·(−ln 0.2) / 2 = 1.6094.
    let mut tape = GradTape::<f64>::new();
    let logits = tape.leaf(
        Tensor::new(
            vec![1, 3],
            vec![0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()],
        )
        .unwrap(),
    );
    let loss = tape
        .weighted_cross_entropy(logits, &[1], &[1.0, 2.0, 1.0])
        .unwrap();
    let value = tape.value(loss).data()[0];
    assert!((value - 1.6094).abs() < 1e-4, "loss {value}");

    // Inverse-frequency weights for counts (416, 120, 561) over N = 1197.
    let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let weights = class_weights_with_total(&[416, 120, 561], 1197, &names).unwrap();
    for (got, want) in weights.iter().zip([0.9591, 3.3250, 0.7112]) {
        assert!(
            (got - want).abs() < 5e-5,
            "weight {got} vs published {want}"
        );
    }
    println!("criterion 6 pass: loss {value:.5} ≈ 1.6094, weights (0.9591, 3.3250, 0.7112)");
}

// ── 7 & 8. End-to-end runs ─────────────────────────────────────────────────

fn xcnn(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_xcnn"))
        .args(args)
        .output()
        .expect("spawn xcnn")
}

#[track_caller]
fn expect_ok(out: &std::process::Output) {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// The desk-scale run config: 90 images (40/10/40), 32×32.
fn desk_config(dir: &Path, corpus: &Path, seed: u64) -> PathBuf {
    let text = format!(
        "dataset = {}\n\
         image_size = 32\n\
         hidden = 32\n\
         batch_size = 8\n\
         max_epochs = 20\n\
         patience = 6\n\
         learning_rate = 0.01\n\
         grid = 4\n\
         budget = 256\n\
         seed = {seed}\n",
        corpus.display()
    );
    let path = dir.join(format!("desk_{seed}.cfg"));
    std::fs::write(&path, text).unwrap();
    path
}

fn train_and_evaluate(config: &Path, out: &Path) -> f64 {
    expect_ok(&xcnn(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    expect_ok(&xcnn(&[
        "evaluate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest")).unwrap()).unwrap();
    manifest["runs"]["evaluate"]["notes"]["accuracy"]
        .as_str()
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn criterion_7_end_to_end_desk_scale_run() {
    let started = Instant::now();
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus");
    common::synthetic_corpus(&corpus, [40, 10, 40], 32, 17);

    let mut accuracies = Vec::new();
    for seed in 0..5u64 {
        let config = desk_config(dir.path(), &corpus, seed);
        let out = dir.path().join(format!("run_{seed}"));
        let accuracy = train_and_evaluate(&config, &out);
        accuracies.push(accuracy);
    }
    let mut sorted = accuracies.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[2];
    assert!(
        median >= 0.9,
        "median test accuracy {median} over seeds (all: {accuracies:?})"
    );

    // Explain one image from the first run; the sidecar must balance.
    let config = dir.path().join("desk_0.cfg");
    let out = dir.path().join("run_0");
    expect_ok(&xcnn(&[
        "explain",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--image",
        corpus.join("disk/img_000.ppm").to_str().unwrap(),
    ]));
    let heatmaps = out.join("heatmaps");
    let sidecar_path = std::fs::read_dir(&heatmaps)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "txt"))
        .expect("sidecar written");
    let sidecar = std::fs::read_to_string(&sidecar_path).unwrap();
    let field = |key: &str| -> f64 {
        sidecar
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{key}: ")))
            .unwrap_or_else(|| panic!("{key} missing from sidecar"))
            .parse()
            .unwrap()
    };
    let gap = (field("phi_sum") - (field("full_value") - field("base_value"))).abs();
    assert!(gap < 1e-6, "sidecar efficiency gap {gap}");

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    println!(
        "criterion 7 pass: accuracies {accuracies:?}, median {median:.3}, sidecar gap {gap:.2e} ({elapsed:?})"
    );
}

#[test]
fn criterion_8_fixed_seed_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus");
    common::synthetic_corpus(&corpus, [40, 10, 40], 32, 17);
    let config = desk_config(dir.path(), &corpus, 0);

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_and_evaluate(&config, &a);
    train_and_evaluate(&config, &b);

    for name in ["curves.csv", "metrics.csv", "model.ckpt"] {
        let one = std::fs::read(a.join(name)).unwrap();
        let two = std::fs::read(b.join(name)).unwrap();
        assert_eq!(one, two, "{name} differs between identically seeded runs");
    }
    println!("criterion 8 pass: curves.csv, metrics.csv, model.ckpt byte-identical");
}

// ── 9. Early-stopping contract ─────────────────────────────────────────────

#[test]
fn criterion_9_early_stopping_contract() {
    use StopSignal::{Improved, Stop, Wait};
    let script = [1.0, 0.9, 0.95, 0.96, 0.97];
    let mut stopper = EarlyStopping::new(2);
    let mut signals = Vec::new();
    let mut epochs_run = 0;
    for &loss in &script {
        let signal = stopper.observe(loss);
        epochs_run += 1;
        signals.push(signal);
        if signal == Stop {
            break;
        }
    }
    assert_eq!(signals, [Improved, Improved, Wait, Stop]);
    assert_eq!(epochs_run, 4, "must stop after epoch 4");
    assert_eq!(stopper.best_epoch(), 2, "epoch-2 checkpoint must be kept");
    assert!((stopper.best_loss() - 0.9).abs() < 1e-12);
    println!("criterion 9 pass: stopped after epoch 4 with the epoch-2 snapshot");
}
