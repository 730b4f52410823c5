//! `xcnn evaluate`: score a checkpoint on the held-out test split and write
//! the metric tables.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use xcnn_core::data::{stacked_feature_split, stacked_image_split, Split};
use xcnn_core::eval::{confusion_csv, evaluate, metrics_csv, roc_csv, EvalError, MetricsReport};
use xcnn_core::nn::checkpoint::load_checkpoint;
use xcnn_core::nn::InputShape;
use xcnn_core::tensor::Element;

use super::{
    checkpoint_path, elapsed_ms, float_note, load_feature_data, load_image_data, sanitize,
    write_artifact,
};
use crate::config::{Overrides, Precision, RunConfig};
use crate::error::{config_err, CliError};
use crate::manifest::{Manifest, RunRecord};

/// prediction batch size during inference
const CHUNK: usize = 16;

pub fn run(
    config_path: &Path,
    out: &Path,
    checkpoint: Option<&Path>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(
        config_path,
        Overrides {
            seed,
            ..Overrides::default()
        },
    )?;
    match cfg.precision {
        Precision::Standard => evaluate_with::<f32>(&cfg, out, checkpoint),
        Precision::Wide => evaluate_with::<f64>(&cfg, out, checkpoint),
    }
}

fn eval_error(e: EvalError) -> CliError {
    match e {
        EvalError::Model(m) => CliError::Checkpoint(m.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

fn class_check(model_names: &[String], data_names: &[String]) -> Result<(), CliError> {
    if model_names != data_names {
        return Err(CliError::Checkpoint(format!(
            "checkpoint classes [{}] do not match dataset classes [{}]",
            model_names.join(", "),
            data_names.join(", ")
        )));
    }
    Ok(())
}

fn evaluate_with<E: Element>(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: Option<&Path>,
) -> Result<(), CliError> {
    let ckpt = checkpoint_path(checkpoint, out);
    let load_started = Instant::now();
    let (model, meta) = load_checkpoint::<E>(&ckpt)
        .map_err(|e| CliError::Checkpoint(format!("{}: {e}", ckpt.display())))?;

    let (input, labels, class_names) = match model.spec().input {
        InputShape::Image { height, width, .. } => {
            if height != width {
                return Err(CliError::Checkpoint(format!(
                    "checkpoint expects a non-square {height}x{width} input; the corpus loader only produces squares"
                )));
            }
            let data = load_image_data(cfg, height)?;
            class_check(model.class_names(), &data.dataset.class_names)?;
            let test = data.assignment.indices(Split::Test);
            if test.is_empty() {
                return Err(config_err("the test split is empty"));
            }
            let (input, labels) =
                stacked_image_split::<E>(&data.dataset, &test).map_err(config_err)?;
            (input, labels, data.dataset.class_names.clone())
        }
        InputShape::Features { dim } => {
            let (features, assignment) = load_feature_data(cfg)?;
            if features.dim != dim {
                return Err(CliError::Checkpoint(format!(
                    "checkpoint expects {dim}-dim features, file holds {}-dim vectors",
                    features.dim
                )));
            }
            class_check(model.class_names(), &features.class_names)?;
            let test = assignment.indices(Split::Test);
            if test.is_empty() {
                return Err(config_err("the test split is empty"));
            }
            let (input, labels) =
                stacked_feature_split::<E>(&features, &test).map_err(config_err)?;
            (input, labels, features.class_names.clone())
        }
    };
    let load_ms = elapsed_ms(load_started);

    let eval_started = Instant::now();
    let report = evaluate(&model, &input, &labels, &class_names, CHUNK).map_err(eval_error)?;
    let eval_ms = elapsed_ms(eval_started);

    let write_started = Instant::now();
    std::fs::create_dir_all(out)
        .map_err(|e| config_err(format!("cannot create {}: {e}", out.display())))?;
    let mut outputs = vec!["metrics.csv".to_string(), "confusion.csv".to_string()];
    write_artifact(out, "metrics.csv", &metrics_csv(&report))?;
    write_artifact(out, "confusion.csv", &confusion_csv(&report.confusion, &class_names))?;
    for (name, curve) in class_names.iter().zip(&report.roc) {
        if let Some(curve) = curve {
            let file = format!("roc_{}.csv", sanitize(name));
            write_artifact(out, &file, &roc_csv(curve))?;
            outputs.push(file);
        }
    }

    let notes = report_notes(&report, &ckpt, meta.epoch, labels.len());
    let mut timings = BTreeMap::new();
    timings.insert("load_ms".into(), load_ms);
    timings.insert("evaluate_ms".into(), eval_ms);
    timings.insert("write_ms".into(), elapsed_ms(write_started));
    let mut manifest = Manifest::load_or_new(out)?;
    manifest.record(
        out,
        "evaluate",
        RunRecord {
            seed: cfg.seed,
            config: cfg.snapshot(),
            outputs,
            timings_ms: timings,
            notes,
        },
    )?;

    println!(
        "test accuracy {:.4}, macro F1 {:.4} over {} samples",
        report.accuracy(),
        report.prf.macro_f1,
        labels.len()
    );
    println!("wrote metrics.csv, confusion.csv, ROC tables to {}", out.display());
    Ok(())
}

fn report_notes(
    report: &MetricsReport,
    ckpt: &Path,
    ckpt_epoch: u32,
    test_samples: usize,
) -> BTreeMap<String, String> {
    let mut notes = BTreeMap::new();
    float_note(&mut notes, "accuracy", report.accuracy());
    float_note(&mut notes, "macro_precision", report.prf.macro_precision);
    float_note(&mut notes, "macro_recall", report.prf.macro_recall);
    float_note(&mut notes, "macro_f1", report.prf.macro_f1);
    notes.insert("checkpoint".into(), ckpt.display().to_string());
    notes.insert("checkpoint_epoch".into(), ckpt_epoch.to_string());
    notes.insert("test_samples".into(), test_samples.to_string());
    notes
}
