//! `xcnn train`: fit the configured model, keep the best-validation
//! checkpoint, and record learning curves.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use xcnn_core::data::{ImageSource, Split};
use xcnn_core::nn::checkpoint::{save_checkpoint, CheckpointMeta};
use xcnn_core::nn::{ArchitectureSpec, Model};
use xcnn_core::tensor::Element;
use xcnn_core::train::{curves_csv, train, BatchSource, TrainError};

use super::{
    elapsed_ms, float_note, load_feature_data, load_image_data, resolve_weights, split_sizes,
    write_artifact,
};
use crate::config::{Arch, Overrides, Precision, RunConfig};
use crate::error::{config_err, CliError};
use crate::manifest::{Manifest, RunRecord};

pub fn run(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = RunConfig::load(
        config_path,
        Overrides {
            seed,
            ..Overrides::default()
        },
    )?;
    match cfg.precision {
        Precision::Standard => train_with::<f32>(&cfg, out),
        Precision::Wide => train_with::<f64>(&cfg, out),
    }
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Config(_) | TrainError::EmptySplit { .. } => CliError::Config(e.to_string()),
        other => CliError::Training(other.to_string()),
    }
}

fn train_with<E: Element>(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let load_started = Instant::now();
    let mut notes = BTreeMap::new();
    match cfg.arch {
        Arch::CustomCnn => {
            let data = load_image_data(cfg, cfg.image_size)?;
            let names = data.dataset.class_names.clone();
            let labels = data.dataset.labels();
            let train_idx = data.assignment.indices(Split::Train);
            let weights = resolve_weights(cfg.weight_mode, &labels, &train_idx, &names)?;
            let source =
                ImageSource::<E>::new(&data.dataset, &data.assignment, cfg.augmentation(), cfg.seed)
                    .map_err(config_err)?;
            let spec = ArchitectureSpec::custom_cnn_for(
                (cfg.image_size, cfg.image_size),
                names.len(),
                cfg.hidden,
            )
            .map_err(config_err)?;
            let mut model = Model::<E>::new(spec, cfg.seed).map_err(config_err)?;
            model.set_class_names(names).map_err(config_err)?;
            notes.insert("ingest".into(), data.dataset.ingest_manifest());
            describe_split(&mut notes, split_sizes(&data.assignment));
            finish(cfg, out, model, &source, &weights, load_started, notes)
        }
        Arch::FeatureHead => {
            let (features, assignment) = load_feature_data(cfg)?;
            if features.dim != cfg.feature_dim {
                return Err(config_err(format!(
                    "features file holds {}-dim vectors but config declares feature_dim = {}",
                    features.dim, cfg.feature_dim
                )));
            }
            let names = features.class_names.clone();
            let train_idx = assignment.indices(Split::Train);
            let weights = resolve_weights(cfg.weight_mode, &features.labels, &train_idx, &names)?;
            let source = xcnn_core::data::feature_source::<E>(&features, &assignment)
                .map_err(|e| config_err(e.to_string()))?;
            let spec = ArchitectureSpec::head(
                features.dim,
                cfg.hidden,
                names.len(),
                cfg.head_dropout,
            )
            .map_err(config_err)?;
            let mut model = Model::<E>::new(spec, cfg.seed).map_err(config_err)?;
            model.set_class_names(names).map_err(config_err)?;
            describe_split(&mut notes, split_sizes(&assignment));
            finish(cfg, out, model, &source, &weights, load_started, notes)
        }
    }
}

fn describe_split(notes: &mut BTreeMap<String, String>, (tr, va, te): (usize, usize, usize)) {
    notes.insert("split".into(), format!("{tr} train / {va} val / {te} test"));
}

fn finish<E: Element, S: BatchSource<E>>(
    cfg: &RunConfig,
    out: &Path,
    mut model: Model<E>,
    source: &S,
    weights: &[f64],
    load_started: Instant,
    mut notes: BTreeMap<String, String>,
) -> Result<(), CliError> {
    let load_ms = elapsed_ms(load_started);
    println!(
        "training {} ({} parameters) on {} samples ({})",
        cfg.arch,
        model.parameter_count(),
        source.train_len() + source.val_len(),
        notes.get("split").map(String::as_str).unwrap_or("?")
    );

    let train_started = Instant::now();
    let run = train(&mut model, source, weights, &cfg.train_config()).map_err(train_error)?;
    let train_ms = elapsed_ms(train_started);

    for r in &run.records {
        println!(
            "epoch {:>3}  train loss {:.4} (acc {:.3})  val loss {:.4} (acc {:.3})",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
        );
    }
    println!(
        "best epoch {} (val loss {:.4}){}",
        run.best_epoch,
        run.best_val_loss,
        if run.stopped_early {
            format!(", stopped early after epoch {}", run.records.len())
        } else {
            String::new()
        }
    );

    let write_started = Instant::now();
    std::fs::create_dir_all(out)
        .map_err(|e| config_err(format!("cannot create {}: {e}", out.display())))?;
    write_artifact(out, "curves.csv", &curves_csv(&run.records))?;
    let meta = CheckpointMeta {
        epoch: run.best_epoch as u32,
        val_loss: run.best_val_loss as f32,
    };
    save_checkpoint(&run.best, meta, &out.join("model.ckpt"))
        .map_err(|e| config_err(format!("cannot write model.ckpt: {e}")))?;

    notes.insert("best_epoch".into(), run.best_epoch.to_string());
    float_note(&mut notes, "best_val_loss", run.best_val_loss);
    notes.insert("stopped_early".into(), run.stopped_early.to_string());
    notes.insert("epochs_run".into(), run.records.len().to_string());
    notes.insert("parameters".into(), model.parameter_count().to_string());
    notes.insert(
        "class_weights".into(),
        weights
            .iter()
            .map(|w| format!("{w}"))
            .collect::<Vec<_>>()
            .join(","),
    );
    let mut timings = BTreeMap::new();
    timings.insert("load_ms".into(), load_ms);
    timings.insert("train_ms".into(), train_ms);
    timings.insert("write_ms".into(), elapsed_ms(write_started));

    let mut manifest = Manifest::load_or_new(out)?;
    manifest.record(
        out,
        "train",
        RunRecord {
            seed: cfg.seed,
            config: cfg.snapshot(),
            outputs: vec!["curves.csv".into(), "model.ckpt".into()],
            timings_ms: timings,
            notes,
        },
    )?;
    println!("wrote curves.csv, model.ckpt, manifest to {}", out.display());
    Ok(())
}
