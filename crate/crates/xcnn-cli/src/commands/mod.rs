//! The four subcommands and the plumbing they share.

pub mod evaluate;
pub mod explain;
pub mod report;
pub mod train;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use xcnn_core::data::{
    class_weights, load_dataset, load_features, stratified_split, FeatureDataset, LabeledDataset,
    Split, SplitAssignment,
};

use crate::config::{RunConfig, WeightMode};
use crate::error::{config_err, CliError};

pub(crate) struct ImageData {
    pub dataset: LabeledDataset,
    pub assignment: SplitAssignment,
}

/// Loads the image corpus at the given working size and splits it with the
/// config's ratios and seed.
pub(crate) fn load_image_data(cfg: &RunConfig, size: usize) -> Result<ImageData, CliError> {
    let root = cfg.dataset_path()?;
    let dataset = load_dataset(root, size).map_err(config_err)?;
    let assignment = stratified_split(
        &dataset.labels(),
        &dataset.class_names,
        cfg.ratios,
        cfg.seed,
    )
    .map_err(config_err)?;
    Ok(ImageData {
        dataset,
        assignment,
    })
}

pub(crate) fn load_feature_data(
    cfg: &RunConfig,
) -> Result<(FeatureDataset, SplitAssignment), CliError> {
    let path = cfg.features_path()?;
    let features = load_features(path).map_err(config_err)?;
    let assignment = stratified_split(
        &features.labels,
        &features.class_names,
        cfg.ratios,
        cfg.seed,
    )
    .map_err(config_err)?;
    Ok((features, assignment))
}

/// Class weights per the config: inverse frequency over the training split,
/// or all ones.
pub(crate) fn resolve_weights(
    mode: WeightMode,
    labels: &[usize],
    train_indices: &[usize],
    class_names: &[String],
) -> Result<Vec<f64>, CliError> {
    match mode {
        WeightMode::Uniform => Ok(vec![1.0; class_names.len()]),
        WeightMode::InverseFrequency => {
            let mut counts = vec![0usize; class_names.len()];
            for &i in train_indices {
                counts[labels[i]] += 1;
            }
            class_weights(&counts, class_names).map_err(config_err)
        }
    }
}

pub(crate) fn split_sizes(assignment: &SplitAssignment) -> (usize, usize, usize) {
    (
        assignment.indices(Split::Train).len(),
        assignment.indices(Split::Val).len(),
        assignment.indices(Split::Test).len(),
    )
}

/// File-name-safe rendering of a class or image name.
pub(crate) fn sanitize(name: &str) -> String {
    let cleaned: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    if cleaned.is_empty() {
        "unnamed".to_string()
    } else {
        cleaned
    }
}

pub(crate) fn checkpoint_path(explicit: Option<&Path>, out: &Path) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("model.ckpt"))
}

pub(crate) fn elapsed_ms(since: Instant) -> u64 {
    since.elapsed().as_millis() as u64
}

pub(crate) fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    std::fs::write(dir.join(name), contents)
        .map_err(|e| config_err(format!("cannot write {name}: {e}")))
}

pub(crate) fn float_note(notes: &mut BTreeMap<String, String>, key: &str, value: f64) {
    notes.insert(key.to_string(), format!("{value}"));
}
