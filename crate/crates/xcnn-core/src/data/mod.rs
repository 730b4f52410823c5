//! Image ingestion, dataset splitting, normalization, and batch assembly.
//!
//! A corpus on disk is one directory per class (`<root>/<ClassName>/*.pgm`,
//! `.ppm`, or `.png`); class indices follow the lexicographic order of the
//! directory names. Every decoded image is converted to three channels,
//! bilinearly resized to a square working size, and kept in memory as a
//! `Tensor<f32>` in [0, 1]. Normalization to channel z-scores happens at
//! batch-assembly time, so attributions and renderers can keep working with
//! displayable pixels.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::rng::{self, stream};
use crate::tensor::{Element, Tensor};

pub mod augment;
pub mod image;
pub mod source;

pub use augment::{augment, AugmentationPolicy};
pub use image::{read_image, resize_bilinear, ImageBuf};
pub use source::{feature_source, stacked_feature_split, stacked_image_split, ImageSource};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
    #[error("cannot decode {path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("no class directories under {0}")]
    EmptyCorpus(String),
    #[error("class directory `{0}` contains no decodable images")]
    EmptyClass(String),
    #[error("class `{class}` has only {count} samples; stratified splitting needs at least 3")]
    SplitTooSmall { class: String, count: usize },
    #[error("invalid split ratios (train {train}, val {val}, test {test}): {reason}")]
    BadRatios {
        train: f64,
        val: f64,
        test: f64,
        reason: String,
    },
    #[error("class `{0}` has zero samples; weights are undefined")]
    ZeroClassCount(String),
    #[error("{path} line {line}: {reason}")]
    Csv {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{0}")]
    Shape(String),
}

// ── Datasets ───────────────────────────────────────────────────────────

/// One labeled image, kept un-normalized.
#[derive(Debug, Clone)]
pub struct Sample {
    /// 3xSxS, values in [0, 1]
    pub image: Tensor<f32>,
    pub label: usize,
    /// corpus-relative origin, e.g. `Benign/scan_0042.ppm`
    pub source_id: String,
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    /// files that could not be ingested, with the reason
    pub skipped: Vec<(String, String)>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_names.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Human-readable ingestion record: per-class counts plus every skipped
    /// file and why.
    pub fn ingest_manifest(&self) -> String {
        let counts = self.counts();
        let mut out = format!("classes {}\n", self.class_names.len());
        for (name, n) in self.class_names.iter().zip(&counts) {
            out.push_str(&format!("class {name} {n}\n"));
        }
        out.push_str(&format!("skipped {}\n", self.skipped.len()));
        for (path, reason) in &self.skipped {
            out.push_str(&format!("skip {path}: {reason}\n"));
        }
        out
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["pgm", "ppm", "png"];

/// Scans `root` for class directories, decodes every image inside, and
/// resizes each to `size` x `size`. Undecodable files are skipped and
/// recorded; a class whose directory yields no images at all is an error.
pub fn load_dataset(root: &Path, size: usize) -> Result<LabeledDataset, DataError> {
    let io_err = |path: &Path| {
        let path = path.display().to_string();
        move |source: std::io::Error| DataError::Io { path, source }
    };
    let mut class_dirs: Vec<(String, std::path::PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        if entry.file_type().map_err(io_err(root))?.is_dir() {
            class_dirs.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    if class_dirs.is_empty() {
        return Err(DataError::EmptyCorpus(root.display().to_string()));
    }
    class_dirs.sort_by(|a, b| a.0.cmp(&b.0));

    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for (label, (class_name, dir)) in class_dirs.iter().enumerate() {
        let mut files: Vec<std::path::PathBuf> = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
            let entry = entry.map_err(io_err(dir))?;
            if entry.file_type().map_err(io_err(dir))?.is_file() {
                files.push(entry.path());
            }
        }
        files.sort();
        let mut decoded = 0usize;
        for path in files {
            let source_id = format!(
                "{class_name}/{}",
                path.file_name().unwrap_or_default().to_string_lossy()
            );
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .map(|e| e.to_ascii_lowercase())
                .unwrap_or_default();
            if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
                skipped.push((source_id, format!("unsupported extension `{ext}`")));
                continue;
            }
            match read_image(&path) {
                Ok(buf) => {
                    let mut img = buf.to_unit_tensor();
                    if img.shape() != [3, size, size] {
                        img = resize_bilinear(&img, size, size);
                    }
                    samples.push(Sample {
                        image: img,
                        label,
                        source_id,
                    });
                    decoded += 1;
                }
                Err(e) => skipped.push((source_id, e.to_string())),
            }
        }
        if decoded == 0 {
            return Err(DataError::EmptyClass(class_name.clone()));
        }
    }
    Ok(LabeledDataset {
        samples,
        class_names: class_dirs.into_iter().map(|(n, _)| n).collect(),
        skipped,
    })
}

// ── Splitting ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |reason: &str| DataError::BadRatios {
            train: self.train,
            val: self.val,
            test: self.test,
            reason: reason.into(),
        };
        for r in [self.train, self.val, self.test] {
            if !(0.0..=1.0).contains(&r) {
                return Err(bad("each ratio must lie in [0, 1]"));
            }
        }
        if (self.train + self.val + self.test - 1.0).abs() > 1e-9 {
            return Err(bad("ratios must sum to 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Per-sample split tags; indices refer to positions in the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    tags: Vec<Split>,
}

impl SplitAssignment {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tag(&self, index: usize) -> Split {
        self.tags[index]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.tags.len()).filter(|&i| self.tags[i] == split).collect()
    }
}

/// Stratified split: per class, the sample indices are shuffled with a
/// class-specific stream of `seed`, then floor(n * val) go to validation,
/// floor(n * test) to test, and the remainder to train. Every class must
/// bring at least 3 samples.
pub fn stratified_split(
    labels: &[usize],
    class_names: &[String],
    ratios: SplitRatios,
    seed: u64,
) -> Result<SplitAssignment, DataError> {
    ratios.validate()?;
    let mut tags = vec![Split::Train; labels.len()];
    for (c, name) in class_names.iter().enumerate() {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.len() < 3 {
            return Err(DataError::SplitTooSmall {
                class: name.clone(),
                count: members.len(),
            });
        }
        members.shuffle(&mut rng::rng(seed, &[stream::SPLIT, c as u64]));
        let n = members.len() as f64;
        let n_val = (n * ratios.val).floor() as usize;
        let n_test = (n * ratios.test).floor() as usize;
        for &i in &members[..n_val] {
            tags[i] = Split::Val;
        }
        for &i in &members[n_val..n_val + n_test] {
            tags[i] = Split::Test;
        }
        // the rest keep the Train tag
    }
    Ok(SplitAssignment { tags })
}

// ── Class weights ──────────────────────────────────────────────────────

/// Inverse-frequency weights w_c = total / (K * n_c). Balanced counts give
/// all-ones; scaling counts and total by the same factor leaves them
/// unchanged. `total` is a parameter rather than the count sum because
/// published dataset totals do not always agree with the per-class
/// breakdown; [`class_weights`] supplies the sum.
pub fn class_weights_with_total(
    counts: &[usize],
    total: usize,
    class_names: &[String],
) -> Result<Vec<f64>, DataError> {
    let k = counts.len();
    let mut weights = Vec::with_capacity(k);
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            return Err(DataError::ZeroClassCount(name));
        }
        weights.push(total as f64 / (k as f64 * n as f64));
    }
    Ok(weights)
}

/// Inverse-frequency weights with the total taken from the counts.
pub fn class_weights(counts: &[usize], class_names: &[String]) -> Result<Vec<f64>, DataError> {
    class_weights_with_total(counts, counts.iter().sum(), class_names)
}

// ── Normalization ──────────────────────────────────────────────────────

/// Channel means the pipeline standardizes against.
pub const CHANNEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
/// Channel standard deviations the pipeline standardizes against.
pub const CHANNEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

fn image_dims(shape: &[usize]) -> Result<(usize, usize), DataError> {
    if shape.len() != 3 || shape[0] != 3 {
        return Err(DataError::Shape(format!(
            "expected a 3xHxW image, got {shape:?}"
        )));
    }
    Ok((shape[1], shape[2]))
}

/// Per-channel z-score: (x - mean_c) / std_c, computed in the target
/// precision.
pub fn normalize<E: Element>(image: &Tensor<f32>) -> Result<Tensor<E>, DataError> {
    let (h, w) = image_dims(image.shape())?;
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        let mean = E::from_f64(CHANNEL_MEAN[c]);
        let std = E::from_f64(CHANNEL_STD[c]);
        for &v in &image.data()[c * h * w..(c + 1) * h * w] {
            data.push((E::from_f32(v) - mean) / std);
        }
    }
    Ok(Tensor::new(vec![3, h, w], data).expect("normalize shape"))
}

/// Inverse of [`normalize`], back to displayable [0,1]-scale pixels.
pub fn denormalize<E: Element>(image: &Tensor<E>) -> Result<Tensor<f32>, DataError> {
    let (h, w) = image_dims(image.shape())?;
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        let mean = E::from_f64(CHANNEL_MEAN[c]);
        let std = E::from_f64(CHANNEL_STD[c]);
        for &v in &image.data()[c * h * w..(c + 1) * h * w] {
            data.push((v * std + mean).to_f32());
        }
    }
    Ok(Tensor::new(vec![3, h, w], data).expect("denormalize shape"))
}

/// Normalizes each image and stacks them into an [n, 3, h, w] batch.
pub fn stack_normalized<E: Element>(images: &[&Tensor<f32>]) -> Result<Tensor<E>, DataError> {
    let first = images
        .first()
        .ok_or_else(|| DataError::Shape("cannot stack an empty batch".into()))?;
    let (h, w) = image_dims(first.shape())?;
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.shape() != first.shape() {
            return Err(DataError::Shape(format!(
                "mixed image shapes in batch: {:?} vs {:?}",
                img.shape(),
                first.shape()
            )));
        }
        data.extend(normalize::<E>(img)?.data().iter().copied());
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
        .map_err(|e| DataError::Shape(e.to_string()))
}

/// Constant image whose channels hold the per-channel mean over the given
/// samples — the default masking background for attributions.
pub fn channel_mean_image(
    dataset: &LabeledDataset,
    indices: &[usize],
) -> Result<Tensor<f32>, DataError> {
    let first = indices
        .first()
        .ok_or_else(|| DataError::Shape("mean image over an empty index set".into()))?;
    let shape = dataset.samples[*first].image.shape().to_vec();
    let (h, w) = image_dims(&shape)?;
    let mut sums = [0.0f64; 3];
    for &i in indices {
        let img = &dataset.samples[i].image;
        if img.shape() != shape.as_slice() {
            return Err(DataError::Shape("mixed image shapes in dataset".into()));
        }
        for c in 0..3 {
            sums[c] += img.data()[c * h * w..(c + 1) * h * w]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
    }
    let denom = (indices.len() * h * w) as f64;
    let mut data = Vec::with_capacity(3 * h * w);
    for sum in sums {
        data.extend(std::iter::repeat((sum / denom) as f32).take(h * w));
    }
    Ok(Tensor::new(shape, data).expect("mean image shape"))
}

// ── Precomputed feature vectors ────────────────────────────────────────

/// Rows of frozen backbone features with string class labels, as loaded
/// from CSV (`label,f0,f1,...`).
#[derive(Debug, Clone)]
pub struct FeatureDataset {
    pub features: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub dim: usize,
}

impl FeatureDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_names.len()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Parses a feature CSV. The header must start with `label`; every further
/// column is one feature. Class indices follow the lexicographic order of
/// the distinct label strings.
pub fn load_features(path: &Path) -> Result<FeatureDataset, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let csv_err = |line: usize, reason: String| DataError::Csv {
        path: path.display().to_string(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| csv_err(1, "empty file".into()))?;
    let cols: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    if cols.first().map(|c| c.trim()) != Some("label") || cols.len() < 2 {
        return Err(csv_err(1, "header must be `label,f0,...`".into()));
    }
    let dim = cols.len() - 1;

    let mut rows: Vec<(String, Vec<f32>)> = Vec::new();
    for (idx, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(csv_err(
                idx + 1,
                format!("expected {} fields, found {}", dim + 1, fields.len()),
            ));
        }
        let label = fields[0].trim().to_string();
        if label.is_empty() {
            return Err(csv_err(idx + 1, "empty label".into()));
        }
        let mut feats = Vec::with_capacity(dim);
        for f in &fields[1..] {
            feats.push(f.trim().parse::<f32>().map_err(|e| {
                csv_err(idx + 1, format!("bad feature value `{}`: {e}", f.trim()))
            })?);
        }
        rows.push((label, feats));
    }
    if rows.is_empty() {
        return Err(csv_err(1, "no data rows".into()));
    }

    let mut class_ids: BTreeMap<String, usize> = BTreeMap::new();
    for (label, _) in &rows {
        let next = class_ids.len();
        class_ids.entry(label.clone()).or_insert(next);
    }
    // BTreeMap iterates sorted; re-number so indices are lexicographic
    let class_names: Vec<String> = class_ids.keys().cloned().collect();
    for (i, name) in class_names.iter().enumerate() {
        class_ids.insert(name.clone(), i);
    }
    let mut features = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for (label, feats) in rows {
        labels.push(class_ids[&label]);
        features.push(feats);
    }
    Ok(FeatureDataset {
        features,
        labels,
        class_names,
        dim,
    })
}

/// Stacks feature rows into an [n, dim] batch in the target precision.
pub fn stack_features<E: Element>(rows: &[&[f32]], dim: usize) -> Result<Tensor<E>, DataError> {
    if rows.is_empty() {
        return Err(DataError::Shape("cannot stack an empty batch".into()));
    }
    let mut data = Vec::with_capacity(rows.len() * dim);
    for row in rows {
        if row.len() != dim {
            return Err(DataError::Shape(format!(
                "feature row of length {} in a dim-{dim} set",
                row.len()
            )));
        }
        data.extend(row.iter().map(|&v| E::from_f32(v)));
    }
    Tensor::new(vec![rows.len(), dim], data).map_err(|e| DataError::Shape(e.to_string()))
}
