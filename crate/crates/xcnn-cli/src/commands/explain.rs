//! `xcnn explain`: attribute one prediction to image regions and render
//! the evidence heatmap plus a plain-text φ sidecar.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use xcnn_core::data::image::{write_png, write_ppm};
use xcnn_core::data::{channel_mean_image, normalize, read_image, resize_bilinear, ImageBuf};
use xcnn_core::nn::checkpoint::load_checkpoint;
use xcnn_core::nn::{InputShape, Model};
use xcnn_core::shap::{
    explain_image, render_heatmap, AttributionMap, Background, Segmentation, ShapError,
};
use xcnn_core::tensor::{Element, Tensor};

use super::{checkpoint_path, elapsed_ms, load_image_data, sanitize};
use crate::config::{BackgroundMode, Overrides, Precision, RunConfig};
use crate::error::{config_err, CliError};
use crate::manifest::{Manifest, RunRecord};

#[allow(clippy::too_many_arguments)]
pub fn run(
    config_path: &Path,
    out: &Path,
    checkpoint: Option<&Path>,
    image: &Path,
    target_class: &str,
    grid: Option<usize>,
    budget: Option<usize>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config_path, Overrides { seed, grid, budget })?;
    match cfg.precision {
        Precision::Standard => explain_with::<f32>(&cfg, out, checkpoint, image, target_class),
        Precision::Wide => explain_with::<f64>(&cfg, out, checkpoint, image, target_class),
    }
}

fn shap_error(e: ShapError) -> CliError {
    match e {
        ShapError::Model(m) => CliError::Checkpoint(m.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

fn resolve_target<E: Element>(
    requested: &str,
    model: &Model<E>,
    unit: &Tensor<f32>,
    (h, w): (usize, usize),
) -> Result<(usize, &'static str), CliError> {
    let classes = model.spec().classes;
    if requested == "predicted" {
        let normalized: Tensor<E> = normalize(unit).map_err(config_err)?;
        let input =
            Tensor::new(vec![1, 3, h, w], normalized.data().to_vec()).map_err(config_err)?;
        let predicted = model
            .predict_classes(&input)
            .map_err(|e| CliError::Checkpoint(e.to_string()))?;
        return Ok((predicted[0], "predicted"));
    }
    let index = requested
        .parse::<usize>()
        .ok()
        .or_else(|| model.class_names().iter().position(|n| n == requested));
    match index {
        Some(i) if i < classes => Ok((i, "requested")),
        _ => Err(config_err(format!(
            "--target-class `{requested}` is neither a class index below {classes} nor a known class name"
        ))),
    }
}

fn explain_with<E: Element>(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    image_path: &Path,
    target_class: &str,
) -> Result<(), CliError> {
    let ckpt = checkpoint_path(checkpoint, out);
    let load_started = Instant::now();
    let (model, _meta) = load_checkpoint::<E>(&ckpt)
        .map_err(|e| CliError::Checkpoint(format!("{}: {e}", ckpt.display())))?;
    let (h, w) = match model.spec().input {
        InputShape::Image { height, width, .. } => (height, width),
        InputShape::Features { .. } => {
            return Err(config_err(
                "this checkpoint consumes feature vectors; explain needs an image model",
            ))
        }
    };

    let decoded = read_image(image_path)
        .map_err(|e| CliError::Image(format!("{}: {e}", image_path.display())))?;
    let mut unit = decoded.to_unit_tensor();
    if (decoded.height, decoded.width) != (h, w) {
        unit = resize_bilinear(&unit, h, w);
    }
    let display = ImageBuf::from_unit_tensor(&unit).map_err(config_err)?;

    let seg = Segmentation::grid(h, w, cfg.grid).map_err(shap_error)?;
    let background = match cfg.background {
        BackgroundMode::Zero => Background::Constant(0.0),
        BackgroundMode::Mean => {
            let data = load_image_data(cfg, h)?;
            let all: Vec<usize> = (0..data.dataset.len()).collect();
            Background::Image(channel_mean_image(&data.dataset, &all).map_err(config_err)?)
        }
    };
    let (target, target_source) = resolve_target(target_class, &model, &unit, (h, w))?;
    let load_ms = elapsed_ms(load_started);

    let shap_started = Instant::now();
    let attribution = explain_image(&model, &unit, &seg, &background, target, cfg.budget, cfg.seed)
        .map_err(shap_error)?;
    let shap_ms = elapsed_ms(shap_started);

    let write_started = Instant::now();
    let heatmap = render_heatmap(&attribution, &seg, &display).map_err(shap_error)?;
    let dir = out.join("heatmaps");
    std::fs::create_dir_all(&dir)
        .map_err(|e| config_err(format!("cannot create {}: {e}", dir.display())))?;
    let target_name = model
        .class_names()
        .get(target)
        .cloned()
        .unwrap_or_else(|| format!("class{target}"));
    let stem = format!(
        "{}_{}",
        sanitize(&image_path.file_stem().unwrap_or_default().to_string_lossy()),
        sanitize(&target_name)
    );
    let ppm = format!("heatmaps/{stem}.ppm");
    let png = format!("heatmaps/{stem}.png");
    let txt = format!("heatmaps/{stem}.txt");
    write_ppm(&heatmap, &out.join(&ppm)).map_err(config_err)?;
    write_png(&heatmap, &out.join(&png)).map_err(config_err)?;
    let sidecar = sidecar_text(
        &attribution,
        cfg,
        image_path,
        &ckpt,
        &target_name,
        target_source,
        seg.segments(),
    );
    std::fs::write(out.join(&txt), &sidecar)
        .map_err(|e| config_err(format!("cannot write {txt}: {e}")))?;

    let mut notes = BTreeMap::new();
    notes.insert("target_class".into(), target.to_string());
    notes.insert("target_name".into(), target_name.clone());
    notes.insert("target_source".into(), target_source.to_string());
    notes.insert("base_value".into(), format!("{}", attribution.base));
    notes.insert("full_value".into(), format!("{}", attribution.full));
    notes.insert(
        "efficiency_gap".into(),
        format!("{}", attribution.efficiency_gap()),
    );
    notes.insert("evaluations".into(), attribution.evaluated.to_string());
    let mut timings = BTreeMap::new();
    timings.insert("load_ms".into(), load_ms);
    timings.insert("explain_ms".into(), shap_ms);
    timings.insert("write_ms".into(), elapsed_ms(write_started));
    let mut manifest = Manifest::load_or_new(out)?;
    manifest.record(
        out,
        "explain",
        RunRecord {
            seed: cfg.seed,
            config: cfg.snapshot(),
            outputs: vec![ppm.clone(), png, txt],
            timings_ms: timings,
            notes,
        },
    )?;

    println!(
        "explained class {target} ({target_name}, {target_source}): f(full) = {:.4}, f(masked) = {:.4}",
        attribution.full, attribution.base
    );
    println!("wrote {ppm} (+ png, sidecar) in {}", out.display());
    Ok(())
}

fn sidecar_text(
    attribution: &AttributionMap,
    cfg: &RunConfig,
    image_path: &Path,
    ckpt: &Path,
    target_name: &str,
    target_source: &str,
    segments: usize,
) -> String {
    let mut text = String::new();
    text.push_str(&format!("image: {}\n", image_path.display()));
    text.push_str(&format!("checkpoint: {}\n", ckpt.display()));
    text.push_str(&format!("target_class: {}\n", attribution.target));
    text.push_str(&format!("target_name: {target_name}\n"));
    text.push_str(&format!("target_source: {target_source}\n"));
    text.push_str(&format!("grid: {}\n", cfg.grid));
    text.push_str(&format!("segments: {segments}\n"));
    text.push_str(&format!("budget: {}\n", cfg.budget));
    text.push_str(&format!("evaluated: {}\n", attribution.evaluated));
    text.push_str(&format!(
        "mode: {}\n",
        if attribution.exhaustive {
            "exhaustive"
        } else {
            "sampled"
        }
    ));
    text.push_str(&format!("base_value: {}\n", attribution.base));
    text.push_str(&format!("full_value: {}\n", attribution.full));
    text.push_str(&format!(
        "phi_sum: {}\n",
        attribution.phi.iter().sum::<f64>()
    ));
    text.push_str(&format!(
        "efficiency_gap: {}\n",
        attribution.efficiency_gap()
    ));
    for (i, phi) in attribution.phi.iter().enumerate() {
        text.push_str(&format!("segment {i}: {phi}\n"));
    }
    text
}
