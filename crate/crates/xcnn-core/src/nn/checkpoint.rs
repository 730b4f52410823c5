//! Single-file binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "XCNNCKPT"
//! version  u32      currently 1
//! checksum u64      FNV-1a over every byte that follows
//! desc_len u32      length of the architecture descriptor
//! desc     UTF-8    one line per fact: input, classes, class names, layers
//! epoch    u32      epoch the parameters were taken from (1-based)
//! val_loss f32      validation loss at that epoch
//! n_blobs  u32
//! blob*    u16 name length, name, u32 element count, elements as f32
//! ```
//!
//! The checksum is verified before anything is parsed, so a single flipped
//! bit anywhere in the payload is reported instead of silently loading as
//! slightly different weights.
//!
//! Blobs appear in layer order: `weight`/`bias` for conv and linear layers,
//! `gamma`/`beta`/`running_mean`/`running_var` for batch norm. Values are
//! stored as 32-bit floats regardless of the precision the model runs at,
//! so a checkpoint written by a wide-precision run loads everywhere.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tensor::{Element, Tensor};

use super::model::LayerState;
use super::{ArchitectureSpec, InputShape, LayerSpec, Model};

pub const MAGIC: &[u8; 8] = b"XCNNCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    /// 1-based epoch the snapshot was taken at; 0 for an untrained model.
    pub epoch: u32,
    pub val_loss: f32,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("invalid architecture descriptor: {0}")]
    Descriptor(String),
    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),
}

// ── Descriptor text ────────────────────────────────────────────────────

fn descriptor<E: Element>(model: &Model<E>) -> String {
    let spec = model.spec();
    let mut out = String::new();
    match spec.input {
        InputShape::Image {
            channels,
            height,
            width,
        } => out.push_str(&format!("input image {channels} {height} {width}\n")),
        InputShape::Features { dim } => out.push_str(&format!("input features {dim}\n")),
    }
    out.push_str(&format!("classes {}\n", spec.classes));
    for name in model.class_names() {
        out.push_str(&format!("class {name}\n"));
    }
    for layer in &spec.layers {
        match *layer {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => out.push_str(&format!(
                "layer conv2d {in_channels} {out_channels} {kernel} {stride} {padding}\n"
            )),
            LayerSpec::BatchNorm2d {
                channels,
                eps,
                momentum,
            } => out.push_str(&format!("layer batchnorm2d {channels} {eps} {momentum}\n")),
            LayerSpec::Relu => out.push_str("layer relu\n"),
            LayerSpec::MaxPool2x2 => out.push_str("layer maxpool2x2\n"),
            LayerSpec::Flatten => out.push_str("layer flatten\n"),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => out.push_str(&format!("layer linear {in_features} {out_features}\n")),
            LayerSpec::Dropout { rate } => out.push_str(&format!("layer dropout {rate}\n")),
            LayerSpec::Softmax => out.push_str("layer softmax\n"),
        }
    }
    out
}

fn parse_descriptor(text: &str) -> Result<(ArchitectureSpec, Vec<String>), CheckpointError> {
    let bad = |line: &str, why: &str| CheckpointError::Descriptor(format!("{why}: `{line}`"));
    let mut input = None;
    let mut classes = None;
    let mut class_names = Vec::new();
    let mut layers = Vec::new();

    fn ints<const N: usize>(
        parts: &[&str],
        line: &str,
    ) -> Result<[usize; N], CheckpointError> {
        if parts.len() != N {
            return Err(CheckpointError::Descriptor(format!(
                "expected {N} fields: `{line}`"
            )));
        }
        let mut out = [0usize; N];
        for (o, p) in out.iter_mut().zip(parts) {
            *o = p
                .parse()
                .map_err(|_| CheckpointError::Descriptor(format!("bad integer in `{line}`")))?;
        }
        Ok(out)
    }
    let float = |s: &str, line: &str| -> Result<f64, CheckpointError> {
        s.parse()
            .map_err(|_| CheckpointError::Descriptor(format!("bad number in `{line}`")))
    };

    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (word, rest) = line.split_once(' ').unwrap_or((line, ""));
        let parts: Vec<&str> = rest.split_whitespace().collect();
        match word {
            "input" => {
                input = Some(match parts.first().copied() {
                    Some("image") => {
                        let [c, h, w] = ints::<3>(&parts[1..], line)?;
                        InputShape::Image {
                            channels: c,
                            height: h,
                            width: w,
                        }
                    }
                    Some("features") => {
                        let [d] = ints::<1>(&parts[1..], line)?;
                        InputShape::Features { dim: d }
                    }
                    _ => return Err(bad(line, "unknown input kind")),
                })
            }
            "classes" => {
                let [k] = ints::<1>(&parts, line)?;
                classes = Some(k);
            }
            // Class names may contain spaces; everything after `class ` is
            // the name.
            "class" => class_names.push(rest.to_string()),
            "layer" => {
                let kind = parts.first().copied().ok_or_else(|| bad(line, "empty layer"))?;
                let args = &parts[1..];
                layers.push(match kind {
                    "conv2d" => {
                        let [i, o, k, s, p] = ints::<5>(args, line)?;
                        LayerSpec::Conv2d {
                            in_channels: i,
                            out_channels: o,
                            kernel: k,
                            stride: s,
                            padding: p,
                        }
                    }
                    "batchnorm2d" => {
                        if args.len() != 3 {
                            return Err(bad(line, "expected 3 fields"));
                        }
                        let [c] = ints::<1>(&args[..1], line)?;
                        LayerSpec::BatchNorm2d {
                            channels: c,
                            eps: float(args[1], line)?,
                            momentum: float(args[2], line)?,
                        }
                    }
                    "relu" => LayerSpec::Relu,
                    "maxpool2x2" => LayerSpec::MaxPool2x2,
                    "flatten" => LayerSpec::Flatten,
                    "linear" => {
                        let [i, o] = ints::<2>(args, line)?;
                        LayerSpec::Linear {
                            in_features: i,
                            out_features: o,
                        }
                    }
                    "dropout" => {
                        if args.len() != 1 {
                            return Err(bad(line, "expected 1 field"));
                        }
                        LayerSpec::Dropout {
                            rate: float(args[0], line)?,
                        }
                    }
                    "softmax" => LayerSpec::Softmax,
                    other => {
                        return Err(CheckpointError::Descriptor(format!(
                            "unknown layer kind `{other}`"
                        )))
                    }
                });
            }
            other => return Err(CheckpointError::Descriptor(format!("unknown line `{other}`"))),
        }
    }

    let input = input.ok_or_else(|| CheckpointError::Descriptor("missing input line".into()))?;
    let classes =
        classes.ok_or_else(|| CheckpointError::Descriptor("missing classes line".into()))?;
    if class_names.len() != classes {
        return Err(CheckpointError::Descriptor(format!(
            "{} class names for {classes} classes",
            class_names.len()
        )));
    }
    Ok((
        ArchitectureSpec {
            input,
            layers,
            classes,
        },
        class_names,
    ))
}

// ── Binary encoding ────────────────────────────────────────────────────

fn push_blob<E: Element>(out: &mut Vec<u8>, name: &str, values: &[E]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_f32().to_le_bytes());
    }
}

pub fn checkpoint_bytes<E: Element>(model: &Model<E>, meta: CheckpointMeta) -> Vec<u8> {
    let desc = descriptor(model);
    let mut blobs: Vec<(String, &[E])> = Vec::new();
    for (idx, state) in model.states.iter().enumerate() {
        match state {
            LayerState::Conv { weight, bias } | LayerState::Linear { weight, bias } => {
                blobs.push((format!("layer{idx}.weight"), weight.data()));
                blobs.push((format!("layer{idx}.bias"), bias.data()));
            }
            LayerState::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                blobs.push((format!("layer{idx}.gamma"), gamma.data()));
                blobs.push((format!("layer{idx}.beta"), beta.data()));
                blobs.push((format!("layer{idx}.running_mean"), running_mean));
                blobs.push((format!("layer{idx}.running_var"), running_var));
            }
            LayerState::Stateless => {}
        }
    }

    let mut payload = Vec::new();
    payload.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    payload.extend_from_slice(desc.as_bytes());
    payload.extend_from_slice(&meta.epoch.to_le_bytes());
    payload.extend_from_slice(&meta.val_loss.to_le_bytes());
    payload.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for (name, values) in blobs {
        push_blob(&mut payload, &name, values);
    }

    let mut out = Vec::with_capacity(payload.len() + 20);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&fnv1a(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

/// 64-bit FNV-1a; plenty to catch storage corruption.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &'static str) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn checkpoint_from_bytes<E: Element>(
    bytes: &[u8],
) -> Result<(Model<E>, CheckpointMeta), CheckpointError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let stored = cur.u64("checksum")?;
    let computed = fnv1a(&bytes[cur.pos..]);
    if stored != computed {
        return Err(CheckpointError::Integrity(format!(
            "checksum mismatch (stored {stored:#018x}, computed {computed:#018x}); the file is corrupt"
        )));
    }
    let desc_len = cur.u32("descriptor length")? as usize;
    let desc = std::str::from_utf8(cur.take(desc_len, "descriptor")?)
        .map_err(|_| CheckpointError::Descriptor("descriptor is not UTF-8".into()))?;
    let (spec, class_names) = parse_descriptor(desc)?;
    let meta = CheckpointMeta {
        epoch: cur.u32("epoch")?,
        val_loss: cur.f32("validation loss")?,
    };
    let n_blobs = cur.u32("blob count")?;

    let mut read_blob = |expected_name: String,
                         expected_len: usize,
                         remaining: &mut u32|
     -> Result<Vec<E>, CheckpointError> {
        if *remaining == 0 {
            return Err(CheckpointError::Integrity(format!(
                "missing blob {expected_name}"
            )));
        }
        *remaining -= 1;
        let name_len = cur.u16("blob name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "blob name")?)
            .map_err(|_| CheckpointError::Integrity("blob name is not UTF-8".into()))?;
        if name != expected_name {
            return Err(CheckpointError::Integrity(format!(
                "expected blob {expected_name}, found {name}"
            )));
        }
        let count = cur.u32("blob element count")? as usize;
        if count != expected_len {
            return Err(CheckpointError::Integrity(format!(
                "blob {name} holds {count} values, descriptor implies {expected_len}"
            )));
        }
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(E::from_f32(cur.f32("blob values")?));
        }
        Ok(values)
    };

    let mut remaining = n_blobs;
    let tensor = |shape: Vec<usize>, data: Vec<E>| {
        Tensor::new(shape, data)
            .map(|t| t.with_grad(true))
            .map_err(|e| CheckpointError::Integrity(e.to_string()))
    };
    let mut states = Vec::with_capacity(spec.layers.len());
    for (idx, layer) in spec.layers.iter().enumerate() {
        states.push(match *layer {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let w = read_blob(
                    format!("layer{idx}.weight"),
                    out_channels * in_channels * kernel * kernel,
                    &mut remaining,
                )?;
                let b = read_blob(format!("layer{idx}.bias"), out_channels, &mut remaining)?;
                LayerState::Conv {
                    weight: tensor(
                        vec![out_channels, in_channels, kernel, kernel],
                        w,
                    )?,
                    bias: tensor(vec![out_channels], b)?,
                }
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                let w = read_blob(
                    format!("layer{idx}.weight"),
                    out_features * in_features,
                    &mut remaining,
                )?;
                let b = read_blob(format!("layer{idx}.bias"), out_features, &mut remaining)?;
                LayerState::Linear {
                    weight: tensor(vec![out_features, in_features], w)?,
                    bias: tensor(vec![out_features], b)?,
                }
            }
            LayerSpec::BatchNorm2d { channels, .. } => {
                let gamma = read_blob(format!("layer{idx}.gamma"), channels, &mut remaining)?;
                let beta = read_blob(format!("layer{idx}.beta"), channels, &mut remaining)?;
                let rm = read_blob(
                    format!("layer{idx}.running_mean"),
                    channels,
                    &mut remaining,
                )?;
                let rv = read_blob(
                    format!("layer{idx}.running_var"),
                    channels,
                    &mut remaining,
                )?;
                LayerState::BatchNorm {
                    gamma: tensor(vec![channels], gamma)?,
                    beta: tensor(vec![channels], beta)?,
                    running_mean: rm,
                    running_var: rv,
                }
            }
            _ => LayerState::Stateless,
        });
    }
    if remaining != 0 {
        return Err(CheckpointError::Integrity(format!(
            "{remaining} unexpected extra blobs"
        )));
    }
    if cur.pos != bytes.len() {
        return Err(CheckpointError::Integrity(format!(
            "{} trailing bytes after the last blob",
            bytes.len() - cur.pos
        )));
    }
    let model = Model::from_parts(spec, class_names, states)
        .map_err(|e| CheckpointError::Descriptor(e.to_string()))?;
    Ok((model, meta))
}

pub fn save_checkpoint<E: Element>(
    model: &Model<E>,
    meta: CheckpointMeta,
    path: &Path,
) -> Result<(), CheckpointError> {
    Ok(fs::write(path, checkpoint_bytes(model, meta))?)
}

pub fn load_checkpoint<E: Element>(
    path: &Path,
) -> Result<(Model<E>, CheckpointMeta), CheckpointError> {
    checkpoint_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::super::Mode;
    use super::*;
    use crate::rng;
    use crate::tensor::GradTape;

    fn sample_model() -> Model<f32> {
        let mut m = Model::new(
            ArchitectureSpec::custom_cnn_for((16, 16), 3, 6).unwrap(),
            1234,
        )
        .unwrap();
        m.set_class_names(vec![
            "benign case".into(),
            "malignant case".into(),
            "normal case".into(),
        ])
        .unwrap();
        // Move the running statistics off their initial values so the test
        // covers buffer persistence too.
        let mut tape = GradTape::new();
        let bound = m.bind(&mut tape);
        let batch = Tensor::uniform(vec![2, 3, 16, 16], 0.0, 1.0, &mut rng::rng(5, &[6]));
        let x = tape.leaf(batch);
        m.forward(&mut tape, &bound, x, Mode::Train, 3).unwrap();
        m
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let model = sample_model();
        let meta = CheckpointMeta {
            epoch: 17,
            val_loss: 0.4375,
        };
        let bytes = checkpoint_bytes(&model, meta);
        let (loaded, got_meta) = checkpoint_from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(got_meta, meta);
        assert_eq!(loaded.class_names(), model.class_names());
        assert_eq!(loaded.spec(), model.spec());
        for ((na, ta), (_, tb)) in model.params().iter().zip(loaded.params().iter()) {
            assert_eq!(ta.data(), tb.data(), "{na} changed across the roundtrip");
        }
        // Serializing the loaded model reproduces the original bytes.
        assert_eq!(checkpoint_bytes(&loaded, got_meta), bytes);
    }

    #[test]
    fn prediction_survives_the_roundtrip() {
        let model = sample_model();
        let bytes = checkpoint_bytes(
            &model,
            CheckpointMeta {
                epoch: 1,
                val_loss: 1.0,
            },
        );
        let (loaded, _) = checkpoint_from_bytes::<f32>(&bytes).unwrap();
        let batch = Tensor::uniform(vec![2, 3, 16, 16], 0.0, 1.0, &mut rng::rng(8, &[1]));
        assert_eq!(
            model.predict(&batch).unwrap().data(),
            loaded.predict(&batch).unwrap().data()
        );
    }

    #[test]
    fn wide_models_load_from_f32_storage() {
        let model = sample_model();
        let bytes = checkpoint_bytes(
            &model,
            CheckpointMeta {
                epoch: 2,
                val_loss: 0.5,
            },
        );
        let (wide, _) = checkpoint_from_bytes::<f64>(&bytes).unwrap();
        for ((_, ta), (_, tb)) in model.params().iter().zip(wide.params().iter()) {
            for (&a, &b) in ta.data().iter().zip(tb.data()) {
                assert_eq!(a as f64, b);
            }
        }
    }

    #[test]
    fn truncation_is_reported() {
        let model = sample_model();
        let bytes = checkpoint_bytes(
            &model,
            CheckpointMeta {
                epoch: 1,
                val_loss: 1.0,
            },
        );
        // Header cut short: reported as truncation.
        for cut in [4, 9, 15] {
            assert!(matches!(
                checkpoint_from_bytes::<f32>(&bytes[..cut]),
                Err(CheckpointError::Truncated(_)),
            ));
        }
        // Payload cut short: the checksum no longer matches.
        for cut in [20, bytes.len() / 2, bytes.len() - 3] {
            assert!(matches!(
                checkpoint_from_bytes::<f32>(&bytes[..cut]),
                Err(CheckpointError::Integrity(_)),
            ));
        }
    }

    #[test]
    fn single_flipped_bit_is_detected() {
        let model = sample_model();
        let bytes = checkpoint_bytes(
            &model,
            CheckpointMeta {
                epoch: 1,
                val_loss: 1.0,
            },
        );
        // Flip one bit in the middle of the weight blobs, where the value
        // would otherwise decode as a perfectly valid float.
        let mut corrupt = bytes.clone();
        corrupt[bytes.len() * 3 / 4] ^= 0x10;
        match checkpoint_from_bytes::<f32>(&corrupt) {
            Err(CheckpointError::Integrity(msg)) => {
                assert!(msg.contains("checksum"), "{msg}")
            }
            other => panic!("corruption loaded as {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let model = sample_model();
        let meta = CheckpointMeta {
            epoch: 1,
            val_loss: 1.0,
        };
        let mut bytes = checkpoint_bytes(&model, meta);
        bytes[0] = b'Y';
        assert!(matches!(
            checkpoint_from_bytes::<f32>(&bytes),
            Err(CheckpointError::BadMagic)
        ));

        let mut bytes = checkpoint_bytes(&model, meta);
        bytes[8] = 9; // version
        assert!(matches!(
            checkpoint_from_bytes::<f32>(&bytes),
            Err(CheckpointError::Version(9))
        ));
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let model = sample_model();
        let mut bytes = checkpoint_bytes(
            &model,
            CheckpointMeta {
                epoch: 1,
                val_loss: 1.0,
            },
        );
        bytes.extend_from_slice(&[0, 1, 2, 3]);
        assert!(matches!(
            checkpoint_from_bytes::<f32>(&bytes),
            Err(CheckpointError::Integrity(_))
        ));
    }

    #[test]
    fn descriptor_errors_name_the_line() {
        let err = parse_descriptor("input image 3 8 8\nclasses 2\nclass a\nclass b\nlayer warp 3")
            .unwrap_err();
        assert!(err.to_string().contains("warp"), "{err}");
        assert!(parse_descriptor("classes 2\nclass a\nclass b").is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = sample_model();
        let meta = CheckpointMeta {
            epoch: 3,
            val_loss: 0.25,
        };
        save_checkpoint(&model, meta, &path).unwrap();
        let (loaded, got) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(got, meta);
        assert_eq!(loaded.params().len(), model.params().len());
    }
}
