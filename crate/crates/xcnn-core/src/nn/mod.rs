//! Layer specifications, shape propagation, and parameter accounting.
//!
//! An [`ArchitectureSpec`] is the symbolic description of a network: enough
//! to validate shapes, count parameters, and serialize into a checkpoint
//! descriptor without allocating any weights. [`Model`](model::Model) is a
//! spec plus its parameter tensors.

mod model;

pub mod checkpoint;

pub use model::{BoundParams, Mode, Model, ParamBinding};

use thiserror::Error;

use crate::tensor::{softmax_rows, Element, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
    #[error("layer {index} ({kind}): expected input {expected}, got {got}")]
    LayerMismatch {
        index: usize,
        kind: &'static str,
        expected: String,
        got: String,
    },
    #[error("batch shape {got:?} does not match the declared input ({expected})")]
    InputMismatch { expected: String, got: Vec<usize> },
    #[error("{expected} class names required, got {got}")]
    ClassNames { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One layer of a network. All geometry lives here; the parameter tensors
/// live in the [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm2d {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    Relu,
    MaxPool2x2,
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Dropout {
        rate: f64,
    },
    Softmax,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm2d { .. } => "batchnorm2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2x2 => "maxpool2x2",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Trainable parameters owned by this layer. Batch-norm running
    /// statistics are buffers, not parameters, and are not counted.
    pub fn parameter_count(&self) -> u64 {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (out_channels * in_channels * kernel * kernel + out_channels) as u64,
            LayerSpec::BatchNorm2d { channels, .. } => 2 * channels as u64,
            LayerSpec::Linear {
                in_features,
                out_features,
            } => (in_features * out_features + out_features) as u64,
            _ => 0,
        }
    }
}

/// What the network consumes: image batches or precomputed feature vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputShape {
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
    Features {
        dim: usize,
    },
}

impl std::fmt::Display for InputShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            InputShape::Image {
                channels,
                height,
                width,
            } => write!(f, "image {channels}x{height}x{width}"),
            InputShape::Features { dim } => write!(f, "features {dim}"),
        }
    }
}

/// Shape of the data flowing between layers (per sample, batch excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataShape {
    Chw(usize, usize, usize),
    Flat(usize),
}

impl std::fmt::Display for DataShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            DataShape::Chw(c, h, w) => write!(f, "{c}x{h}x{w}"),
            DataShape::Flat(d) => write!(f, "flat {d}"),
        }
    }
}

/// Per-layer parameter tally, in layer order; layers without parameters are
/// omitted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerParamCount {
    pub index: usize,
    pub kind: &'static str,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
}

impl ArchitectureSpec {
    /// The custom CNN at its native geometry: 3x256x256 input, three
    /// conv/BN/ReLU/pool blocks widening 6 -> 12 -> 32, a 5461-unit hidden
    /// layer with dropout 0.5, and a 3-class output.
    pub fn custom_cnn() -> Self {
        Self::custom_cnn_for((256, 256), 3, 5461).expect("native geometry is valid")
    }

    /// The same topology at other input sizes / widths. Height and width
    /// must be divisible by 8 (three 2x2 pools).
    pub fn custom_cnn_for(
        (height, width): (usize, usize),
        classes: usize,
        hidden: usize,
    ) -> Result<Self, ModelError> {
        if height % 8 != 0 || width % 8 != 0 || height == 0 || width == 0 {
            return Err(ModelError::InvalidSpec(format!(
                "input {height}x{width} must be divisible by 8 for three 2x2 pools"
            )));
        }
        if classes < 2 {
            return Err(ModelError::InvalidSpec(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        if hidden == 0 {
            return Err(ModelError::InvalidSpec("hidden width must be >= 1".into()));
        }
        let mut layers = Vec::new();
        let mut ch = 3;
        for out in [6, 12, 32] {
            layers.push(LayerSpec::Conv2d {
                in_channels: ch,
                out_channels: out,
                kernel: 3,
                stride: 1,
                padding: 1,
            });
            layers.push(LayerSpec::BatchNorm2d {
                channels: out,
                eps: 1e-5,
                momentum: 0.1,
            });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool2x2);
            ch = out;
        }
        let flat = 32 * (height / 8) * (width / 8);
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Linear {
            in_features: flat,
            out_features: hidden,
        });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Dropout { rate: 0.5 });
        layers.push(LayerSpec::Linear {
            in_features: hidden,
            out_features: classes,
        });
        Ok(ArchitectureSpec {
            input: InputShape::Image {
                channels: 3,
                height,
                width,
            },
            layers,
            classes,
        })
    }

    /// Classification head for precomputed feature vectors: a hidden layer
    /// with ReLU and dropout, then the class projection. `hidden == 0`
    /// collapses to a single linear layer.
    pub fn head(
        feature_dim: usize,
        hidden: usize,
        classes: usize,
        dropout: f64,
    ) -> Result<Self, ModelError> {
        if feature_dim == 0 {
            return Err(ModelError::InvalidSpec("feature dim must be >= 1".into()));
        }
        if classes < 2 {
            return Err(ModelError::InvalidSpec(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(ModelError::InvalidSpec(format!(
                "dropout rate {dropout} outside [0, 1)"
            )));
        }
        let mut layers = Vec::new();
        if hidden == 0 {
            layers.push(LayerSpec::Linear {
                in_features: feature_dim,
                out_features: classes,
            });
        } else {
            layers.push(LayerSpec::Linear {
                in_features: feature_dim,
                out_features: hidden,
            });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::Dropout { rate: dropout });
            layers.push(LayerSpec::Linear {
                in_features: hidden,
                out_features: classes,
            });
        }
        Ok(ArchitectureSpec {
            input: InputShape::Features { dim: feature_dim },
            layers,
            classes,
        })
    }

    /// Per-layer output shapes (sample-level), validating the whole chain.
    pub fn output_shapes(&self) -> Result<Vec<DataShape>, ModelError> {
        let mut cur = match self.input {
            InputShape::Image {
                channels,
                height,
                width,
            } => DataShape::Chw(channels, height, width),
            InputShape::Features { dim } => DataShape::Flat(dim),
        };
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            let mismatch = |expected: String| ModelError::LayerMismatch {
                index,
                kind: layer.kind(),
                expected,
                got: cur.to_string(),
            };
            cur = match (layer, cur) {
                (
                    &LayerSpec::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    DataShape::Chw(c, h, w),
                ) => {
                    if c != in_channels {
                        return Err(mismatch(format!("{in_channels} channels")));
                    }
                    if stride == 0 {
                        return Err(ModelError::InvalidSpec(format!(
                            "layer {index}: conv stride must be >= 1"
                        )));
                    }
                    let extent = |e: usize| -> Result<usize, ModelError> {
                        if e + 2 * padding < kernel
                            || (e + 2 * padding - kernel) % stride != 0
                        {
                            Err(mismatch(format!(
                                "extent compatible with k={kernel} s={stride} p={padding}"
                            )))
                        } else {
                            Ok((e + 2 * padding - kernel) / stride + 1)
                        }
                    };
                    DataShape::Chw(out_channels, extent(h)?, extent(w)?)
                }
                (&LayerSpec::BatchNorm2d { channels, .. }, DataShape::Chw(c, h, w)) => {
                    if c != channels {
                        return Err(mismatch(format!("{channels} channels")));
                    }
                    DataShape::Chw(c, h, w)
                }
                (&LayerSpec::MaxPool2x2, DataShape::Chw(c, h, w)) => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(mismatch("even spatial extents".into()));
                    }
                    DataShape::Chw(c, h / 2, w / 2)
                }
                (&LayerSpec::Flatten, DataShape::Chw(c, h, w)) => DataShape::Flat(c * h * w),
                (
                    &LayerSpec::Linear {
                        in_features,
                        out_features,
                    },
                    DataShape::Flat(d),
                ) => {
                    if d != in_features {
                        return Err(mismatch(format!("{in_features} features")));
                    }
                    DataShape::Flat(out_features)
                }
                (&LayerSpec::Softmax, DataShape::Flat(d)) => DataShape::Flat(d),
                (&LayerSpec::Relu, shape) => shape,
                (&LayerSpec::Dropout { rate }, shape) => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(ModelError::InvalidSpec(format!(
                            "layer {index}: dropout rate {rate} outside [0, 1)"
                        )));
                    }
                    shape
                }
                (layer, cur) => {
                    return Err(ModelError::LayerMismatch {
                        index,
                        kind: layer.kind(),
                        expected: match layer {
                            LayerSpec::Linear { .. } | LayerSpec::Softmax => {
                                "a flat input".into()
                            }
                            _ => "a CxHxW input".into(),
                        },
                        got: cur.to_string(),
                    })
                }
            };
            shapes.push(cur);
        }
        match shapes.last() {
            Some(&DataShape::Flat(d)) if d == self.classes => Ok(shapes),
            other => Err(ModelError::InvalidSpec(format!(
                "network must end with {} class scores, got {:?}",
                self.classes, other
            ))),
        }
    }

    /// Parameter tallies for the layers that own parameters, in layer order.
    pub fn parameter_counts(&self) -> Vec<LayerParamCount> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.parameter_count() > 0)
            .map(|(index, l)| LayerParamCount {
                index,
                kind: l.kind(),
                count: l.parameter_count(),
            })
            .collect()
    }

    pub fn total_parameters(&self) -> u64 {
        self.layers.iter().map(|l| l.parameter_count()).sum()
    }
}

/// Anything that maps a batch to class probabilities: real models, and the
/// stub models the metric tests drive.
pub trait Classifier<E: Element> {
    fn classes(&self) -> usize;
    fn predict_probs(&self, batch: &Tensor<E>) -> Result<Tensor<E>, ModelError>;
}

/// Row-wise softmax as a free function, for classifiers that produce raw
/// scores.
pub fn softmax_batch<E: Element>(logits: &Tensor<E>) -> Result<Tensor<E>, ModelError> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(ModelError::InputMismatch {
            expected: "a [batch, classes] tensor".into(),
            got: shape.to_vec(),
        });
    }
    let (n, k) = (shape[0], shape[1]);
    let mut out = vec![E::ZERO; n * k];
    softmax_rows(n, k, logits.data(), &mut out);
    Ok(Tensor::new(vec![n, k], out).expect("softmax shape"))
}
