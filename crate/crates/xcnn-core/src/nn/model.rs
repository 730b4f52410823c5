//! A spec bound to parameter tensors, with tape-recorded training forward
//! passes and a no-tape inference path that reuses the same kernels.

use crate::rng::{self, stream};
use crate::tensor::{
    argmax_row, batchnorm_apply, conv2d, linear, maxpool2x2, softmax_rows, Element, GradTape,
    NodeId, Tensor,
};

use super::{ArchitectureSpec, Classifier, DataShape, InputShape, LayerSpec, ModelError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub(super) enum LayerState<E: Element> {
    Conv {
        weight: Tensor<E>,
        bias: Tensor<E>,
    },
    BatchNorm {
        gamma: Tensor<E>,
        beta: Tensor<E>,
        running_mean: Vec<E>,
        running_var: Vec<E>,
    },
    Linear {
        weight: Tensor<E>,
        bias: Tensor<E>,
    },
    Stateless,
}

/// A model parameter registered on a tape, by name (`layer3.weight`, ...).
pub struct ParamBinding {
    pub name: String,
    pub node: NodeId,
}

enum BoundLayer {
    Pair { weight: NodeId, bias: NodeId },
    Affine { gamma: NodeId, beta: NodeId },
    None,
}

/// The tape nodes for every parameter of a model, produced by
/// [`Model::bind`]. `params` lists them flat, in the same order
/// [`Model::params_mut`] yields, so an optimizer can pair gradients with
/// parameter tensors positionally.
pub struct BoundParams {
    pub params: Vec<ParamBinding>,
    layers: Vec<BoundLayer>,
}

#[derive(Debug, Clone)]
pub struct Model<E: Element> {
    spec: ArchitectureSpec,
    class_names: Vec<String>,
    pub(super) states: Vec<LayerState<E>>,
}

impl<E: Element> Model<E> {
    /// Initializes parameters deterministically from `seed`: He-uniform
    /// weights (limit sqrt(6 / fan_in)), zero biases, unit batch-norm scale.
    /// Each layer draws from its own derived stream, so adding a layer does
    /// not disturb the others' draws.
    pub fn new(spec: ArchitectureSpec, seed: u64) -> Result<Self, ModelError> {
        spec.output_shapes()?;
        let states = spec
            .layers
            .iter()
            .enumerate()
            .map(|(idx, layer)| {
                let mut draw = rng::rng(seed, &[stream::INIT, idx as u64]);
                match *layer {
                    LayerSpec::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        ..
                    } => {
                        let limit = (6.0 / (in_channels * kernel * kernel) as f64).sqrt();
                        LayerState::Conv {
                            weight: Tensor::uniform(
                                vec![out_channels, in_channels, kernel, kernel],
                                -limit,
                                limit,
                                &mut draw,
                            )
                            .with_grad(true),
                            bias: Tensor::zeros(vec![out_channels]).with_grad(true),
                        }
                    }
                    LayerSpec::Linear {
                        in_features,
                        out_features,
                    } => {
                        let limit = (6.0 / in_features as f64).sqrt();
                        LayerState::Linear {
                            weight: Tensor::uniform(
                                vec![out_features, in_features],
                                -limit,
                                limit,
                                &mut draw,
                            )
                            .with_grad(true),
                            bias: Tensor::zeros(vec![out_features]).with_grad(true),
                        }
                    }
                    LayerSpec::BatchNorm2d { channels, .. } => LayerState::BatchNorm {
                        gamma: Tensor::full(vec![channels], E::ONE).with_grad(true),
                        beta: Tensor::zeros(vec![channels]).with_grad(true),
                        running_mean: vec![E::ZERO; channels],
                        running_var: vec![E::ONE; channels],
                    },
                    _ => LayerState::Stateless,
                }
            })
            .collect();
        let class_names = (0..spec.classes).map(|i| format!("class{i}")).collect();
        Ok(Model {
            spec,
            class_names,
            states,
        })
    }

    pub(super) fn from_parts(
        spec: ArchitectureSpec,
        class_names: Vec<String>,
        states: Vec<LayerState<E>>,
    ) -> Result<Self, ModelError> {
        spec.output_shapes()?;
        if class_names.len() != spec.classes {
            return Err(ModelError::ClassNames {
                expected: spec.classes,
                got: class_names.len(),
            });
        }
        Ok(Model {
            spec,
            class_names,
            states,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn set_class_names(&mut self, names: Vec<String>) -> Result<(), ModelError> {
        if names.len() != self.spec.classes {
            return Err(ModelError::ClassNames {
                expected: self.spec.classes,
                got: names.len(),
            });
        }
        self.class_names = names;
        Ok(())
    }

    pub fn parameter_count(&self) -> u64 {
        self.spec.total_parameters()
    }

    /// Flip `requires_grad` on every parameter; `false` freezes the model.
    pub fn set_trainable(&mut self, trainable: bool) {
        for (_, t) in self.params_mut() {
            t.requires_grad = trainable;
        }
    }

    /// All parameter tensors with their canonical names, layer order.
    pub fn params(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = Vec::new();
        for (idx, state) in self.states.iter().enumerate() {
            match state {
                LayerState::Conv { weight, bias } | LayerState::Linear { weight, bias } => {
                    out.push((format!("layer{idx}.weight"), weight));
                    out.push((format!("layer{idx}.bias"), bias));
                }
                LayerState::BatchNorm { gamma, beta, .. } => {
                    out.push((format!("layer{idx}.gamma"), gamma));
                    out.push((format!("layer{idx}.beta"), beta));
                }
                LayerState::Stateless => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out = Vec::new();
        for (idx, state) in self.states.iter_mut().enumerate() {
            match state {
                LayerState::Conv { weight, bias } | LayerState::Linear { weight, bias } => {
                    out.push((format!("layer{idx}.weight"), weight));
                    out.push((format!("layer{idx}.bias"), bias));
                }
                LayerState::BatchNorm { gamma, beta, .. } => {
                    out.push((format!("layer{idx}.gamma"), gamma));
                    out.push((format!("layer{idx}.beta"), beta));
                }
                LayerState::Stateless => {}
            }
        }
        out
    }

    /// Registers every parameter as a tape leaf. The tape works on copies;
    /// after `backward`, read gradients from the tape via the bindings and
    /// apply updates to the model's own tensors.
    pub fn bind(&self, tape: &mut GradTape<E>) -> BoundParams {
        let mut params = Vec::new();
        let mut layers = Vec::with_capacity(self.states.len());
        for (idx, state) in self.states.iter().enumerate() {
            layers.push(match state {
                LayerState::Conv { weight, bias } | LayerState::Linear { weight, bias } => {
                    let w = tape.leaf(weight.clone());
                    let b = tape.leaf(bias.clone());
                    params.push(ParamBinding {
                        name: format!("layer{idx}.weight"),
                        node: w,
                    });
                    params.push(ParamBinding {
                        name: format!("layer{idx}.bias"),
                        node: b,
                    });
                    BoundLayer::Pair { weight: w, bias: b }
                }
                LayerState::BatchNorm { gamma, beta, .. } => {
                    let g = tape.leaf(gamma.clone());
                    let bt = tape.leaf(beta.clone());
                    params.push(ParamBinding {
                        name: format!("layer{idx}.gamma"),
                        node: g,
                    });
                    params.push(ParamBinding {
                        name: format!("layer{idx}.beta"),
                        node: bt,
                    });
                    BoundLayer::Affine { gamma: g, beta: bt }
                }
                LayerState::Stateless => BoundLayer::None,
            });
        }
        BoundParams { params, layers }
    }

    fn check_batch_shape(&self, shape: &[usize]) -> Result<usize, ModelError> {
        let ok = match self.spec.input {
            InputShape::Image {
                channels,
                height,
                width,
            } => shape.len() == 4 && shape[1..] == [channels, height, width],
            InputShape::Features { dim } => shape.len() == 2 && shape[1] == dim,
        };
        if !ok {
            return Err(ModelError::InputMismatch {
                expected: self.spec.input.to_string(),
                got: shape.to_vec(),
            });
        }
        Ok(shape[0])
    }

    /// Runs the network on a tape. In train mode, batch norm consumes batch
    /// statistics (and this call updates the running averages) and dropout
    /// draws masks from streams derived per layer from `dropout_seed`; in
    /// eval mode both are deterministic. Returns the output node (class
    /// scores, or probabilities if the spec ends in softmax).
    pub fn forward(
        &mut self,
        tape: &mut GradTape<E>,
        bound: &BoundParams,
        input: NodeId,
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<NodeId, ModelError> {
        let n = self.check_batch_shape(tape.value(input).shape())?;
        let mut x = input;
        for idx in 0..self.spec.layers.len() {
            let layer = self.spec.layers[idx].clone();
            x = match (&layer, &bound.layers[idx]) {
                (
                    &LayerSpec::Conv2d {
                        stride, padding, ..
                    },
                    &BoundLayer::Pair { weight, bias },
                ) => tape.conv2d(x, weight, bias, stride, padding)?,
                (&LayerSpec::Linear { .. }, &BoundLayer::Pair { weight, bias }) => {
                    tape.linear(x, weight, bias)?
                }
                (
                    &LayerSpec::BatchNorm2d { eps, momentum, .. },
                    &BoundLayer::Affine { gamma, beta },
                ) => {
                    match mode {
                        Mode::Train => {
                            let out = tape.batchnorm_train(x, gamma, beta, eps)?;
                            if let LayerState::BatchNorm {
                                running_mean,
                                running_var,
                                ..
                            } = &mut self.states[idx]
                            {
                                let m = E::from_f64(momentum);
                                let keep = E::ONE - m;
                                for (r, &b) in running_mean.iter_mut().zip(&out.batch_mean) {
                                    *r = keep * *r + m * b;
                                }
                                for (r, &b) in running_var.iter_mut().zip(&out.batch_var) {
                                    *r = keep * *r + m * b;
                                }
                            }
                            out.node
                        }
                        Mode::Eval => {
                            let (rm, rv) = match &self.states[idx] {
                                LayerState::BatchNorm {
                                    running_mean,
                                    running_var,
                                    ..
                                } => (running_mean.clone(), running_var.clone()),
                                _ => unreachable!("bound layer is batch norm"),
                            };
                            tape.batchnorm_eval(x, gamma, beta, &rm, &rv, eps)?
                        }
                    }
                }
                (&LayerSpec::Relu, _) => tape.relu(x),
                (&LayerSpec::MaxPool2x2, _) => tape.maxpool2x2(x)?,
                (&LayerSpec::Flatten, _) => {
                    let numel = tape.value(x).numel();
                    tape.reshape(x, vec![n, numel / n])?
                }
                (&LayerSpec::Dropout { rate }, _) => match mode {
                    Mode::Train => tape.dropout(x, rate, rng::derive(dropout_seed, &[idx as u64]))?,
                    Mode::Eval => x,
                },
                (&LayerSpec::Softmax, _) => tape.softmax(x)?,
                _ => unreachable!("spec validated at construction"),
            };
        }
        Ok(x)
    }

    /// Inference without a tape: eval-mode batch norm, dropout as identity.
    /// Shares the forward kernels with the tape ops, so the outputs are
    /// bit-identical to an eval-mode [`Model::forward`].
    pub fn predict(&self, batch: &Tensor<E>) -> Result<Tensor<E>, ModelError> {
        let n = self.check_batch_shape(batch.shape())?;
        let mut cur = batch.data().to_vec();
        let mut shape = match self.spec.input {
            InputShape::Image {
                channels,
                height,
                width,
            } => DataShape::Chw(channels, height, width),
            InputShape::Features { dim } => DataShape::Flat(dim),
        };
        for (idx, layer) in self.spec.layers.iter().enumerate() {
            match (layer, &self.states[idx], shape) {
                (
                    &LayerSpec::Conv2d {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                        ..
                    },
                    LayerState::Conv { weight, bias },
                    DataShape::Chw(c, h, w),
                ) => {
                    let oh = (h + 2 * padding - kernel) / stride + 1;
                    let ow = (w + 2 * padding - kernel) / stride + 1;
                    let mut out = vec![E::ZERO; n * out_channels * oh * ow];
                    conv2d(
                        (n, c, h, w),
                        (out_channels, kernel, stride, padding),
                        &cur,
                        weight.data(),
                        bias.data(),
                        &mut out,
                    );
                    cur = out;
                    shape = DataShape::Chw(out_channels, oh, ow);
                }
                (
                    &LayerSpec::BatchNorm2d { eps, .. },
                    LayerState::BatchNorm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    },
                    DataShape::Chw(c, h, w),
                ) => {
                    let mean: Vec<f64> = running_mean.iter().map(|v| v.to_f64()).collect();
                    let inv_std: Vec<f64> = running_var
                        .iter()
                        .map(|&v| 1.0 / (v.to_f64() + eps).sqrt())
                        .collect();
                    let mut out = vec![E::ZERO; cur.len()];
                    batchnorm_apply(
                        (n, c, h, w),
                        &cur,
                        &mean,
                        &inv_std,
                        gamma.data(),
                        beta.data(),
                        &mut out,
                    );
                    cur = out;
                }
                (&LayerSpec::Relu, ..) => {
                    for v in cur.iter_mut() {
                        if *v < E::ZERO {
                            *v = E::ZERO;
                        }
                    }
                }
                (&LayerSpec::MaxPool2x2, _, DataShape::Chw(c, h, w)) => {
                    let mut out = vec![E::ZERO; n * c * (h / 2) * (w / 2)];
                    let mut argmax = vec![0usize; out.len()];
                    maxpool2x2((n, c, h, w), &cur, &mut out, &mut argmax);
                    cur = out;
                    shape = DataShape::Chw(c, h / 2, w / 2);
                }
                (&LayerSpec::Flatten, _, DataShape::Chw(c, h, w)) => {
                    shape = DataShape::Flat(c * h * w);
                }
                (
                    &LayerSpec::Linear {
                        in_features,
                        out_features,
                    },
                    LayerState::Linear { weight, bias },
                    DataShape::Flat(_),
                ) => {
                    let mut out = vec![E::ZERO; n * out_features];
                    linear(
                        n,
                        in_features,
                        out_features,
                        &cur,
                        weight.data(),
                        bias.data(),
                        &mut out,
                    );
                    cur = out;
                    shape = DataShape::Flat(out_features);
                }
                (&LayerSpec::Dropout { .. }, ..) => {}
                (&LayerSpec::Softmax, _, DataShape::Flat(d)) => {
                    let mut out = vec![E::ZERO; cur.len()];
                    softmax_rows(n, d, &cur, &mut out);
                    cur = out;
                }
                _ => unreachable!("spec validated at construction"),
            }
        }
        let d = match shape {
            DataShape::Flat(d) => d,
            DataShape::Chw(..) => unreachable!("spec ends flat"),
        };
        Ok(Tensor::new(vec![n, d], cur).expect("predict shape"))
    }

    /// Class probabilities: the network output, passed through softmax
    /// unless the spec already ends with one.
    pub fn predict_probs(&self, batch: &Tensor<E>) -> Result<Tensor<E>, ModelError> {
        let out = self.predict(batch)?;
        if matches!(self.spec.layers.last(), Some(LayerSpec::Softmax)) {
            Ok(out)
        } else {
            super::softmax_batch(&out)
        }
    }

    /// Argmax class per sample; ties resolve to the lowest class index.
    pub fn predict_classes(&self, batch: &Tensor<E>) -> Result<Vec<usize>, ModelError> {
        let probs = self.predict_probs(batch)?;
        let k = probs.shape()[1];
        Ok(probs.data().chunks(k).map(argmax_row).collect())
    }
}

impl<E: Element> Classifier<E> for Model<E> {
    fn classes(&self) -> usize {
        self.spec.classes
    }

    fn predict_probs(&self, batch: &Tensor<E>) -> Result<Tensor<E>, ModelError> {
        Model::predict_probs(self, batch)
    }
}
