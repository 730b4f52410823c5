//! The operation tape and reverse-mode gradients.
//!
//! A [`GradTape`] owns every tensor produced during a forward pass, in the
//! order the ops were recorded. `backward` walks the tape from the scalar
//! root down to index 0, accumulating gradient buffers; a tensor consumed by
//! several ops therefore receives the sum of all its downstream
//! contributions. Subgraphs that cannot reach a `requires_grad` tensor are
//! pruned and cost nothing during the reverse pass.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::{Element, Tensor, TensorError};

/// Handle to a tensor on a [`GradTape`]. Only meaningful for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Binary/unary elementwise op selector, for callers that dispatch
/// dynamically (the CLI and the layer runner use the typed methods below).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Relu,
    Exp,
    Log,
}

/// How the right-hand operand of a binary op maps onto the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs is a single element
    Scalar,
    /// lhs is [n, f], rhs is [f]
    Feature,
    /// lhs is [n, c, h, w], rhs is [c]
    Channel,
}

enum Op<E: Element> {
    Leaf,
    Add(NodeId, NodeId, Broadcast),
    Sub(NodeId, NodeId, Broadcast),
    Mul(NodeId, NodeId, Broadcast),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    MatMul(NodeId, NodeId),
    Reshape(NodeId),
    SumAll(NodeId),
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    MaxPool2x2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    /// Train-mode batch norm: gradients flow through the batch statistics.
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Eval-mode batch norm: the normalization statistics are constants.
    BatchNormFixed {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        input: NodeId,
        mask: Vec<bool>,
        inv_keep: E,
    },
    Softmax(NodeId),
    WeightedCe {
        logits: NodeId,
        labels: Vec<usize>,
        sample_weights: Vec<E>,
        weight_sum: E,
    },
}

struct Node<E: Element> {
    tensor: Tensor<E>,
    op: Op<E>,
}

/// Train-mode batch norm output: the tape node plus the batch statistics the
/// caller needs for its running-average update.
pub struct BatchNormOut<E: Element> {
    pub node: NodeId,
    pub batch_mean: Vec<E>,
    pub batch_var: Vec<E>,
}

pub struct GradTape<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for GradTape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> GradTape<E> {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. Its `requires_grad` flag decides whether
    /// backward will populate its gradient.
    pub fn leaf(&mut self, tensor: Tensor<E>) -> NodeId {
        let requires = tensor.requires_grad;
        self.push(tensor, requires, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].tensor
    }

    /// Gradient of the tensor at `id`, populated by `backward` when the
    /// tensor requires grad and is reachable from the root.
    pub fn grad(&self, id: NodeId) -> Option<&[E]> {
        self.nodes[id.0].tensor.grad()
    }

    fn push(&mut self, mut tensor: Tensor<E>, requires: bool, op: Op<E>) -> NodeId {
        tensor.requires_grad = requires;
        self.nodes.push(Node { tensor, op });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    fn data(&self, id: NodeId) -> &[E] {
        self.nodes[id.0].tensor.data()
    }

    // ── Elementwise ────────────────────────────────────────────────────

    fn broadcast(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<Broadcast, TensorError> {
        let (la, lb) = (self.shape(a), self.shape(b));
        if la == lb {
            return Ok(Broadcast::Same);
        }
        if self.data(b).len() == 1 {
            return Ok(Broadcast::Scalar);
        }
        if la.len() == 2 && lb == [la[1]] {
            return Ok(Broadcast::Feature);
        }
        if la.len() == 4 && lb == [la[1]] {
            return Ok(Broadcast::Channel);
        }
        Err(TensorError::ShapeMismatch {
            op,
            lhs: la.to_vec(),
            rhs: lb.to_vec(),
        })
    }

    /// Value of the rhs element aligned with flat index `i` of the lhs.
    fn bcast_at(pattern: Broadcast, shape_a: &[usize], b: &[E], i: usize) -> E {
        match pattern {
            Broadcast::Same => b[i],
            Broadcast::Scalar => b[0],
            Broadcast::Feature => b[i % shape_a[1]],
            Broadcast::Channel => {
                let plane = shape_a[2] * shape_a[3];
                b[(i / plane) % shape_a[1]]
            }
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(E, E) -> E,
        make: impl Fn(NodeId, NodeId, Broadcast) -> Op<E>,
    ) -> Result<NodeId, TensorError> {
        let pattern = self.broadcast(name, a, b)?;
        let shape_a = self.shape(a).to_vec();
        let out: Vec<E> = {
            let (da, db) = (self.data(a), self.data(b));
            da.iter()
                .enumerate()
                .map(|(i, &av)| f(av, Self::bcast_at(pattern, &shape_a, db, i)))
                .collect()
        };
        let requires = self.requires(a) || self.requires(b);
        let t = Tensor::new(shape_a, out).expect("binary op preserves lhs shape");
        Ok(self.push(t, requires, make(a, b, pattern)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out: Vec<E> = self
            .data(a)
            .iter()
            .map(|&v| v.maximum(E::ZERO))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        let requires = self.requires(a);
        self.push(t, requires, Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out: Vec<E> = self.data(a).iter().map(|&v| v.exp()).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        let requires = self.requires(a);
        self.push(t, requires, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        for (i, &v) in self.data(a).iter().enumerate() {
            if v <= E::ZERO {
                return Err(TensorError::LogDomain {
                    index: i,
                    value: v.to_f64(),
                });
            }
        }
        let out: Vec<E> = self.data(a).iter().map(|&v| v.ln()).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        let requires = self.requires(a);
        Ok(self.push(t, requires, Op::Log(a)))
    }

    /// Dynamic dispatch over the elementwise ops. Unary kinds ignore `b`;
    /// binary kinds require it.
    pub fn elementwise(
        &mut self,
        kind: ElementwiseKind,
        a: NodeId,
        b: Option<NodeId>,
    ) -> Result<NodeId, TensorError> {
        let need_b = |b: Option<NodeId>| {
            b.ok_or_else(|| {
                TensorError::Contract(format!("elementwise {kind:?} needs a second operand"))
            })
        };
        match kind {
            ElementwiseKind::Add => self.add(a, need_b(b)?),
            ElementwiseKind::Sub => self.sub(a, need_b(b)?),
            ElementwiseKind::Mul => self.mul(a, need_b(b)?),
            ElementwiseKind::Relu => Ok(self.relu(a)),
            ElementwiseKind::Exp => Ok(self.exp(a)),
            ElementwiseKind::Log => self.log(a),
        }
    }

    // ── Structural ops ─────────────────────────────────────────────────

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let t = Tensor::new(shape, self.data(a).to_vec())?;
        let requires = self.requires(a);
        Ok(self.push(t, requires, Op::Reshape(a)))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.data(a).iter().map(|v| v.to_f64()).sum();
        let requires = self.requires(a);
        self.push(Tensor::scalar(E::from_f64(s)), requires, Op::SumAll(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "matmul",
                expected: "two rank-2 tensors",
                got: if sa.len() != 2 { sa.to_vec() } else { sb.to_vec() },
            });
        }
        if sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::ZERO; m * n];
        kernels::matmul(m, k, n, self.data(a), self.data(b), &mut out);
        let t = Tensor::new(vec![m, n], out).expect("matmul shape");
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(t, requires, Op::MatMul(a, b)))
    }

    // ── Layer ops ──────────────────────────────────────────────────────

    pub fn linear(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, TensorError> {
        let (sx, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        if sx.len() != 2 || sw.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "linear",
                expected: "rank-2 input and weight",
                got: if sx.len() != 2 { sx.to_vec() } else { sw.to_vec() },
            });
        }
        if sx[1] != sw[1] || sb != [sw[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (n, f, o) = (sx[0], sx[1], sw[0]);
        let mut out = vec![E::ZERO; n * o];
        kernels::linear(n, f, o, self.data(input), self.data(weight), self.data(bias), &mut out);
        let t = Tensor::new(vec![n, o], out).expect("linear shape");
        let requires = self.requires(input) || self.requires(weight) || self.requires(bias);
        Ok(self.push(t, requires, Op::Linear { input, weight, bias }))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, TensorError> {
        let (sx, sw) = (self.shape(input), self.shape(weight));
        if sx.len() != 4 || sw.len() != 4 {
            return Err(TensorError::RankMismatch {
                op: "conv2d",
                expected: "rank-4 input and kernel",
                got: if sx.len() != 4 { sx.to_vec() } else { sw.to_vec() },
            });
        }
        if sw[2] != sw[3] {
            return Err(TensorError::RankMismatch {
                op: "conv2d",
                expected: "a square kernel",
                got: sw.to_vec(),
            });
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oc, k) = (sw[0], sw[2]);
        if sw[1] != c {
            return Err(TensorError::ChannelMismatch { input: c, kernel: sw[1] });
        }
        if self.shape(bias) != [oc] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![oc],
                rhs: self.shape(bias).to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::Contract("conv2d stride must be >= 1".into()));
        }
        for extent in [h, w] {
            if extent + 2 * padding < k || (extent + 2 * padding - k) % stride != 0 {
                return Err(TensorError::ConvGeometry {
                    extent,
                    kernel: k,
                    stride,
                    padding,
                });
            }
        }
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;
        let mut out = vec![E::ZERO; n * oc * oh * ow];
        kernels::conv2d(
            (n, c, h, w),
            (oc, k, stride, padding),
            self.data(input),
            self.data(weight),
            self.data(bias),
            &mut out,
        );
        let t = Tensor::new(vec![n, oc, oh, ow], out).expect("conv shape");
        let requires = self.requires(input) || self.requires(weight) || self.requires(bias);
        Ok(self.push(
            t,
            requires,
            Op::Conv2d { input, weight, bias, stride, padding },
        ))
    }

    pub fn maxpool2x2(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let sx = self.shape(input);
        if sx.len() != 4 {
            return Err(TensorError::RankMismatch {
                op: "maxpool2x2",
                expected: "a rank-4 input",
                got: sx.to_vec(),
            });
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::OddPoolExtent { h, w });
        }
        let mut out = vec![E::ZERO; n * c * (h / 2) * (w / 2)];
        let mut argmax = vec![0usize; out.len()];
        kernels::maxpool2x2((n, c, h, w), self.data(input), &mut out, &mut argmax);
        let t = Tensor::new(vec![n, c, h / 2, w / 2], out).expect("pool shape");
        let requires = self.requires(input);
        Ok(self.push(t, requires, Op::MaxPool2x2 { input, argmax }))
    }

    fn batchnorm_shapes(
        &self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<(usize, usize, usize, usize), TensorError> {
        let sx = self.shape(input);
        if sx.len() != 4 {
            return Err(TensorError::RankMismatch {
                op: "batchnorm2d",
                expected: "a rank-4 input",
                got: sx.to_vec(),
            });
        }
        let c = sx[1];
        for id in [gamma, beta] {
            if self.shape(id) != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "batchnorm2d affine",
                    lhs: vec![c],
                    rhs: self.shape(id).to_vec(),
                });
            }
        }
        Ok((sx[0], c, sx[2], sx[3]))
    }

    /// Train-mode batch norm: normalizes with the batch statistics and
    /// returns them so the caller can update its running averages.
    pub fn batchnorm_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<BatchNormOut<E>, TensorError> {
        let dims = self.batchnorm_shapes(input, gamma, beta)?;
        let (n, c, h, w) = dims;
        if n * h * w < 2 {
            return Err(TensorError::DegenerateBatch(n * h * w));
        }
        let (mean, var) = kernels::channel_stats(dims, self.data(input));
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![E::ZERO; n * c * h * w];
        kernels::batchnorm_apply(
            dims,
            self.data(input),
            &mean,
            &inv_std,
            self.data(gamma),
            self.data(beta),
            &mut out,
        );
        let t = Tensor::new(vec![n, c, h, w], out).expect("bn shape");
        let requires = self.requires(input) || self.requires(gamma) || self.requires(beta);
        let batch_mean = mean.iter().map(|&v| E::from_f64(v)).collect();
        let batch_var = var.iter().map(|&v| E::from_f64(v)).collect();
        let node = self.push(
            t,
            requires,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            },
        );
        Ok(BatchNormOut {
            node,
            batch_mean,
            batch_var,
        })
    }

    /// Eval-mode batch norm: normalizes with fixed running statistics, which
    /// act as constants under differentiation.
    pub fn batchnorm_eval(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[E],
        running_var: &[E],
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let dims = self.batchnorm_shapes(input, gamma, beta)?;
        let (n, c, h, w) = dims;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm2d running stats",
                lhs: vec![c],
                rhs: vec![running_mean.len(), running_var.len()],
            });
        }
        let mean: Vec<f64> = running_mean.iter().map(|v| v.to_f64()).collect();
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|&v| 1.0 / (v.to_f64() + eps).sqrt())
            .collect();
        let mut out = vec![E::ZERO; n * c * h * w];
        kernels::batchnorm_apply(
            dims,
            self.data(input),
            &mean,
            &inv_std,
            self.data(gamma),
            self.data(beta),
            &mut out,
        );
        let t = Tensor::new(vec![n, c, h, w], out).expect("bn shape");
        let requires = self.requires(input) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            t,
            requires,
            Op::BatchNormFixed {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            },
        ))
    }

    /// Inverted dropout: drops each element with probability `rate` and
    /// scales survivors by 1/(1-rate) so the expectation is unchanged. The
    /// mask is drawn from a generator seeded with `seed` only.
    pub fn dropout(&mut self, input: NodeId, rate: f64, seed: u64) -> Result<NodeId, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::DropoutRate(rate));
        }
        let n = self.data(input).len();
        let (mask, inv_keep) = if rate == 0.0 {
            (vec![true; n], E::ONE)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() >= rate).collect();
            (mask, E::from_f64(1.0 / (1.0 - rate)))
        };
        let out: Vec<E> = self
            .data(input)
            .iter()
            .zip(&mask)
            .map(|(&v, &keep)| if keep { v * inv_keep } else { E::ZERO })
            .collect();
        let t = Tensor::new(self.shape(input).to_vec(), out).expect("same shape");
        let requires = self.requires(input);
        Ok(self.push(t, requires, Op::Dropout { input, mask, inv_keep }))
    }

    /// Row-wise softmax over a [n, k] tensor, computed with max subtraction.
    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let sx = self.shape(input);
        if sx.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "softmax",
                expected: "a rank-2 input",
                got: sx.to_vec(),
            });
        }
        let (n, k) = (sx[0], sx[1]);
        let mut out = vec![E::ZERO; n * k];
        kernels::softmax_rows(n, k, self.data(input), &mut out);
        let t = Tensor::new(vec![n, k], out).expect("softmax shape");
        let requires = self.requires(input);
        Ok(self.push(t, requires, Op::Softmax(input)))
    }

    /// Class-weighted cross entropy over a batch of logits:
    ///
    ///   L = sum_i w[y_i] * (-log softmax(z_i)[y_i]) / sum_i w[y_i]
    ///
    /// The per-sample log-probabilities are computed with max subtraction;
    /// normalizing by the weight sum (not the batch size) keeps the loss
    /// scale comparable across differently weighted batches.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        class_weights: &[E],
    ) -> Result<NodeId, TensorError> {
        let sx = self.shape(logits);
        if sx.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "weighted_cross_entropy",
                expected: "rank-2 logits",
                got: sx.to_vec(),
            });
        }
        let (n, k) = (sx[0], sx[1]);
        if labels.len() != n {
            return Err(TensorError::Contract(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        if class_weights.len() != k {
            return Err(TensorError::Contract(format!(
                "{} class weights for {k} classes",
                class_weights.len()
            )));
        }
        if class_weights.iter().any(|w| !(*w > E::ZERO)) {
            return Err(TensorError::Contract(
                "class weights must be strictly positive".into(),
            ));
        }
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(TensorError::LabelRange {
                    label: y,
                    classes: k,
                    index: i,
                });
            }
        }
        let z = self.data(logits);
        let mut loss = 0.0f64;
        let mut weight_sum = E::ZERO;
        let mut sample_weights = Vec::with_capacity(n);
        for (i, &y) in labels.iter().enumerate() {
            let row = &z[i * k..(i + 1) * k];
            let mut mx = row[0];
            for &v in row {
                mx = mx.maximum(v);
            }
            let mut sum = 0.0f64;
            for &v in row {
                sum += (v - mx).to_f64().exp();
            }
            let log_py = (row[y] - mx).to_f64() - sum.ln();
            let w = class_weights[y];
            loss += w.to_f64() * -log_py;
            weight_sum += w;
            sample_weights.push(w);
        }
        loss /= weight_sum.to_f64();
        let requires = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(E::from_f64(loss)),
            requires,
            Op::WeightedCe {
                logits,
                labels: labels.to_vec(),
                sample_weights,
                weight_sum,
            },
        ))
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse pass from a scalar root. Gradients accumulate additively into
    /// every `requires_grad` tensor reachable from the root; calling
    /// backward twice doubles them.
    pub fn backward(&mut self, root: NodeId) -> Result<(), TensorError> {
        if self.nodes[root.0].tensor.numel() != 1 {
            return Err(TensorError::NonScalarRoot(
                self.shape(root).to_vec(),
            ));
        }
        let mut grads: Vec<Option<Vec<E>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![E::ONE]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            let node = &mut self.nodes[idx];
            if node.tensor.requires_grad {
                node.tensor.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    /// Push the gradient `g` of node `idx` into its inputs' buffers.
    ///
    /// Reductions whose length scales with tensor size accumulate in f64,
    /// mirroring the forward kernels; fixed-width sums (softmax rows and the
    /// per-sample loss terms) stay in the element type.
    fn propagate(&self, idx: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let nodes = &self.nodes;
        // Lazily created gradient buffer of `id`; None for pruned subgraphs.
        fn slot<'a, E: Element>(
            nodes: &[Node<E>],
            grads: &'a mut [Option<Vec<E>>],
            id: NodeId,
        ) -> Option<&'a mut [E]> {
            if !nodes[id.0].tensor.requires_grad {
                return None;
            }
            Some(
                grads[id.0]
                    .get_or_insert_with(|| vec![E::ZERO; nodes[id.0].tensor.numel()])
                    .as_mut_slice(),
            )
        }
        macro_rules! into_grad {
            ($id:expr, |$b:ident| $body:expr) => {
                if let Some($b) = slot(nodes, grads, $id) {
                    $body
                }
            };
        }

        match &nodes[idx].op {
            Op::Leaf => {}

            Op::Add(a, b, pattern) => {
                into_grad!(*a, |ga| {
                    for (gi, &gv) in ga.iter_mut().zip(g) {
                        *gi += gv;
                    }
                });
                let shape_a = nodes[a.0].tensor.shape();
                into_grad!(*b, |gb| Self::reduce_into(*pattern, shape_a, g, gb, 1.0));
            }
            Op::Sub(a, b, pattern) => {
                into_grad!(*a, |ga| {
                    for (gi, &gv) in ga.iter_mut().zip(g) {
                        *gi += gv;
                    }
                });
                let shape_a = nodes[a.0].tensor.shape();
                into_grad!(*b, |gb| Self::reduce_into(*pattern, shape_a, g, gb, -1.0));
            }
            Op::Mul(a, b, pattern) => {
                let shape_a = nodes[a.0].tensor.shape();
                let (da, db) = (nodes[a.0].tensor.data(), nodes[b.0].tensor.data());
                into_grad!(*a, |ga| {
                    for (i, (gi, &gv)) in ga.iter_mut().zip(g).enumerate() {
                        *gi += gv * Self::bcast_at(*pattern, shape_a, db, i);
                    }
                });
                into_grad!(*b, |gb| {
                    // d/db of a*b is a, reduced over the broadcast axes.
                    match pattern {
                        Broadcast::Same => {
                            for ((gi, &gv), &av) in gb.iter_mut().zip(g).zip(da) {
                                *gi += gv * av;
                            }
                        }
                        Broadcast::Scalar => {
                            let mut acc = 0.0f64;
                            for (&gv, &av) in g.iter().zip(da) {
                                acc += gv.to_f64() * av.to_f64();
                            }
                            gb[0] += E::from_f64(acc);
                        }
                        Broadcast::Feature => {
                            let f = shape_a[1];
                            let mut acc = vec![0.0f64; f];
                            for (i, (&gv, &av)) in g.iter().zip(da).enumerate() {
                                acc[i % f] += gv.to_f64() * av.to_f64();
                            }
                            for (o, &v) in gb.iter_mut().zip(&acc) {
                                *o += E::from_f64(v);
                            }
                        }
                        Broadcast::Channel => {
                            let plane = shape_a[2] * shape_a[3];
                            let c = shape_a[1];
                            let mut acc = vec![0.0f64; c];
                            for (i, (&gv, &av)) in g.iter().zip(da).enumerate() {
                                acc[(i / plane) % c] += gv.to_f64() * av.to_f64();
                            }
                            for (o, &v) in gb.iter_mut().zip(&acc) {
                                *o += E::from_f64(v);
                            }
                        }
                    }
                });
            }

            Op::Relu(a) => {
                let da = nodes[a.0].tensor.data();
                into_grad!(*a, |ga| {
                    for ((gi, &gv), &av) in ga.iter_mut().zip(g).zip(da) {
                        if av > E::ZERO {
                            *gi += gv;
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let y = nodes[idx].tensor.data();
                into_grad!(*a, |ga| {
                    for ((gi, &gv), &yv) in ga.iter_mut().zip(g).zip(y) {
                        *gi += gv * yv;
                    }
                });
            }
            Op::Log(a) => {
                let da = nodes[a.0].tensor.data();
                into_grad!(*a, |ga| {
                    for ((gi, &gv), &av) in ga.iter_mut().zip(g).zip(da) {
                        *gi += gv / av;
                    }
                });
            }

            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].tensor.shape(), nodes[b.0].tensor.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (nodes[a.0].tensor.data(), nodes[b.0].tensor.data());
                into_grad!(*a, |ga| {
                    // dA[i,p] += sum_j G[i,j] B[p,j]
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0f64;
                            for j in 0..n {
                                acc += g[i * n + j].to_f64() * db[p * n + j].to_f64();
                            }
                            ga[i * k + p] += E::from_f64(acc);
                        }
                    }
                });
                into_grad!(*b, |gb| {
                    // dB[p,j] += sum_i A[i,p] G[i,j]
                    let mut acc = vec![0.0f64; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = da[i * k + p].to_f64();
                            for j in 0..n {
                                acc[p * n + j] += av * g[i * n + j].to_f64();
                            }
                        }
                    }
                    for (o, &v) in gb.iter_mut().zip(&acc) {
                        *o += E::from_f64(v);
                    }
                });
            }

            Op::Reshape(a) => {
                into_grad!(*a, |ga| {
                    for (gi, &gv) in ga.iter_mut().zip(g) {
                        *gi += gv;
                    }
                });
            }
            Op::SumAll(a) => {
                let gv = g[0];
                into_grad!(*a, |ga| {
                    for gi in ga.iter_mut() {
                        *gi += gv;
                    }
                });
            }

            Op::Linear { input, weight, bias } => {
                let sx = nodes[input.0].tensor.shape();
                let sw = nodes[weight.0].tensor.shape();
                let (n, f, o) = (sx[0], sx[1], sw[0]);
                let dx = nodes[input.0].tensor.data();
                let dw = nodes[weight.0].tensor.data();
                into_grad!(*input, |gx| {
                    // dX[i,f] += sum_o G[i,o] W[o,f]
                    let mut acc = vec![0.0f64; f];
                    for i in 0..n {
                        for v in acc.iter_mut() {
                            *v = 0.0;
                        }
                        for j in 0..o {
                            let gv = g[i * o + j].to_f64();
                            let wrow = &dw[j * f..(j + 1) * f];
                            for (d, &wv) in acc.iter_mut().zip(wrow) {
                                *d += gv * wv.to_f64();
                            }
                        }
                        for (d, &v) in gx[i * f..(i + 1) * f].iter_mut().zip(&acc) {
                            *d += E::from_f64(v);
                        }
                    }
                });
                into_grad!(*weight, |gw| {
                    // dW[o,f] += sum_i G[i,o] X[i,f], one f-wide row buffer at
                    // a time so the f64 staging never exceeds one weight row.
                    let mut acc = vec![0.0f64; f];
                    for j in 0..o {
                        for v in acc.iter_mut() {
                            *v = 0.0;
                        }
                        for i in 0..n {
                            let gv = g[i * o + j].to_f64();
                            let xrow = &dx[i * f..(i + 1) * f];
                            for (d, &xv) in acc.iter_mut().zip(xrow) {
                                *d += gv * xv.to_f64();
                            }
                        }
                        for (d, &v) in gw[j * f..(j + 1) * f].iter_mut().zip(&acc) {
                            *d += E::from_f64(v);
                        }
                    }
                });
                into_grad!(*bias, |gb| {
                    let mut acc = vec![0.0f64; o];
                    for i in 0..n {
                        for j in 0..o {
                            acc[j] += g[i * o + j].to_f64();
                        }
                    }
                    for (d, &v) in gb.iter_mut().zip(&acc) {
                        *d += E::from_f64(v);
                    }
                });
            }

            Op::Conv2d { input, weight, bias, stride, padding } => {
                let sx = nodes[input.0].tensor.shape();
                let sw = nodes[weight.0].tensor.shape();
                let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let (oc, k) = (sw[0], sw[2]);
                let (s, p) = (*stride, *padding);
                let oh = (h + 2 * p - k) / s + 1;
                let ow = (w + 2 * p - k) / s + 1;
                let x = nodes[input.0].tensor.data();
                let wt = nodes[weight.0].tensor.data();

                into_grad!(*bias, |gb| {
                    let mut acc = vec![0.0f64; oc];
                    for ni in 0..n {
                        for o in 0..oc {
                            let base = ((ni * oc + o) * oh) * ow;
                            for &gv in &g[base..base + oh * ow] {
                                acc[o] += gv.to_f64();
                            }
                        }
                    }
                    for (d, &v) in gb.iter_mut().zip(&acc) {
                        *d += E::from_f64(v);
                    }
                });
                // One mirrored pass over the forward loop accumulates both
                // the kernel and the input gradients into local buffers.
                let want_x = nodes[input.0].tensor.requires_grad;
                let want_w = nodes[weight.0].tensor.requires_grad;
                if want_x || want_w {
                    let mut gx = if want_x { vec![0.0f64; x.len()] } else { Vec::new() };
                    let mut gw = if want_w { vec![0.0f64; wt.len()] } else { Vec::new() };
                    for ni in 0..n {
                        for o in 0..oc {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = g[((ni * oc + o) * oh + oy) * ow + ox].to_f64();
                                    for ci in 0..c {
                                        for ky in 0..k {
                                            let iy = oy * s + ky;
                                            if iy < p || iy - p >= h {
                                                continue;
                                            }
                                            let iy = iy - p;
                                            for kx in 0..k {
                                                let ix = ox * s + kx;
                                                if ix < p || ix - p >= w {
                                                    continue;
                                                }
                                                let ix = ix - p;
                                                let xi = ((ni * c + ci) * h + iy) * w + ix;
                                                let wi = ((o * c + ci) * k + ky) * k + kx;
                                                if want_w {
                                                    gw[wi] += gv * x[xi].to_f64();
                                                }
                                                if want_x {
                                                    gx[xi] += gv * wt[wi].to_f64();
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    into_grad!(*input, |buf| {
                        for (b, &v) in buf.iter_mut().zip(&gx) {
                            *b += E::from_f64(v);
                        }
                    });
                    into_grad!(*weight, |buf| {
                        for (b, &v) in buf.iter_mut().zip(&gw) {
                            *b += E::from_f64(v);
                        }
                    });
                }
            }

            Op::MaxPool2x2 { input, argmax } => {
                into_grad!(*input, |gx| {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                });
            }

            Op::BatchNorm { input, gamma, beta, mean, inv_std } => {
                let sx = nodes[input.0].tensor.shape();
                let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let plane = h * w;
                let m = (n * plane) as f64;
                let x = nodes[input.0].tensor.data();
                let gam = nodes[gamma.0].tensor.data();

                // Per-channel reductions of g and g*xhat, shared by all
                // three gradients.
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        for i in base..base + plane {
                            let xhat = (x[i].to_f64() - mean[ci]) * inv_std[ci];
                            sum_g[ci] += g[i].to_f64();
                            sum_gx[ci] += g[i].to_f64() * xhat;
                        }
                    }
                }
                into_grad!(*beta, |gb| {
                    for ci in 0..c {
                        gb[ci] += E::from_f64(sum_g[ci]);
                    }
                });
                into_grad!(*gamma, |gg| {
                    for ci in 0..c {
                        gg[ci] += E::from_f64(sum_gx[ci]);
                    }
                });
                into_grad!(*input, |gx| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            let scale = gam[ci].to_f64() * inv_std[ci];
                            let (mg, mgx) = (sum_g[ci] / m, sum_gx[ci] / m);
                            for i in base..base + plane {
                                let xhat = (x[i].to_f64() - mean[ci]) * inv_std[ci];
                                gx[i] += E::from_f64(
                                    scale * (g[i].to_f64() - mg - xhat * mgx),
                                );
                            }
                        }
                    }
                });
            }

            Op::BatchNormFixed { input, gamma, beta, mean, inv_std } => {
                let sx = nodes[input.0].tensor.shape();
                let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let plane = h * w;
                let x = nodes[input.0].tensor.data();
                let gam = nodes[gamma.0].tensor.data();
                into_grad!(*input, |gx| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            let scale = E::from_f64(gam[ci].to_f64() * inv_std[ci]);
                            for i in base..base + plane {
                                gx[i] += g[i] * scale;
                            }
                        }
                    }
                });
                into_grad!(*gamma, |gg| {
                    let mut acc = vec![0.0f64; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            for i in base..base + plane {
                                acc[ci] +=
                                    g[i].to_f64() * (x[i].to_f64() - mean[ci]) * inv_std[ci];
                            }
                        }
                    }
                    for (d, &v) in gg.iter_mut().zip(&acc) {
                        *d += E::from_f64(v);
                    }
                });
                into_grad!(*beta, |gb| {
                    let mut acc = vec![0.0f64; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            for i in base..base + plane {
                                acc[ci] += g[i].to_f64();
                            }
                        }
                    }
                    for (d, &v) in gb.iter_mut().zip(&acc) {
                        *d += E::from_f64(v);
                    }
                });
            }

            Op::Dropout { input, mask, inv_keep } => {
                into_grad!(*input, |gx| {
                    for ((gi, &gv), &keep) in gx.iter_mut().zip(g).zip(mask) {
                        if keep {
                            *gi += gv * *inv_keep;
                        }
                    }
                });
            }

            Op::Softmax(a) => {
                let s = nodes[idx].tensor.data();
                let sx = nodes[idx].tensor.shape();
                let (n, k) = (sx[0], sx[1]);
                into_grad!(*a, |ga| {
                    for i in 0..n {
                        let srow = &s[i * k..(i + 1) * k];
                        let grow = &g[i * k..(i + 1) * k];
                        let mut dot = E::ZERO;
                        for (&gv, &sv) in grow.iter().zip(srow) {
                            dot += gv * sv;
                        }
                        let dst = &mut ga[i * k..(i + 1) * k];
                        for ((d, &gv), &sv) in dst.iter_mut().zip(grow).zip(srow) {
                            *d += sv * (gv - dot);
                        }
                    }
                });
            }

            Op::WeightedCe { logits, labels, sample_weights, weight_sum } => {
                let gv = g[0];
                let sx = nodes[logits.0].tensor.shape();
                let (n, k) = (sx[0], sx[1]);
                let z = nodes[logits.0].tensor.data();
                into_grad!(*logits, |gz| {
                    let mut probs = vec![E::ZERO; n * k];
                    kernels::softmax_rows(n, k, z, &mut probs);
                    for i in 0..n {
                        let w = sample_weights[i] / *weight_sum;
                        let y = labels[i];
                        for j in 0..k {
                            let indicator = if j == y { E::ONE } else { E::ZERO };
                            gz[i * k + j] += gv * w * (probs[i * k + j] - indicator);
                        }
                    }
                });
            }
        }
    }

    /// Accumulate `sign * g` (shaped like the lhs) into a buffer shaped like
    /// the broadcast rhs.
    fn reduce_into(pattern: Broadcast, shape_a: &[usize], g: &[E], out: &mut [E], sign: f64) {
        match pattern {
            Broadcast::Same => {
                let sg = E::from_f64(sign);
                for (o, &gv) in out.iter_mut().zip(g) {
                    *o += sg * gv;
                }
            }
            Broadcast::Scalar => {
                let mut acc = 0.0f64;
                for &gv in g {
                    acc += gv.to_f64();
                }
                out[0] += E::from_f64(sign * acc);
            }
            Broadcast::Feature => {
                let f = shape_a[1];
                let mut acc = vec![0.0f64; f];
                for (i, &gv) in g.iter().enumerate() {
                    acc[i % f] += gv.to_f64();
                }
                for (o, &v) in out.iter_mut().zip(&acc) {
                    *o += E::from_f64(sign * v);
                }
            }
            Broadcast::Channel => {
                let plane = shape_a[2] * shape_a[3];
                let c = shape_a[1];
                let mut acc = vec![0.0f64; c];
                for (i, &gv) in g.iter().enumerate() {
                    acc[(i / plane) % c] += gv.to_f64();
                }
                for (o, &v) in out.iter_mut().zip(&acc) {
                    *o += E::from_f64(sign * v);
                }
            }
        }
    }
}
