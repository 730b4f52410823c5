//! Dense tensors and a tape-based reverse-mode autodiff engine.
//!
//! Tensors are plain row-major buffers. Differentiable programs are built by
//! pushing operations onto a [`GradTape`]; [`GradTape::backward`] walks the
//! tape in reverse and accumulates gradients into every `requires_grad`
//! tensor reachable from the scalar root.
//!
//! The engine is generic over [`Element`], with two supported modes:
//! standard precision (`f32`, what training runs use) and wide precision
//! (`f64`, what the finite-difference oracles in [`check`] run in).

mod kernels;
mod tape;

pub mod check;

pub(crate) use kernels::{argmax_row, batchnorm_apply, conv2d, linear, maxpool2x2, softmax_rows};
pub use tape::{ElementwiseKind, GradTape, NodeId};

use std::fmt;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} declares {expected} elements but {got} were provided")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects {expected}, got shape {got:?}")]
    RankMismatch {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("log undefined at component {index} (value {value})")]
    LogDomain { index: usize, value: f64 },
    #[error("conv2d: input has {input} channels but the kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },
    #[error(
        "conv2d: extent {extent} with kernel {kernel}, stride {stride}, padding {padding} \
         yields no integral output extent"
    )]
    ConvGeometry {
        extent: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    #[error("maxpool2x2: spatial extents must be even, got {h}x{w}")]
    OddPoolExtent { h: usize, w: usize },
    #[error("batchnorm2d: {0} value(s) per channel in the batch; need at least 2")]
    DegenerateBatch(usize),
    #[error("dropout rate must lie in [0, 1), got {0}")]
    DropoutRate(f64),
    #[error("label {label} out of range for {classes} classes (sample {index})")]
    LabelRange {
        label: usize,
        classes: usize,
        index: usize,
    },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Scalar element of a tensor.
///
/// Implemented for `f32` ("standard", what checkpoints store and training
/// runs in) and `f64` ("wide", the mode the gradient-check oracles use).
pub trait Element:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::iter::Sum<Self>
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    /// Name of the precision mode, for diagnostics.
    const MODE: &'static str;
    /// Denominator floor used by the gradient checker; sized to each mode's
    /// finite-difference noise level.
    const CHECK_FLOOR: f64;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn to_f32(self) -> f32;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    /// One draw from U[0, 1) in the element's own width.
    fn sample_unit<R: Rng>(rng: &mut R) -> Self;
}

impl Element for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const MODE: &'static str = "standard";
    const CHECK_FLOOR: f64 = 1e-1;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(x: f32) -> Self {
        x
    }
    fn to_f32(self) -> f32 {
        self
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn sample_unit<R: Rng>(rng: &mut R) -> Self {
        rng.gen::<f32>()
    }
}

impl Element for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const MODE: &'static str = "wide";
    const CHECK_FLOOR: f64 = 1e-3;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn sample_unit<R: Rng>(rng: &mut R) -> Self {
        rng.gen::<f64>()
    }
}

/// Dense row-major tensor.
///
/// `grad` is populated by [`GradTape::backward`] for tensors flagged
/// `requires_grad`; repeated backward passes accumulate additively.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
    pub requires_grad: bool,
    pub(crate) grad: Option<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                expected,
                got: data.len(),
                shape,
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, E::ZERO)
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform draws from [lo, hi), one per element, in row-major order.
    pub fn uniform<R: Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Self {
        assert!(shape.iter().all(|&d| d > 0));
        let n = shape.iter().product();
        let span = hi - lo;
        let data = (0..n)
            .map(|_| E::from_f64(lo + span * E::sample_unit(rng).to_f64()))
            .collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self, requires: bool) -> Self {
        self.requires_grad = requires;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> E {
        assert!(
            self.data.len() == 1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub(crate) fn accumulate_grad(&mut self, delta: &[E]) {
        debug_assert_eq!(delta.len(), self.data.len());
        match &mut self.grad {
            Some(g) => {
                for (gi, &di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => self.grad = Some(delta.to_vec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_data() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeDataMismatch { .. }));
    }

    #[test]
    fn new_rejects_zero_extent() {
        let err = Tensor::<f64>::new(vec![2, 0], vec![]).unwrap_err();
        assert!(matches!(err, TensorError::ZeroExtent(_)));
    }

    #[test]
    fn uniform_respects_bounds() {
        let mut rng = crate::rng::rng(9, &[0]);
        let t = Tensor::<f32>::uniform(vec![64], -0.25, 0.25, &mut rng);
        assert!(t.data().iter().all(|&v| (-0.25..0.25).contains(&v)));
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::<f64>::new(vec![2], vec![1.0, 2.0]).unwrap();
        t.accumulate_grad(&[0.5, 1.0]);
        t.accumulate_grad(&[0.5, 1.0]);
        assert_eq!(t.grad().unwrap(), &[1.0, 2.0]);
    }
}
