//! Core algorithms for the xcnn toolkit: a small reverse-mode autodiff
//! engine, the CNN layers built on top of it, the image data pipeline,
//! cost-sensitive training, classification metrics, and KernelSHAP
//! attribution with heatmap rendering.
//!
//! Everything here is deterministic given the seeds threaded through the
//! public APIs; none of the numeric paths use threads or global RNG state.

pub mod data;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod shap;
pub mod tensor;
pub mod train;

pub use nn::{ArchitectureSpec, Classifier, InputShape, LayerSpec, Mode, Model, ModelError};
pub use tensor::{Element, GradTape, NodeId, Tensor, TensorError};
