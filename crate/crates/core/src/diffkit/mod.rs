//! Minimal tensor and reverse-mode differentiation core.
//!
//! Provides exactly the layers the claim model needs: batched affine maps
//! (with a sparse-row kernel for the wide input layer), ReLU, sigmoid,
//! row-wise softmax, elementwise product, batch normalization, and the three
//! losses (binary cross-entropy, categorical cross-entropy, absolute error).
//! All arithmetic is 64-bit and every reduction runs in a fixed order, so
//! identical inputs always produce bitwise-identical outputs and gradients.

mod graph;
pub mod gradcheck;
pub mod kernels;
mod tensor;

pub use graph::{BatchNormState, BatchStats, Gradients, Graph, Mode, NodeId};
pub use tensor::Tensor;

use thiserror::Error;

/// Probabilities are clamped to `[CLIP, 1 - CLIP]` before any logarithm.
pub const PROB_CLIP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("tensor shape {shape:?} implies {expected} values, got {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at flat index {index} in tensor of shape {shape:?}")]
    NonFiniteValue { index: usize, shape: Vec<usize> },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a 2-d tensor, got shape {shape:?}")]
    NotTwoDimensional { op: &'static str, shape: Vec<usize> },
    #[error("batch normalization evaluated before any training-mode update")]
    BatchNormUninitialized,
    #[error("batch normalization requires a non-empty batch in train mode")]
    EmptyBatch,
    #[error("backward requires a scalar loss node, got shape {shape:?}")]
    LossNotScalar { shape: Vec<usize> },
    #[error("categorical target row {row} is not on the simplex (sum {sum})")]
    TargetNotSimplex { row: usize, sum: f64 },
    #[error("binary target row {row} must be 0 or 1, got {value}")]
    TargetNotBinary { row: usize, value: f64 },
}
