//! Dense `f32` tensors with a tape-based reverse-mode autodiff graph.
//!
//! The op set is deliberately narrow: it covers exactly what the residual
//! model zoo needs (convolution, batch norm, pooling, activations, channel
//! split/concat, a fully connected head and cross-entropy).

mod graph;
pub mod kernels;

pub use graph::{BatchNormMode, Graph, RunningStats, TensorId};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: operand `{operand}` expected shape {expected}, got {actual:?}")]
    Shape {
        op: &'static str,
        operand: &'static str,
        expected: String,
        actual: Vec<usize>,
    },
    #[error("{op}: {message}")]
    Invalid { op: &'static str, message: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("batch_norm: eval mode with uninitialized running statistics")]
    UninitializedStats,
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err(
    op: &'static str,
    operand: &'static str,
    expected: impl Into<String>,
    actual: &[usize],
) -> TensorError {
    TensorError::Shape {
        op,
        operand,
        expected: expected.into(),
        actual: actual.to_vec(),
    }
}

/// Row-major dense array of `f32` with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(TensorError::Invalid {
                op: "tensor",
                message: format!("zero extent in shape {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Invalid {
                op: "tensor",
                message: format!("shape {shape:?} holds {numel} values but data has {}", data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::full([1], value)
    }

    /// Marks the tensor as a differentiable leaf.
    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn is_requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err(
                "reshape",
                "target",
                format!("{} elements", self.data.len()),
                &shape,
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Shape as `[N, C, H, W]`, or a descriptive error.
    pub(crate) fn dims4(&self, op: &'static str, operand: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(shape_err(op, operand, "[N, C, H, W]", &self.shape)),
        }
    }

    pub(crate) fn dims2(&self, op: &'static str, operand: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => Err(shape_err(op, operand, "2-d", &self.shape)),
        }
    }
}
