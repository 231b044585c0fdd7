//! Dense `f32` tensors and the handful of layers the region classifiers need.
//!
//! Every differentiable op comes as a forward/backward pair of plain
//! functions. There is no tape: callers keep whatever activations the
//! backward pass needs and compose the calls themselves.
//!
//! Storage is 32-bit; reductions (dot products, convolution sums, softmax
//! normalizers) accumulate in 64-bit and round once on output.

mod activation;
mod conv;
mod dense;
mod io;
mod pool;

pub use activation::{
    elementwise_max, elementwise_max_backward, relu, relu_backward, softmax, softmax_xent,
};
pub use conv::{conv2d_backward, conv2d_forward, conv_output_extent, ConvParams};
pub use dense::{fc_backward, fc_forward};
pub use io::{
    read_header, read_tensor, read_tensor_file, read_tensor_header_file, write_tensor,
    write_tensor_file, MAGIC,
};
pub use pool::{maxpool2d_backward, maxpool2d_forward, PoolOutput, PoolParams};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: {dim} mismatch (expected {expected}, found {found})")]
    Shape {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{op}: expected rank {expected}, found rank {found}")]
    Rank {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("shape {shape:?} holds {expected} values but {found} were supplied")]
    Length {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{op}: {what}")]
    Geometry { op: &'static str, what: String },
    #[error("malformed tensor blob: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Row-major dense array of `f32` with explicit shape.
///
/// Feature maps use channels x height x width; convolution kernels use
/// out x in x kh x kw; fully-connected weights use out x in.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, validating the element count. With the `checked`
    /// feature (on by default) non-finite values are rejected as well.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Length {
                shape,
                expected,
                found: data.len(),
            });
        }
        #[cfg(feature = "checked")]
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(TensorError::NonFinite { index, value });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds a tensor whose element at flat index `i` is `f(i)`.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    /// Draws every element from N(0, sigma^2). `sigma == 0` yields zeros.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], sigma: f32, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        if sigma == 0.0 {
            return Self::zeros(shape);
        }
        let normal = Normal::new(0.0f32, sigma).expect("sigma must be finite and positive");
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::Length {
                shape: shape.to_vec(),
                expected,
                found: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Splits a rank-3 shape into (channels, height, width).
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(TensorError::Rank {
                op,
                expected: 3,
                found: self.rank(),
            }),
        }
    }

    /// Checks that every stored value is finite.
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            Some((index, &value)) => Err(TensorError::NonFinite { index, value }),
            None => Ok(()),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// `self += scale * other`, element-wise.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f32) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f32) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// Dot product accumulated in 64-bit.
    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }
}

pub(crate) fn expect_shape(
    op: &'static str,
    dim: &'static str,
    expected: usize,
    found: usize,
) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(TensorError::Shape {
            op,
            dim,
            expected,
            found,
        })
    }
}

/// Gradients of one parameterized layer. Shapes mirror the forward operands.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub d_input: Tensor,
    pub d_weights: Tensor,
    pub d_bias: Tensor,
}
