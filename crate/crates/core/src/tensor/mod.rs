//! Minimal reverse-mode differentiation core.
//!
//! Only the layers the motor-state network needs are provided: strided valid
//! convolution, batch normalization, ReLU, global average pooling, a linear
//! head and softmax cross-entropy. Each layer exposes a pure forward function
//! that returns whatever its backward counterpart needs, so a fixed sequential
//! network can chain them into a reverse pass without a general graph.
//! Every layer works on `f64`.

mod adam;
mod gradcheck;
mod layers;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{finite_difference_check, Differentiable};
pub use layers::{
    batchnorm_backward, batchnorm_forward, conv2d, conv2d_backward, conv_output_extent, cross_entropy,
    global_average_pool, global_average_pool_backward, linear, linear_backward, relu, relu_backward, softmax,
    softmax_cross_entropy, BatchNormCache, BnMode, ConvGrads, LayerParams, LinearGrads, BN_EPSILON, BN_MOMENTUM,
};

use crate::error::{Error, Result};

/// Dense row-major tensor of rank 1 to 4.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub const MAX_RANK: usize = 4;

    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor data", expected, data.len()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::shape("reshape", expected, self.data.len()));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Extents of a rank-4 tensor, in `[batch, channels, height, width]` order.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::shape(
                "rank-4 tensor",
                "[N, C, H, W]",
                format!("{:?}", self.shape),
            )),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > Tensor::MAX_RANK {
        return Err(Error::shape("tensor rank", "1..=4", shape.len()));
    }
    if shape.contains(&0) {
        return Err(Error::shape("tensor extents", "all >= 1", format!("{shape:?}")));
    }
    Ok(())
}
