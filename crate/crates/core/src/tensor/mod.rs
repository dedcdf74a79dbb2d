//! Minimal differentiable array engine.
//!
//! Only the operations the segmentation network needs are provided: dilated
//! 2D convolution, batch normalization, ReLU, channel softmax, the
//! non-squared Dice loss and the Adam update. Every operation comes with a
//! hand-written adjoint; there is no tape or graph.

mod activation;
mod adam;
mod conv;
pub(crate) mod gemm;
mod loss;
pub(crate) mod norm;

pub use activation::{relu, relu_backward, softmax_channels, softmax_channels_backward};
pub(crate) use activation::{softmax_backward_raw, softmax_raw};
pub(crate) use norm as norm_raw;
pub use adam::{AdamConfig, AdamState};
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvKernel};
pub(crate) use conv::{conv_backward_raw, conv_forward_raw, ConvGeometry};
pub use loss::{dice_ns_loss, dice_ns_loss_backward, DICE_SMOOTH};
pub use norm::{batchnorm, batchnorm_backward, BatchNormCache, Mode, RunningStats, BN_EPS, BN_MOMENTUM};

use crate::error::{Error, Result};

/// Dense N×C×H×W array of reals with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor4 {
    pub fn zeros(shape: [usize; 4]) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Result<Self> {
        check_shape(shape)?;
        Ok(Tensor4 {
            shape,
            data: vec![value; shape.iter().product()],
            grad: None,
        })
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::shape(format!(
                "{} values do not fill a {:?} tensor ({} entries)",
                data.len(),
                shape,
                len
            )));
        }
        Ok(Tensor4 {
            shape,
            data,
            grad: None,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Number of pixels in one channel plane.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Attaches a gradient buffer of matching size.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient of length {} for tensor {:?}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = Some(vec![0.0; self.data.len()]);
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(n, c, y, x);
        self.data[i] = value;
    }

    /// One channel plane of one batch element.
    pub fn plane_slice(&self, n: usize, c: usize) -> &[f64] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_shape(shape: [usize; 4]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::shape(format!("tensor extents must be positive, got {shape:?}")));
    }
    Ok(())
}
