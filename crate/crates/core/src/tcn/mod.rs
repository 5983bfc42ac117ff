//! Dilated causal temporal convolutional network with hand-written
//! backpropagation.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod block;
mod checkpoint;
mod conv;
mod model;
mod train;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use block::{residual_block_forward, BlockGrads, ResidualBlockParams};
pub use checkpoint::{load_checkpoint, save_checkpoint, BIN_MAGIC, BIN_VERSION};
pub use conv::{conv1d_dilated_causal_backward, conv1d_dilated_causal_forward, ConvGrads};
pub use model::{argmax_tie_low, BackwardOutput, BatchStats, DropoutMasks, Gradients, Prediction, TcnModel};
pub use train::{evaluate_accuracy, predict_tensor, train, train_observed, EpochRecord, History, TrainConfig};

pub trait Real: Float + NumAssign + FromPrimitive + Sum + Default + Debug + Send + Sync + 'static {}

impl Real for f32 {}
impl Real for f64 {}

/// Batch-norm variance floor.
pub const BN_EPS: f64 = 1e-5;

#[inline]
pub(crate) fn real<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("finite constant")
}

/// Dense row-major 3-D array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    pub data: Vec<T>,
    pub dims: [usize; 3],
}

impl<T: Real> Tensor3<T> {
    pub fn new(data: Vec<T>, dims: [usize; 3]) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Usage(format!(
                "tensor of {} values cannot have shape {dims:?}",
                data.len()
            )));
        }
        Ok(Self { data, dims })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            data: vec![T::zero(); dims.iter().product()],
            dims,
        }
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> T {
        self.data[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    pub fn cast<U: Real>(&self) -> Tensor3<U> {
        Tensor3 {
            data: self.data.iter().map(|v| real(v.to_f64().unwrap_or(f64::NAN))).collect(),
            dims: self.dims,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// How the final feature map is reduced over time before the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Readout {
    /// Last time step (causal).
    Last,
    /// Global average over time.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TcnConfig {
    pub num_blocks: usize,
    pub kernel_size: usize,
    pub dilation_schedule: Vec<usize>,
    pub channels_per_block: usize,
    pub in_channels: usize,
    pub dropout_rate: f64,
    pub num_classes: usize,
    pub readout: Readout,
}

impl Default for TcnConfig {
    fn default() -> Self {
        Self {
            num_blocks: 12,
            kernel_size: 3,
            dilation_schedule: (1..=12).map(|i| 1usize << i).collect(),
            channels_per_block: 32,
            in_channels: 22,
            dropout_rate: 0.1,
            num_classes: 2,
            readout: Readout::Last,
        }
    }
}

impl TcnConfig {
    /// `num_blocks` blocks with dilations 2, 4, 8, ...
    pub fn doubling(num_blocks: usize, channels: usize, in_channels: usize) -> Self {
        Self {
            num_blocks,
            dilation_schedule: (1..=num_blocks).map(|i| 1usize << i).collect(),
            channels_per_block: channels,
            in_channels,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::config("num_blocks", "must be >= 1"));
        }
        if self.dilation_schedule.len() != self.num_blocks {
            return Err(Error::config(
                "dilation_schedule",
                format!("has {} entries for {} blocks", self.dilation_schedule.len(), self.num_blocks),
            ));
        }
        if self.dilation_schedule.contains(&0) {
            return Err(Error::config("dilation_schedule", "dilations must be >= 1"));
        }
        if self.kernel_size == 0 {
            return Err(Error::config("kernel_size", "must be >= 1"));
        }
        if self.channels_per_block == 0 {
            return Err(Error::config("channels_per_block", "must be >= 1"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate", "must lie in [0, 1)"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be >= 2"));
        }
        Ok(())
    }

    /// `1 + (k - 1) * sum(dilations)`.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel_size - 1) * self.dilation_schedule.iter().sum::<usize>()
    }

    /// Trainable parameter count (running BN statistics excluded).
    pub fn parameter_count(&self) -> usize {
        let c = self.channels_per_block;
        let k = self.kernel_size;
        let mut total = 0;
        for i in 0..self.num_blocks {
            let c_in = if i == 0 { self.in_channels } else { c };
            total += c * c_in * k + c + 2 * c;
            if c_in != c {
                total += c * c_in;
            }
        }
        total + self.num_classes * c + self.num_classes
    }
}

#[inline]
pub(crate) fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with a fixed 8-lane summation order.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub(crate) fn sum<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut c = a.chunks_exact(8);
    for x in &mut c {
        for k in 0..8 {
            acc[k] += x[k];
        }
    }
    let tail: T = c.remainder().iter().copied().sum();
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}
