//! Minimal dense-array math for exactly the layers the classifier needs.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32`
//! (default) and `f64` (gradient-check mode). Arrays are row-major and
//! immutable once an op has produced them; ops are pure functions apart
//! from the explicit optimizer and running-statistic state.

mod ops;
mod optim;

pub use ops::{
    batchnorm_backward, batchnorm_forward_infer, batchnorm_forward_train, conv1d_backward,
    conv1d_forward, embed_backward, embed_forward, fc_backward, fc_forward, glu_backward,
    glu_forward, global_max_pool, global_max_pool_backward, sigmoid, softmax_xent, BatchNormStats,
    FcOutput, RunningStats, PADDING_TOKEN,
};
pub use optim::{lr_decay, sgd_nesterov_step, OptimizerState};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Index, IndexMut};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type: `f32` for normal runs, `f64` for
/// gradient-check mode.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Display + Debug + Send + Sync + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to scalar")
    }

    fn to64(self) -> f64 {
        self.to_f64().expect("scalar widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense row-major 2D array.
#[derive(Debug, Clone, PartialEq)]
pub struct Array2<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Array2<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Array2 {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Input(format!(
                "array data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Array2 { rows, cols, data })
    }

    /// Builds a 1xN array from a slice; used for bias vectors so every
    /// parameter array shares one representation.
    pub fn from_row(data: &[T]) -> Self {
        Array2 {
            rows: 1,
            cols: data.len(),
            data: data.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[T] {
        debug_assert!(r < self.rows);
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        debug_assert!(r < self.rows);
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// NaN/Inf anywhere is an error state, reported with the given context.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_all_finite() {
            Ok(())
        } else {
            Err(Error::Training(format!("non-finite values in {what}")))
        }
    }

    pub fn same_shape(&self, other: &Array2<T>) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

impl<T: Scalar> Index<(usize, usize)> for Array2<T> {
    type Output = T;

    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<T: Scalar> IndexMut<(usize, usize)> for Array2<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Shape of a strided (optionally dilated) 1D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    /// Input channels per time step (the embedding dimension).
    pub in_channels: usize,
    /// Number of filters.
    pub out_filters: usize,
    /// Filter width in time steps.
    pub width: usize,
    /// Stride in time steps.
    pub stride: usize,
    /// Dilation between filter taps; 1 means a dense filter.
    pub dilation: usize,
}

impl ConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_filters == 0
            || self.width == 0
            || self.stride == 0
            || self.dilation == 0
        {
            return Err(Error::Input(format!("conv spec has a zero field: {self:?}")));
        }
        Ok(())
    }

    /// Span of input time steps one filter application touches:
    /// `(width - 1) * dilation + 1`.
    pub fn effective_width(&self) -> usize {
        (self.width - 1) * self.dilation + 1
    }

    /// Output length for an input of `input_len` steps, or an input error if
    /// the input is shorter than the effective filter width (callers pad
    /// first).
    pub fn output_len(&self, input_len: usize) -> Result<usize> {
        let eff = self.effective_width();
        if input_len < eff {
            return Err(Error::Input(format!(
                "input length {input_len} shorter than effective filter width {eff}"
            )));
        }
        Ok((input_len - eff) / self.stride + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Array2::<f32>::from_vec(2, 3, vec![0.0; 5]).is_err());
        assert!(Array2::<f32>::from_vec(2, 3, vec![0.0; 6]).is_ok());
    }

    #[test]
    fn indexing_is_row_major() {
        let a = Array2::from_vec(2, 3, vec![0.0f32, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(a[(0, 2)], 2.0);
        assert_eq!(a[(1, 0)], 3.0);
        assert_eq!(a.row(1), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn finite_check_flags_nan() {
        let mut a = Array2::<f32>::zeros(2, 2);
        assert!(a.ensure_finite("x").is_ok());
        a[(1, 1)] = f32::NAN;
        assert!(a.ensure_finite("x").is_err());
    }

    #[test]
    fn conv_output_len_matches_formula() {
        let spec = ConvSpec {
            in_channels: 1,
            out_filters: 1,
            width: 500,
            stride: 500,
            dilation: 1,
        };
        // paper-scale shape: floor((2_097_152 - 500) / 500) + 1
        assert_eq!(spec.output_len(2_097_152).unwrap(), 4194);

        let desk = ConvSpec {
            width: 32,
            stride: 32,
            ..spec
        };
        assert_eq!(desk.output_len(16_384).unwrap(), 512);
    }

    #[test]
    fn conv_output_len_rejects_short_input() {
        let spec = ConvSpec {
            in_channels: 1,
            out_filters: 1,
            width: 4,
            stride: 1,
            dilation: 3,
        };
        assert_eq!(spec.effective_width(), 10);
        assert!(spec.output_len(9).is_err());
        assert_eq!(spec.output_len(10).unwrap(), 1);
    }
}
