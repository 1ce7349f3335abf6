//! Convolution geometry.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Geometry of one convolution layer applied to an `N×C×H×W` input with `K`
/// filters of size `R×S`.
///
/// Padding is symmetric and applied to both spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvShape {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvShape {
    /// Square-kernel, stride-1 constructor matching the `CxHxWxK` notation used by
    /// the layer presets.
    pub fn chwk(c: usize, h: usize, w: usize, k: usize, kernel: usize, padding: usize) -> Self {
        ConvShape {
            batch: 1,
            in_channels: c,
            height: h,
            width: w,
            out_channels: k,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            padding,
        }
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padded_height(&self) -> usize {
        self.height + 2 * self.padding
    }

    pub fn padded_width(&self) -> usize {
        self.width + 2 * self.padding
    }

    /// Checks every geometric invariant and returns the output extents `(E, F)`.
    pub fn validate(&self) -> Result<(usize, usize)> {
        if self.batch == 0
            || self.in_channels == 0
            || self.height == 0
            || self.width == 0
            || self.out_channels == 0
            || self.kernel_h == 0
            || self.kernel_w == 0
        {
            return Err(shape_err!("zero extent in {self:?}"));
        }
        if self.stride == 0 {
            return Err(shape_err!("stride must be at least 1"));
        }
        let hp = self.padded_height();
        let wp = self.padded_width();
        if self.kernel_h > hp || self.kernel_w > wp {
            return Err(shape_err!(
                "kernel {}x{} larger than padded input {hp}x{wp}",
                self.kernel_h,
                self.kernel_w
            ));
        }
        let (dh, dw) = (hp - self.kernel_h, wp - self.kernel_w);
        if dh % self.stride != 0 || dw % self.stride != 0 {
            return Err(shape_err!(
                "stride {} does not evenly tile padded input {hp}x{wp} with kernel {}x{}",
                self.stride,
                self.kernel_h,
                self.kernel_w
            ));
        }
        Ok((dh / self.stride + 1, dw / self.stride + 1))
    }

    pub fn input_dims(&self) -> [usize; 4] {
        [self.batch, self.in_channels, self.height, self.width]
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn output_dims(&self) -> Result<[usize; 4]> {
        let (e, f) = self.validate()?;
        Ok([self.batch, self.out_channels, e, f])
    }

    /// Elements in one filter (`C·R·S`).
    pub fn filter_volume(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Multiply-accumulates of the dense algorithm for the whole batch.
    pub fn dense_macs(&self) -> Result<u64> {
        let (e, f) = self.validate()?;
        Ok((self.batch * self.out_channels * e * f) as u64 * self.filter_volume() as u64)
    }

    /// Same layer with a different input geometry check: true if `dims` is a
    /// valid input for this layer (batch may differ).
    pub fn accepts_input(&self, dims: [usize; 4]) -> bool {
        dims[1] == self.in_channels && dims[2] == self.height && dims[3] == self.width && dims[0] > 0
    }
}

/// Output extents `(E, F)` of a convolution.
pub fn output_shape(shape: &ConvShape) -> Result<(usize, usize)> {
    shape.validate()
}
