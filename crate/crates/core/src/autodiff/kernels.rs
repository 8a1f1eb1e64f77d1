//! Convolution kernels built on im2col / col2im and a strided GEMM.
//!
//! All tensors are NCHW. Convolution weights are `out x in x k x k`; transposed
//! convolution weights are `in x out x k x k`, so a transposed convolution with
//! weight `w` is exactly the input-gradient of a convolution with the same `w`.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Geometry of a strided, zero-padded square-kernel correlation from an
/// `channels x height x width` image to an `out_h x out_w` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Geometry of a forward convolution; fails unless the output extent is a
    /// positive integer.
    pub fn conv(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::InvalidArgument(format!("kernel ({kernel}) and stride ({stride}) must be positive")));
        }
        let extent = |size: usize, axis: &str| -> Result<usize> {
            let padded = size + 2 * padding;
            if padded < kernel || (padded - kernel) % stride != 0 {
                return Err(Error::Shape(format!(
                    "conv {axis} extent ({size} + 2*{padding} - {kernel})/{stride} + 1 is not a positive integer"
                )));
            }
            Ok((padded - kernel) / stride + 1)
        };
        let out_h = extent(height, "height")?;
        let out_w = extent(width, "width")?;
        Ok(Self { channels, height, width, kernel, stride, padding, out_h, out_w })
    }

    /// Geometry of the convolution whose input-gradient is a transposed
    /// convolution mapping an `in_h x in_w` grid to the returned `height x width`.
    pub fn transposed(out_channels: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::InvalidArgument(format!("kernel ({kernel}) and stride ({stride}) must be positive")));
        }
        let extent = |size: usize, axis: &str| -> Result<usize> {
            let full = (size - 1) * stride + kernel;
            if full <= 2 * padding {
                return Err(Error::Shape(format!(
                    "transposed conv {axis} extent ({size}-1)*{stride} - 2*{padding} + {kernel} = {} is not positive",
                    full as i64 - 2 * padding as i64
                )));
            }
            Ok(full - 2 * padding)
        };
        let height = extent(in_h, "height")?;
        let width = extent(in_w, "width")?;
        let g = Self::conv(out_channels, height, width, kernel, stride, padding)?;
        debug_assert_eq!((g.out_h, g.out_w), (in_h, in_w));
        Ok(g)
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1x1, stride 1, no padding: the column matrix is the image itself.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output columns `ox` whose input column `ox*stride + offset - padding` lies
/// inside `0..size`, as a half-open range.
fn valid_outputs(size: usize, out: usize, stride: usize, offset: usize, padding: usize) -> (usize, usize) {
    // ix = ox*s + offset - p >= 0  <=>  ox >= ceil((p - offset) / s)
    let lo = if padding > offset { (padding - offset).div_ceil(stride) } else { 0 };
    // ix < size  <=>  ox*s < size + p - offset
    let limit = size + padding;
    let hi = if limit > offset { (limit - offset).div_ceil(stride).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfold `img` (`channels x height x width`) into `col` (`col_rows x col_cols`).
pub fn im2col<T: Scalar>(img: &[T], g: &ConvGeometry, col: &mut [T]) {
    let cols = g.col_cols();
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            let (oy_lo, oy_hi) = valid_outputs(g.height, g.out_h, s, ki, p);
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let (ox_lo, ox_hi) = valid_outputs(g.width, g.out_w, s, kj, p);
                dst[..oy_lo * g.out_w].fill(T::zero());
                dst[oy_hi * g.out_w..].fill(T::zero());
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ki - p;
                    let src = &plane[iy * g.width..(iy + 1) * g.width];
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    out_row[..ox_lo].fill(T::zero());
                    out_row[ox_hi..].fill(T::zero());
                    if ox_lo == ox_hi {
                        continue;
                    }
                    let ix0 = ox_lo * s + kj - p;
                    if s == 1 {
                        out_row[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + ox_hi - ox_lo]);
                    } else {
                        for (v, &x) in out_row[ox_lo..ox_hi].iter_mut().zip(src[ix0..].iter().step_by(s)) {
                            *v = x;
                        }
                    }
                }
            }
        }
    }
}

/// Fold `col` back onto `img`, accumulating overlapping contributions.
pub fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeometry, img: &mut [T]) {
    let cols = g.col_cols();
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            let (oy_lo, oy_hi) = valid_outputs(g.height, g.out_h, s, ki, p);
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                let (ox_lo, ox_hi) = valid_outputs(g.width, g.out_w, s, kj, p);
                if ox_lo == ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ki - p;
                    let dst = &mut plane[iy * g.width..(iy + 1) * g.width];
                    let ix0 = ox_lo * s + kj - p;
                    let from = &src[oy * g.out_w + ox_lo..oy * g.out_w + ox_hi];
                    if s == 1 {
                        for (d, &v) in dst[ix0..ix0 + from.len()].iter_mut().zip(from) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[ix0..].iter_mut().step_by(s).zip(from) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// `out (O x cols) = weight (O x col_rows) · col(img)` for each image in the batch.
/// `out` must be zeroed or hold values to be overwritten (beta = 0).
pub fn correlate_batch<T: Scalar>(input: &[T], batch: usize, g: &ConvGeometry, weight: &[T], out_channels: usize, out: &mut [T]) {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
    for b in 0..batch {
        let img = &input[b * g.image_len()..(b + 1) * g.image_len()];
        let dst = &mut out[b * out_channels * cols..(b + 1) * out_channels * cols];
        let src: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(img, g, &mut col);
            &col
        };
        T::gemm(out_channels, rows, cols, T::one(), weight, (rows, 1), src, (cols, 1), T::zero(), dst, (cols, 1));
    }
}

/// Adjoint of [`correlate_batch`] with respect to its input: for each image,
/// `img += col2im(weightᵀ · grad)`. `grad` is `batch x O x cols`.
pub fn correlate_batch_adjoint<T: Scalar>(
    grad: &[T],
    batch: usize,
    g: &ConvGeometry,
    weight: &[T],
    out_channels: usize,
    input_grad: &mut [T],
) {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![T::zero(); rows * cols];
    for b in 0..batch {
        let gb = &grad[b * out_channels * cols..(b + 1) * out_channels * cols];
        let dst = &mut input_grad[b * g.image_len()..(b + 1) * g.image_len()];
        if g.is_pointwise() {
            T::gemm(rows, out_channels, cols, T::one(), weight, (1, rows), gb, (cols, 1), T::one(), dst, (cols, 1));
        } else {
            T::gemm(rows, out_channels, cols, T::one(), weight, (1, rows), gb, (cols, 1), T::zero(), &mut col, (cols, 1));
            col2im_add(&col, g, dst);
        }
    }
}

/// Weight-gradient of [`correlate_batch`]: `weight_grad (O x rows) += Σ_b grad_b · col(img_b)ᵀ`.
pub fn correlate_batch_weight_grad<T: Scalar>(
    input: &[T],
    grad: &[T],
    batch: usize,
    g: &ConvGeometry,
    out_channels: usize,
    weight_grad: &mut [T],
) {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
    for b in 0..batch {
        let img = &input[b * g.image_len()..(b + 1) * g.image_len()];
        let gb = &grad[b * out_channels * cols..(b + 1) * out_channels * cols];
        let src: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(img, g, &mut col);
            &col
        };
        T::gemm(out_channels, cols, rows, T::one(), gb, (cols, 1), src, (1, cols), T::one(), weight_grad, (rows, 1));
    }
}

/// Add `bias[c]` to every element of channel `c`.
pub fn add_channel_bias<T: Scalar>(out: &mut [T], batch: usize, channels: usize, bias: &[T]) {
    let plane = out.len() / (batch * channels);
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[i % channels];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

/// Per-channel sum over batch and spatial positions.
pub fn channel_sums<T: Scalar>(values: &[T], batch: usize, channels: usize) -> Vec<T> {
    let plane = values.len() / (batch * channels);
    let mut sums = vec![T::zero(); channels];
    for (i, chunk) in values.chunks(plane).enumerate() {
        sums[i % channels] += chunk.iter().copied().sum::<T>();
    }
    sums
}
