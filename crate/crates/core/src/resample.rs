//! Separable resampling shared by the data loader, the view transforms and
//! the network decoder.
//!
//! Bilinear sampling follows the half-pixel convention (`align_corners =
//! false`): destination index `d` reads source coordinate
//! `(d + 0.5) * in / out - 0.5`, clamped at the borders. Because every
//! resampler here is separable, a 2-D resize of `x` is `Ry · x · Rxᵀ`, which
//! is how the tensor paths stay differentiable.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::Result;

/// The two source taps and their weights for one destination index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Taps {
    pub lo: usize,
    pub hi: usize,
    pub w_hi: f64,
}

impl Taps {
    pub fn w_lo(&self) -> f64 {
        1.0 - self.w_hi
    }
}

/// Bilinear taps for destination index `dst` when resampling `in_len` → `out_len`.
pub fn bilinear_taps(dst: usize, in_len: usize, out_len: usize) -> Taps {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    let w_hi = if hi == lo { 0.0 } else { src - lo as f64 };
    Taps { lo, hi, w_hi }
}

/// Nearest-neighbour source index (`floor(dst * in / out)`), computed in
/// integers so that exact ratios never drift.
pub fn nearest_index(dst: usize, in_len: usize, out_len: usize) -> usize {
    ((dst * in_len) / out_len).min(in_len - 1)
}

/// Row-major `out_len × in_len` bilinear interpolation matrix. With `reverse`
/// the output order is mirrored, which folds a horizontal flip into the
/// resize.
pub fn bilinear_matrix(out_len: usize, in_len: usize, reverse: bool) -> Array2<f64> {
    let mut m = Array2::zeros((out_len, in_len));
    for d in 0..out_len {
        let t = bilinear_taps(d, in_len, out_len);
        let row = if reverse { out_len - 1 - d } else { d };
        m[[row, t.lo]] += t.w_lo();
        m[[row, t.hi]] += t.w_hi;
    }
    m
}

/// Row-major `out_len × in_len` adaptive average pooling matrix using the
/// usual bin edges `floor(i·in/out) .. ceil((i+1)·in/out)`.
pub fn adaptive_avg_matrix(out_len: usize, in_len: usize) -> Array2<f64> {
    let mut m = Array2::zeros((out_len, in_len));
    for i in 0..out_len {
        let start = (i * in_len) / out_len;
        let end = ((i + 1) * in_len).div_ceil(out_len);
        let w = 1.0 / (end - start) as f64;
        for j in start..end {
            m[[i, j]] = w;
        }
    }
    m
}

pub(crate) fn matrix_tensor(m: &Array2<f64>, dtype: DType, device: &Device) -> Result<Tensor> {
    let (r, c) = m.dim();
    let data: Vec<f64> = m.iter().copied().collect();
    Ok(Tensor::from_vec(data, (r, c), device)?.to_dtype(dtype)?)
}

/// Applies separable row/column operators to the last two dims of `x`:
/// `rows · x · colsᵀ`. Both operators are plain matrices so autograd flows.
pub fn apply_separable(x: &Tensor, rows: &Array2<f64>, cols: &Array2<f64>) -> Result<Tensor> {
    let dtype = x.dtype();
    let device = x.device();
    let ry = matrix_tensor(rows, dtype, device)?;
    let rxt = matrix_tensor(cols, dtype, device)?.t()?.contiguous()?;
    let x = x.contiguous()?;
    let y = x.broadcast_matmul(&rxt)?;
    Ok(ry.broadcast_matmul(&y)?)
}

/// Differentiable bilinear resize of a `(..., H, W)` tensor.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let dims = x.dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    apply_separable(x, &bilinear_matrix(out_h, h, false), &bilinear_matrix(out_w, w, false))
}

/// Differentiable adaptive average pooling of a `(..., H, W)` tensor.
pub fn adaptive_avg_pool(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let dims = x.dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    apply_separable(
        x,
        &adaptive_avg_matrix(out_h, h),
        &adaptive_avg_matrix(out_w, w),
    )
}

/// Bilinear resize of a single-channel host raster.
pub fn resize_plane(src: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    let rows: Vec<Taps> = (0..out_h).map(|d| bilinear_taps(d, h, out_h)).collect();
    let cols: Vec<Taps> = (0..out_w).map(|d| bilinear_taps(d, w, out_w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (ty, tx) = (rows[y], cols[x]);
        let top = src[[ty.lo, tx.lo]] as f64 * tx.w_lo() + src[[ty.lo, tx.hi]] as f64 * tx.w_hi;
        let bot = src[[ty.hi, tx.lo]] as f64 * tx.w_lo() + src[[ty.hi, tx.hi]] as f64 * tx.w_hi;
        (top * ty.w_lo() + bot * ty.w_hi) as f32
    })
}

/// Bilinear resize of an interleaved `H × W × C` host raster.
pub fn resize_hwc(src: ArrayView3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, c) = src.dim();
    let rows: Vec<Taps> = (0..out_h).map(|d| bilinear_taps(d, h, out_h)).collect();
    let cols: Vec<Taps> = (0..out_w).map(|d| bilinear_taps(d, w, out_w)).collect();
    Array3::from_shape_fn((out_h, out_w, c), |(y, x, ch)| {
        let (ty, tx) = (rows[y], cols[x]);
        let at = |r: usize, q: usize| src[[r, q, ch]] as f64;
        let top = at(ty.lo, tx.lo) * tx.w_lo() + at(ty.lo, tx.hi) * tx.w_hi;
        let bot = at(ty.hi, tx.lo) * tx.w_lo() + at(ty.hi, tx.hi) * tx.w_hi;
        (top * ty.w_lo() + bot * ty.w_hi) as f32
    })
}

/// Nearest-neighbour resize of a label raster; never invents new values.
pub fn resize_nearest<T: Copy>(src: ArrayView2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        src[[nearest_index(y, h, out_h), nearest_index(x, w, out_w)]]
    })
}
