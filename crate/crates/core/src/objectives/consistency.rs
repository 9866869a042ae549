//! Partial cross-entropy and the cross-view / inside-view consistency terms.

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;

use super::{host_tensor, predictions_host, zero_like, LossConfig, PROB_EPS};
use crate::data::ScribbleMap;
use crate::{Error, Result};

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Clamps away from 0 and 1. `clamp` maps NaN to a bound; adding `x − x`
/// keeps NaN inputs NaN so a diverged network cannot report a finite loss.
pub(crate) fn clamp_probs(pred: &Tensor) -> Result<Tensor> {
    let nan_guard = (pred - pred)?;
    Ok((pred.clamp(PROB_EPS, 1.0 - PROB_EPS)? + nan_guard)?)
}

pub(crate) fn check_batch(pred: &Tensor, scribbles: &[ScribbleMap]) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = pred.dims4()?;
    if c != 1 {
        return Err(Error::InvalidConfig(format!("prediction must have one channel, got {c}")));
    }
    if scribbles.len() != b {
        return Err(Error::InvalidConfig(format!(
            "batch of {b} predictions but {} scribble maps",
            scribbles.len()
        )));
    }
    for s in scribbles {
        if s.dims() != (h, w) {
            return Err(Error::SizeMismatch {
                what: "scribble",
                expected: (h, w),
                actual: s.dims(),
            });
        }
    }
    Ok((b, h, w))
}

/// Binary cross-entropy over scribble-labeled pixels, averaged per image and
/// then over the batch. `pred` is `(B, 1, H, W)`.
pub fn pce_loss(pred: &Tensor, scribbles: &[ScribbleMap]) -> Result<Tensor> {
    let (b, h, w) = check_batch(pred, scribbles)?;
    let mut fg = Vec::with_capacity(b * h * w);
    let mut bg = Vec::with_capacity(b * h * w);
    for s in scribbles {
        let n = s.labeled_count();
        if n == 0 {
            return Err(Error::EmptySupervision);
        }
        let weight = 1.0 / (n * b) as f64;
        for &v in s.labels().iter() {
            fg.push(if v == 1 { weight } else { 0.0 });
            bg.push(if v == 2 { weight } else { 0.0 });
        }
    }
    let fg = host_tensor(fg, (b, 1, h, w), pred)?;
    let bg = host_tensor(bg, (b, 1, h, w), pred)?;
    let p = clamp_probs(pred)?;
    let pos = (fg * p.log()?)?;
    let neg = (bg * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.sum_all()?.neg()?)
}

/// Replicates the border by reflection (`a b c` → `b a b c b`).
fn reflect_pad1(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let x = Tensor::cat(&[&x.narrow(2, 1, 1)?, x, &x.narrow(2, h - 2, 1)?], 2)?;
    Ok(Tensor::cat(&[&x.narrow(3, 1, 1)?, &x, &x.narrow(3, w - 2, 1)?], 3)?)
}

fn box3(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let p = reflect_pad1(x)?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..3 {
        for dx in 0..3 {
            let tap = p.narrow(2, dy, h)?.narrow(3, dx, w)?;
            acc = Some(match acc {
                None => tap,
                Some(a) => (a + tap)?,
            });
        }
    }
    Ok((acc.expect("nine taps") / 9.0)?)
}

/// Per-pixel single-scale SSIM over 3×3 windows (reflection padded).
pub fn ssim_map(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::InvalidConfig(format!(
            "ssim inputs differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (_, _, h, w) = a.dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::InvalidConfig(format!("ssim needs at least 2x2 maps, got {h}x{w}")));
    }
    let mu_a = box3(a)?;
    let mu_b = box3(b)?;
    let var_a = (box3(&a.sqr()?)? - mu_a.sqr()?)?;
    let var_b = (box3(&b.sqr()?)? - mu_b.sqr()?)?;
    let cov = (box3(&(a * b)?)? - (&mu_a * &mu_b)?)?;
    let num = ((&mu_a * &mu_b)?.affine(2.0, SSIM_C1)? * cov.affine(2.0, SSIM_C2)?)?;
    let den = ((mu_a.sqr()? + mu_b.sqr()?)?.affine(1.0, SSIM_C1)? * (var_a + var_b)?.affine(1.0, SSIM_C2)?)?;
    Ok((num / den)?)
}

fn valid_weights(valid: &Array2<bool>, b: usize, like: &Tensor) -> Result<Tensor> {
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(Error::EmptyOverlap);
    }
    let weight = 1.0 / (n * b) as f64;
    let (h, w) = valid.dim();
    let data = valid.iter().map(|&v| if v { weight } else { 0.0 }).collect();
    host_tensor(data, (1, 1, h, w), like)
}

/// Cross-view consistency between the aligned main prediction and the
/// prediction on the transformed image, averaged over `valid` pixels.
pub fn cv_loss(p_aligned: &Tensor, p_hat: &Tensor, valid: &Array2<bool>, alpha: f64) -> Result<Tensor> {
    let (b, _, h, w) = p_hat.dims4()?;
    if valid.dim() != (h, w) {
        return Err(Error::SizeMismatch {
            what: "validity mask",
            expected: (h, w),
            actual: valid.dim(),
        });
    }
    let ssim = ssim_map(p_aligned, p_hat)?;
    let structural = ssim.affine(-0.5 * (1.0 - alpha), 0.5 * (1.0 - alpha))?;
    let absolute = (p_aligned - p_hat)?.abs()?.affine(alpha, 0.0)?;
    let per_pixel = (structural + absolute)?;
    Ok(per_pixel.broadcast_mul(&valid_weights(valid, b, p_hat)?)?.sum_all()?)
}

/// Identity in value; scales the gradient flowing back into `x` by `s`.
/// `x − detach(x)` is exactly zero, so the forward value is bit-identical.
pub(crate) fn scale_grad(x: &Tensor, s: f64) -> Result<Tensor> {
    let frozen = x.detach();
    Ok((&frozen + (x - &frozen)?.affine(s, 0.0)?)?)
}

/// Reliable cross-view consistency `(1 + γ) L(sg(p_aligned), p_hat) +
/// (1 − γ) L(p_aligned, sg(p_hat))`, `sg` stopping gradients. Both terms
/// share one value, so this is evaluated as `2 L` with the gradient into
/// `p_hat` scaled by `(1 + γ) / 2` and into `p_aligned` by `(1 − γ) / 2`;
/// the value is then exactly independent of `γ`.
pub fn rcv_loss(p_aligned: &Tensor, p_hat: &Tensor, valid: &Array2<bool>, alpha: f64, gamma: f64) -> Result<Tensor> {
    let aligned = scale_grad(p_aligned, (1.0 - gamma) / 2.0)?;
    let hat = scale_grad(p_hat, (1.0 + gamma) / 2.0)?;
    Ok(cv_loss(&aligned, &hat, valid, alpha)?.affine(2.0, 0.0)?)
}

/// Natural-log binary entropy per pixel.
pub fn binary_entropy_map(pred: &Tensor) -> Result<Tensor> {
    let p = clamp_probs(pred)?;
    let q = p.affine(-1.0, 1.0)?;
    Ok(((&p * p.log()?)? + (&q * q.log()?)?)?.neg()?)
}

/// Scalar binary entropy, matching [`binary_entropy_map`].
pub fn binary_entropy(p: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
}

/// Inside-view consistency: mean entropy over confident pixels (entropy at
/// most the threshold), zero before the configured start epoch.
pub fn iv_loss(pred: &Tensor, cfg: &LossConfig, epoch: usize) -> Result<Tensor> {
    if epoch < cfg.iv_start_epoch {
        return zero_like(pred);
    }
    let (b, _, h, w) = pred.dims4()?;
    let entropy = binary_entropy_map(pred)?;
    let values = predictions_host(&entropy.detach())?;
    let mut weights = Vec::with_capacity(b * h * w);
    for img in &values {
        let n = img.iter().filter(|&&e| e <= cfg.entropy_threshold).count();
        let wgt = if n == 0 { 0.0 } else { 1.0 / (n * b) as f64 };
        weights.extend(img.iter().map(|&e| if e <= cfg.entropy_threshold { wgt } else { 0.0 }));
    }
    let weights = host_tensor(weights, (b, 1, h, w), pred)?;
    Ok((entropy * weights)?.sum_all()?.affine(cfg.w_iv, 0.0)?)
}

/// Convenience for single-map callers: wraps an `H × W` array as a
/// `(1, 1, H, W)` tensor.
pub fn map_tensor(map: &Array2<f64>, dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = map.dim();
    Ok(Tensor::from_vec(map.iter().copied().collect::<Vec<_>>(), (1, 1, h, w), device)?.to_dtype(dtype)?)
}
