//! Context affinity: kernel-weighted disagreement between nearby pixels of
//! similar color.

use candle_core::Tensor;

use super::{host_tensor, LossConfig};
use crate::data::Image;
use crate::{Error, Result};

/// Probability that two independent binary predictions differ.
pub fn disagreement(pi: f64, pj: f64) -> f64 {
    pi + pj - 2.0 * pi * pj
}

/// Gaussian similarity of two pixels from position (in pixels) and RGB.
pub fn visual_kernel(image: &Image, i: (usize, usize), j: (usize, usize), cfg: &LossConfig) -> f64 {
    let dy = i.0 as f64 - j.0 as f64;
    let dx = i.1 as f64 - j.1 as f64;
    let (ci, cj) = (image.rgb(i.0, i.1), image.rgb(j.0, j.1));
    let dc: f64 = ci.iter().zip(cj).map(|(a, b)| (*a as f64 - b as f64).powi(2)).sum();
    gaussian(dy * dy + dx * dx, cfg.sigma_s) * gaussian(dc, cfg.sigma_c)
}

pub(crate) fn gaussian(sq_dist: f64, sigma: f64) -> f64 {
    (-sq_dist / (2.0 * sigma * sigma)).exp()
}

/// Neighbour weights for a batch of images, computed once and shared by
/// every prediction map of that batch.
///
/// For each window offset `o` the weight at pixel `i` is
/// `K(i, i+o) / (|N(i)| · H·W · B)`, or zero when `i+o` is outside the
/// image, so the loss reduces to one weighted sum.
#[derive(Debug, Clone)]
pub struct AffinityKernel {
    offsets: Vec<(isize, isize)>,
    radius: usize,
    weights: Tensor,
}

impl AffinityKernel {
    /// `like` fixes dtype and device of the weights.
    pub fn new(images: &[Image], cfg: &LossConfig, like: &Tensor) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidConfig("context affinity needs at least one image".into()))?;
        let (h, w) = first.dims();
        let r = (cfg.kernel_window / 2) as isize;
        let offsets: Vec<(isize, isize)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
            .filter(|&o| o != (0, 0))
            .collect();
        let b = images.len();
        let inside = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
        let mut data = Vec::with_capacity(b * offsets.len() * h * w);
        for image in images {
            if image.dims() != (h, w) {
                return Err(Error::SizeMismatch {
                    what: "affinity image",
                    expected: (h, w),
                    actual: image.dims(),
                });
            }
            let counts: Vec<usize> = (0..h * w)
                .map(|k| {
                    let (y, x) = ((k / w) as isize, (k % w) as isize);
                    offsets.iter().filter(|&&(dy, dx)| inside(y + dy, x + dx)).count()
                })
                .collect();
            for &(dy, dx) in &offsets {
                for y in 0..h {
                    for x in 0..w {
                        let (ny, nx) = (y as isize + dy, x as isize + dx);
                        let v = if inside(ny, nx) {
                            let k = visual_kernel(image, (y, x), (ny as usize, nx as usize), cfg);
                            k / (counts[y * w + x] * h * w * b) as f64
                        } else {
                            0.0
                        };
                        data.push(v);
                    }
                }
            }
        }
        let weights = host_tensor(data, (b, offsets.len(), h, w), like)?;
        Ok(AffinityKernel {
            offsets,
            radius: r as usize,
            weights,
        })
    }

    /// Context affinity loss of a `(B, 1, H, W)` prediction.
    pub fn loss(&self, pred: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = pred.dims4()?;
        let (wb, _, wh, ww) = self.weights.dims4()?;
        if (b, h, w) != (wb, wh, ww) {
            return Err(Error::SizeMismatch {
                what: "affinity prediction",
                expected: (wh, ww),
                actual: (h, w),
            });
        }
        let r = self.radius;
        let padded = pred.pad_with_zeros(2, r, r)?.pad_with_zeros(3, r, r)?;
        let shifted = self
            .offsets
            .iter()
            .map(|&(dy, dx)| {
                padded
                    .narrow(2, (r as isize + dy) as usize, h)?
                    .narrow(3, (r as isize + dx) as usize, w)
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        let q = Tensor::cat(&shifted, 1)?;
        let d = (q.broadcast_add(pred)? - q.broadcast_mul(pred)?.affine(2.0, 0.0)?)?;
        Ok((d * &self.weights)?.sum_all()?)
    }
}

/// One-shot context affinity loss; build an [`AffinityKernel`] instead when
/// several maps share the same images.
pub fn context_affinity_loss(pred: &Tensor, images: &[Image], cfg: &LossConfig) -> Result<Tensor> {
    AffinityKernel::new(images, cfg, pred)?.loss(pred)
}
