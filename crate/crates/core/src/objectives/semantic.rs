//! Semantic significance: a kernel loss over boundary blocks whose kernel
//! uses the feature channels that covary most with the prediction.

use candle_core::Tensor;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use super::affinity::gaussian;
use super::{host_tensor, predictions_host, zero_like, LossConfig};
use crate::data::{Label, ScribbleMap};
use crate::{Error, Result};

const STANDARDIZE_EPS: f64 = 1e-8;

/// Population covariance between every feature channel and the prediction.
pub fn channel_significance(feature: ArrayView3<f32>, pred: ArrayView2<f64>) -> Result<Vec<f64>> {
    let (c, h, w) = feature.dim();
    if pred.dim() != (h, w) {
        return Err(Error::SizeMismatch {
            what: "feature map",
            expected: pred.dim(),
            actual: (h, w),
        });
    }
    let m = h * w;
    if m < 2 {
        return Err(Error::InvalidConfig("channel significance needs at least 2 pixels".into()));
    }
    let p_mean = pred.sum() / m as f64;
    Ok((0..c)
        .map(|k| {
            let f = feature.index_axis(ndarray::Axis(0), k);
            let f_mean = f.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
            f.iter()
                .zip(pred.iter())
                .map(|(&fv, &pv)| (fv as f64 - f_mean) * (pv - p_mean))
                .sum::<f64>()
                / m as f64
        })
        .collect())
}

/// Indices of the `n` channels with the largest `|sig|`, most significant
/// first; ties go to the lower index.
pub fn select_significant_channels(sig: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sig.len()).collect();
    idx.sort_by(|&a, &b| sig[b].abs().total_cmp(&sig[a].abs()).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// A rectangular tile of the prediction map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.top..self.top + self.height).flat_map(move |y| (self.left..self.left + self.width).map(move |x| (y, x)))
    }
}

/// Tiles the map into `block_size` squares (partial tiles at the right and
/// bottom edges) and keeps those with enough confidently classified
/// foreground and background pixels. A scribble label overrides the
/// prediction thresholds.
pub fn boundary_regions(pred: ArrayView2<f64>, scribble: &ScribbleMap, cfg: &LossConfig) -> Vec<Block> {
    let (h, w) = pred.dim();
    let bs = cfg.block_size.max(1);
    let mut out = Vec::new();
    for top in (0..h).step_by(bs) {
        for left in (0..w).step_by(bs) {
            let block = Block {
                top,
                left,
                height: bs.min(h - top),
                width: bs.min(w - left),
            };
            let (mut fg, mut bg) = (0usize, 0usize);
            for (y, x) in block.pixels() {
                match scribble.get(y, x) {
                    Label::Foreground => fg += 1,
                    Label::Background => bg += 1,
                    Label::Unlabeled => {
                        let p = pred[[y, x]];
                        if p > cfg.fg_conf {
                            fg += 1;
                        } else if p < cfg.bg_conf {
                            bg += 1;
                        }
                    }
                }
            }
            let n = block.len() as f64;
            if fg as f64 >= cfg.boundary_fraction * n && bg as f64 >= cfg.boundary_fraction * n {
                out.push(block);
            }
        }
    }
    out
}

/// Selected channels standardized to zero mean and unit variance over the
/// whole image.
fn standardized_channels(feature: ArrayView3<f32>, channels: &[usize]) -> Vec<Array2<f64>> {
    channels
        .iter()
        .map(|&k| {
            let f = feature.index_axis(ndarray::Axis(0), k).mapv(|v| v as f64);
            let m = f.len() as f64;
            let mean = f.sum() / m;
            let var = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            let scale = 1.0 / (var + STANDARDIZE_EPS).sqrt();
            f.mapv(|v| (v - mean) * scale)
        })
        .collect()
}

/// Semantic kernel between two pixels given standardized channels.
pub fn semantic_kernel(channels: &[Array2<f64>], i: (usize, usize), j: (usize, usize), cfg: &LossConfig) -> f64 {
    let dy = i.0 as f64 - j.0 as f64;
    let dx = i.1 as f64 - j.1 as f64;
    let df: f64 = channels.iter().map(|c| (c[i] - c[j]).powi(2)).sum();
    gaussian(dy * dy + dx * dx, cfg.sigma_s) * gaussian(df, cfg.sigma_c)
}

/// Per-image pieces of the semantic significance loss: boundary blocks and
/// the standardized significant channels. Exposed for inspection and tests.
#[derive(Debug, Clone)]
pub struct SemanticGuide {
    pub channels: Vec<usize>,
    pub standardized: Vec<Array2<f64>>,
    pub blocks: Vec<Block>,
}

pub fn semantic_guide(feature: ArrayView3<f32>, pred: ArrayView2<f64>, scribble: &ScribbleMap, cfg: &LossConfig) -> Result<SemanticGuide> {
    let (c, _, _) = feature.dim();
    if cfg.top_channels > c {
        return Err(Error::InvalidConfig(format!(
            "top_channels {} exceeds the {c} feature channels",
            cfg.top_channels
        )));
    }
    let sig = channel_significance(feature, pred)?;
    let channels = select_significant_channels(&sig, cfg.top_channels);
    let standardized = standardized_channels(feature, &channels);
    let blocks = boundary_regions(pred, scribble, cfg);
    Ok(SemanticGuide {
        channels,
        standardized,
        blocks,
    })
}

/// Semantic significance loss of a `(B, 1, H, W)` prediction. `features`
/// holds one detached `C × H × W` map per image at prediction resolution.
///
/// Per block `R` the pair sum `Σ_{i,j} K_ij (p_i + p_j − 2 p_i p_j)` equals
/// `2 pᵀ(K·1) − 2 pᵀ K p` since `K` is symmetric; blocks are padded to a
/// common size with zero kernel rows and evaluated as one batched product.
pub fn semantic_significance_loss(
    pred: &Tensor,
    features: &[Array3<f32>],
    scribbles: &[ScribbleMap],
    cfg: &LossConfig,
    epoch: usize,
) -> Result<Tensor> {
    let weight = cfg.w_ss(epoch);
    let (b, _, h, w) = pred.dims4()?;
    if weight == 0.0 {
        return zero_like(pred);
    }
    if features.len() != b || scribbles.len() != b {
        return Err(Error::InvalidConfig(format!(
            "batch of {b} predictions with {} feature maps and {} scribbles",
            features.len(),
            scribbles.len()
        )));
    }
    let values = predictions_host(&pred.detach())?;
    let mut total = zero_like(pred)?;
    for (i, ((p_host, feature), scribble)) in values.iter().zip(features).zip(scribbles).enumerate() {
        let guide = semantic_guide(feature.view(), p_host.view(), scribble, cfg)?;
        if guide.blocks.is_empty() {
            continue;
        }
        let r = guide.blocks.len();
        let width = guide.blocks.iter().map(Block::len).max().unwrap_or(0);
        let mut index = vec![0u32; r * width];
        let mut kernel = vec![0.0f64; r * width * width];
        let mut row_sums = vec![0.0f64; r * width];
        for (k, block) in guide.blocks.iter().enumerate() {
            let pixels: Vec<(usize, usize)> = block.pixels().collect();
            let scale = 1.0 / pixels.len() as f64;
            for (a, &pa) in pixels.iter().enumerate() {
                index[k * width + a] = (pa.0 * w + pa.1) as u32;
                for (c, &pc) in pixels.iter().enumerate().skip(a) {
                    let v = semantic_kernel(&guide.standardized, pa, pc, cfg) * scale;
                    kernel[(k * width + a) * width + c] = v;
                    kernel[(k * width + c) * width + a] = v;
                    row_sums[k * width + a] += v;
                    if c != a {
                        row_sums[k * width + c] += v;
                    }
                }
            }
        }
        let index = Tensor::from_vec(index, r * width, pred.device())?;
        let p = pred.get(i)?.flatten_all()?.index_select(&index, 0)?.reshape((r, width, 1))?;
        let kernel = host_tensor(kernel, (r, width, width), pred)?;
        let row_sums = host_tensor(row_sums, (r, width, 1), pred)?;
        let linear = (&p * &row_sums)?.sum_all()?;
        let quadratic = (&p * kernel.matmul(&p)?)?.sum_all()?;
        let per_image = (linear - quadratic)?.affine(2.0 / (h * w) as f64, 0.0)?;
        total = (total + per_image)?;
    }
    Ok(total.affine(weight / b as f64, 0.0)?)
}
