//! Geometric view transforms for cross-view consistency.
//!
//! A transform is applied in the fixed order crop → translate → resize →
//! flip. Every step acts on rows and columns independently, so the whole
//! pipeline is a pair of linear operators `(rows: Ho×H, cols: Wo×W)` and a
//! raster `x` maps to `rows · x · colsᵀ`. The same operators transform
//! images, prediction maps and (through their row sums) the validity mask.

use candle_core::Tensor;
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::resample::{apply_separable, bilinear_matrix};
use crate::{Error, Result};

const VALID_EPS: f64 = 1e-9;

/// Which geometric operations a view may use (resize, flip, translate, crop).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpSet {
    pub resize: bool,
    pub flip: bool,
    pub translate: bool,
    pub crop: bool,
}

impl OpSet {
    pub const ALL: OpSet = OpSet {
        resize: true,
        flip: true,
        translate: true,
        crop: true,
    };
    pub const NONE: OpSet = OpSet {
        resize: false,
        flip: false,
        translate: false,
        crop: false,
    };

    /// Parses a subset of `RFTC`, e.g. `"RF"`.
    pub fn parse(spec: &str) -> Result<OpSet> {
        let mut ops = OpSet::NONE;
        for ch in spec.chars().filter(|c| !c.is_whitespace() && *c != ',') {
            match ch.to_ascii_uppercase() {
                'R' => ops.resize = true,
                'F' => ops.flip = true,
                'T' => ops.translate = true,
                'C' => ops.crop = true,
                other => {
                    return Err(Error::InvalidConfig(format!("unknown view op `{other}`")))
                }
            }
        }
        Ok(ops)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewConfig {
    pub ops: OpSet,
    /// Output side relative to the input side.
    pub scales: Vec<f64>,
    pub flip_prob: f64,
    /// Largest translation as a fraction of the (cropped) side.
    pub max_translate_frac: f64,
    /// Range of the crop area as a fraction of the image area.
    pub crop_area: (f64, f64),
}

impl Default for ViewConfig {
    fn default() -> Self {
        ViewConfig {
            ops: OpSet::ALL,
            scales: vec![0.75, 1.0, 1.25],
            flip_prob: 0.5,
            max_translate_frac: 0.1,
            crop_area: (0.75, 0.95),
        }
    }
}

impl ViewConfig {
    pub fn with_ops(ops: OpSet) -> Self {
        ViewConfig {
            ops,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.ops.resize && (self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0))) {
            return bad(format!("resize scales must be positive and non-empty: {:?}", self.scales));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip probability {} outside [0, 1]", self.flip_prob));
        }
        if !(0.0..0.5).contains(&self.max_translate_frac) {
            return bad(format!("translate fraction {} outside [0, 0.5)", self.max_translate_frac));
        }
        let (lo, hi) = self.crop_area;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("crop area range {:?} must satisfy 0 < lo <= hi <= 1", self.crop_area));
        }
        Ok(())
    }

    /// The consistency loss relies on resizing being part of every view.
    pub fn validate_for_consistency(&self) -> Result<()> {
        self.validate()?;
        if !self.ops.resize {
            return Err(Error::InvalidConfig(
                "resize must be enabled when the cross-view consistency loss is active".into(),
            ));
        }
        Ok(())
    }
}

/// Crop rectangle in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewTransform {
    /// Size of the raster the transform was drawn for.
    pub source: (usize, usize),
    pub resize_scale: f64,
    pub hflip: bool,
    /// `(dx, dy)` shift in cropped-image pixels; positive moves content
    /// right/down.
    pub translate: (i64, i64),
    pub crop: CropBox,
    pub ops: OpSet,
}

impl ViewTransform {
    pub fn identity(height: usize, width: usize) -> Self {
        ViewTransform {
            source: (height, width),
            resize_scale: 1.0,
            hflip: false,
            translate: (0, 0),
            crop: CropBox {
                top: 0,
                left: 0,
                height,
                width,
            },
            ops: OpSet::NONE,
        }
    }

    /// Output raster size: the source size times the resize scale.
    pub fn output_dims(&self) -> (usize, usize) {
        let (h, w) = self.source;
        let scaled = |n: usize| ((n as f64 * self.resize_scale).round() as usize).max(1);
        (scaled(h), scaled(w))
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.source;
        let c = self.crop;
        if c.height == 0 || c.width == 0 {
            return Err(Error::DegenerateTransform("crop has zero area".into()));
        }
        if c.top + c.height > h || c.left + c.width > w {
            return Err(Error::DegenerateTransform(format!(
                "crop {c:?} exceeds the {h}x{w} source"
            )));
        }
        let (dx, dy) = self.translate;
        if dx.unsigned_abs() as usize >= c.width || dy.unsigned_abs() as usize >= c.height {
            return Err(Error::DegenerateTransform(format!(
                "translation {:?} leaves no content in a {}x{} crop",
                self.translate, c.height, c.width
            )));
        }
        if !(self.resize_scale > 0.0) {
            return Err(Error::DegenerateTransform(format!(
                "resize scale {} must be positive",
                self.resize_scale
            )));
        }
        Ok(())
    }

    /// One axis of the pipeline: select `[start, start+len)`, shift by
    /// `shift` with zero fill, resample to `out`, optionally mirror.
    fn axis_operator(src: usize, start: usize, len: usize, shift: i64, out: usize, mirror: bool) -> Array2<f64> {
        let mut select_shift = Array2::<f64>::zeros((len, src));
        for u in 0..len {
            let v = u as i64 - shift;
            if (0..len as i64).contains(&v) {
                select_shift[[u, start + v as usize]] = 1.0;
            }
        }
        bilinear_matrix(out, len, mirror).dot(&select_shift)
    }

    /// `(rows, cols)` operators such that `view = rows · x · colsᵀ`.
    pub fn operators(&self) -> Result<(Array2<f64>, Array2<f64>)> {
        self.validate()?;
        let (h, w) = self.source;
        let (oh, ow) = self.output_dims();
        let c = self.crop;
        let (dx, dy) = self.translate;
        let rows = Self::axis_operator(h, c.top, c.height, dy, oh, false);
        let cols = Self::axis_operator(w, c.left, c.width, dx, ow, self.hflip);
        Ok((rows, cols))
    }

    /// Pixels of the transformed view whose every contributing source pixel
    /// exists (crop and translation can leave uncovered borders).
    pub fn validity_mask(&self) -> Result<Array2<bool>> {
        let (rows, cols) = self.operators()?;
        let row_ok: Vec<bool> = rows.rows().into_iter().map(|r| r.sum() >= 1.0 - VALID_EPS).collect();
        let col_ok: Vec<bool> = cols.rows().into_iter().map(|r| r.sum() >= 1.0 - VALID_EPS).collect();
        Ok(Array2::from_shape_fn((rows.nrows(), cols.nrows()), |(y, x)| {
            row_ok[y] && col_ok[x]
        }))
    }

    /// Applies the transform to the last two dims of a `(..., H, W)`
    /// tensor. Differentiable with respect to `x`.
    pub fn apply_to_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        let hw = (dims[dims.len() - 2], dims[dims.len() - 1]);
        if hw != self.source {
            return Err(Error::SizeMismatch {
                what: "view input",
                expected: self.source,
                actual: hw,
            });
        }
        let (rows, cols) = self.operators()?;
        apply_separable(x, &rows, &cols)
    }

    pub fn apply_to_image(&self, image: &Image) -> Result<Image> {
        let t = image.to_tensor(&candle_core::Device::Cpu)?;
        Image::from_tensor(&self.apply_to_tensor(&t)?)
    }

    /// Transforms a prediction map and returns it with its validity mask.
    pub fn apply_to_map(&self, map: &Array2<f32>) -> Result<(Array2<f32>, Array2<bool>)> {
        let (h, w) = map.dim();
        let data: Vec<f64> = map.iter().map(|&v| v as f64).collect();
        let t = Tensor::from_vec(data, (h, w), &candle_core::Device::Cpu)?;
        let out = self.apply_to_tensor(&t)?;
        let (oh, ow) = out.dims2()?;
        let data = out.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?;
        let out = Array2::from_shape_vec((oh, ow), data).expect("shape from tensor");
        Ok((out, self.validity_mask()?))
    }
}

pub fn apply_to_image(t: &ViewTransform, image: &Image) -> Result<Image> {
    t.apply_to_image(image)
}

pub fn apply_to_map(t: &ViewTransform, map: &Array2<f32>) -> Result<(Array2<f32>, Array2<bool>)> {
    t.apply_to_map(map)
}

/// Draws a transform for a `height × width` input from the enabled ops.
pub fn sample_view<R: Rng + ?Sized>(config: &ViewConfig, rng: &mut R, dims: (usize, usize)) -> ViewTransform {
    let (h, w) = dims;
    let mut t = ViewTransform::identity(h, w);
    t.ops = config.ops;
    if config.ops.resize && !config.scales.is_empty() {
        t.resize_scale = config.scales[rng.random_range(0..config.scales.len())];
    }
    if config.ops.flip {
        t.hflip = rng.random::<f64>() < config.flip_prob;
    }
    if config.ops.crop {
        let (lo, hi) = config.crop_area;
        let area = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let side = area.sqrt();
        let ch = ((h as f64 * side).round() as usize).clamp(1, h);
        let cw = ((w as f64 * side).round() as usize).clamp(1, w);
        t.crop = CropBox {
            top: rng.random_range(0..=h - ch),
            left: rng.random_range(0..=w - cw),
            height: ch,
            width: cw,
        };
    }
    if config.ops.translate {
        let max_dx = (t.crop.width as f64 * config.max_translate_frac).floor() as i64;
        let max_dy = (t.crop.height as f64 * config.max_translate_frac).floor() as i64;
        t.translate = (
            rng.random_range(-max_dx..=max_dx),
            rng.random_range(-max_dy..=max_dy),
        );
    }
    t
}

/// Stacks images into a `(B, 3, H, W)` tensor.
pub fn batch_images(images: &[&Image], device: &candle_core::Device) -> Result<Tensor> {
    let ts = images
        .iter()
        .map(|img| img.to_tensor(device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

/// Converts an `H × W × 3` array without range checks (used by tests and
/// tools that already hold normalized data).
pub fn image_from_array(pixels: Array3<f32>) -> Result<Image> {
    Image::new(pixels)
}
