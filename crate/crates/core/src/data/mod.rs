//! Dataset types, on-disk layout and augmentation.
//!
//! A dataset root holds one directory per split:
//!
//! ```text
//! <root>/<split>/images/<id>.png|.jpg
//! <root>/<split>/scribbles/<id>.png   single-channel 8-bit, 0/1/2
//! <root>/<split>/gt/<id>.png          binary mask, evaluation splits
//! <root>/<split>/manifest.txt         one id per line (optional)
//! ```

mod augment;
mod io;
mod synth;

pub use augment::{hflip_pair, resize_pair};
pub use io::{
    decode_scribble, encode_scribble, list_raster_ids, load_gray, load_image, load_mask,
    load_sample, save_gray, save_image, save_mask, save_sample, validate_dataset, validate_split, write_atomic,
    DatasetManifest, SplitKind, ValidationReport, Violation, ViolationKind,
};
pub use synth::{synth_generate, synth_generate_with, SynthConfig};

use candle_core::{Device, Tensor};
use ndarray::{Array2, Array3};

use crate::{Error, Result};

/// Smallest side accepted for images loaded from disk or fed to the network.
pub const MIN_SIDE: usize = 32;

/// Scribble label values as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Label {
    Unlabeled = 0,
    Foreground = 1,
    Background = 2,
}

impl Label {
    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Unlabeled),
            1 => Some(Label::Foreground),
            2 => Some(Label::Background),
            _ => None,
        }
    }
}

/// RGB raster in `[0, 1]`, stored `H × W × 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Array3<f32>,
}

impl Image {
    pub fn new(pixels: Array3<f32>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(Error::InvalidImage(format!("expected 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::InvalidImage("image has no pixels".into()));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image { pixels })
    }

    pub(crate) fn from_trusted(pixels: Array3<f32>) -> Self {
        debug_assert_eq!(pixels.dim().2, 3);
        Image { pixels }
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f32> {
        self.pixels
    }

    pub fn rgb(&self, row: usize, col: usize) -> [f32; 3] {
        [
            self.pixels[[row, col, 0]],
            self.pixels[[row, col, 1]],
            self.pixels[[row, col, 2]],
        ]
    }

    /// Channel-first `(3, H, W)` f32 tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let (h, w) = self.dims();
        let data: Vec<f32> = self.pixels.iter().copied().collect();
        Ok(Tensor::from_vec(data, (h, w, 3), device)?
            .permute((2, 0, 1))?
            .contiguous()?)
    }

    /// Inverse of [`Image::to_tensor`]; values are clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::InvalidImage(format!("expected 3 channels, got {c}")));
        }
        let data = t
            .to_dtype(candle_core::DType::F32)?
            .permute((1, 2, 0))?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let pixels = Array3::from_shape_vec((h, w, 3), data)
            .expect("shape matches tensor")
            .mapv(|v| v.clamp(0.0, 1.0));
        Ok(Image { pixels })
    }
}

/// Ternary supervision raster (see [`Label`]).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScribbleMap {
    labels: Array2<u8>,
}

impl ScribbleMap {
    pub fn new(labels: Array2<u8>) -> Result<Self> {
        if let Some(((row, col), &value)) = labels.indexed_iter().find(|(_, &v)| v > 2) {
            return Err(Error::InvalidScribbleLabel { value, row, col });
        }
        Ok(ScribbleMap { labels })
    }

    pub fn unlabeled(height: usize, width: usize) -> Self {
        ScribbleMap {
            labels: Array2::zeros((height, width)),
        }
    }

    pub fn height(&self) -> usize {
        self.labels.dim().0
    }

    pub fn width(&self) -> usize {
        self.labels.dim().1
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> Label {
        Label::from_u8(self.labels[[row, col]]).expect("validated on construction")
    }

    pub fn set(&mut self, row: usize, col: usize, label: Label) {
        self.labels[[row, col]] = label as u8;
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&v| v == label as u8).count()
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&v| v != 0).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub scribble: ScribbleMap,
    /// Full ground-truth mask; only present for evaluation splits and
    /// synthetic samples.
    pub gt_mask: Option<Array2<bool>>,
}

impl Sample {
    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }
}
