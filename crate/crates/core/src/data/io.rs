use std::fmt;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use image::{ColorType, GrayImage, ImageFormat, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{Image, Label, Sample, ScribbleMap, MIN_SIDE};
use crate::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
const MANIFEST_FILE: &str = "manifest.txt";

/// Encodes a scribble map as a single-channel 8-bit PNG holding the raw
/// label values.
pub fn encode_scribble(map: &ScribbleMap) -> Result<Vec<u8>> {
    let (h, w) = map.dims();
    let raw: Vec<u8> = map.labels().iter().copied().collect();
    let img = GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from map");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::InvalidScribbleFormat(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn decode_scribble(bytes: &[u8]) -> Result<ScribbleMap> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::InvalidScribbleFormat(e.to_string()))?;
    if img.color() != ColorType::L8 {
        return Err(Error::InvalidScribbleFormat(format!(
            "expected a single-channel 8-bit raster, got {:?}",
            img.color()
        )));
    }
    let gray = img.into_luma8();
    let (w, h) = gray.dimensions();
    let labels = Array2::from_shape_vec((h as usize, w as usize), gray.into_raw())
        .expect("buffer sized from raster");
    ScribbleMap::new(labels)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })
}

fn decode_raster(path: &Path) -> Result<image::DynamicImage> {
    let bytes = read_bytes(path)?;
    image::load_from_memory(&bytes).map_err(|e| Error::CorruptRaster {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Loads a color raster and normalizes it to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let rgb = decode_raster(path)?.into_rgb8();
    let (w, h) = rgb.dimensions();
    let pixels = Array3::from_shape_vec((h as usize, w as usize, 3), rgb.into_raw())
        .expect("buffer sized from raster")
        .mapv(|v| v as f32 / 255.0);
    if (h as usize) < MIN_SIDE || (w as usize) < MIN_SIDE {
        return Err(Error::InvalidImage(format!(
            "{h}x{w} is smaller than the {MIN_SIDE}px minimum"
        )));
    }
    Image::new(pixels)
}

/// Loads a binary mask; pixels above 128 are foreground.
pub fn load_mask(path: &Path) -> Result<Array2<bool>> {
    let gray = decode_raster(path)?.into_luma8();
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), gray.into_raw())
        .expect("buffer sized from raster")
        .mapv(|v| v > 128))
}

/// Loads a single-channel raster scaled to `[0, 1]`.
pub fn load_gray(path: &Path) -> Result<Array2<f32>> {
    let gray = decode_raster(path)?.into_luma8();
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), gray.into_raw())
        .expect("buffer sized from raster")
        .mapv(|v| v as f32 / 255.0))
}

/// Writes values in `[0, 1]` as an 8-bit grayscale PNG.
pub fn save_gray(path: &Path, map: &Array2<f32>) -> Result<()> {
    let (h, w) = map.dim();
    let raw: Vec<u8> = map
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from map");
    let bytes = encode_png(|c| img.write_to(c, ImageFormat::Png))?;
    write_atomic(path, &bytes)
}

/// Sorted stems of the raster files (`png`, `jpg`, `jpeg`) in `dir`.
pub fn list_raster_ids(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(dir.to_path_buf()),
        _ => Error::io(dir, e),
    })?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    ids.dedup();
    Ok(ids)
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes through a uniquely named sibling file and renames it into place,
/// so readers never observe a partial file and concurrent writers resolve
/// to whichever rename lands last.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = path.with_file_name(format!(".{name}.{}.{n}.tmp", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn encode_png<F: FnOnce(&mut Cursor<Vec<u8>>) -> image::ImageResult<()>>(f: F) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    f(&mut out).map_err(|e| Error::InvalidImage(e.to_string()))?;
    Ok(out.into_inner())
}

/// Writes an image as 8-bit RGB PNG.
pub fn save_image(path: &Path, image: &Image) -> Result<()> {
    let (h, w) = image.dims();
    let raw: Vec<u8> = image
        .pixels()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from image");
    let bytes = encode_png(|c| img.write_to(c, ImageFormat::Png))?;
    write_atomic(path, &bytes)
}

/// Writes a binary mask as 0/255 grayscale PNG.
pub fn save_mask(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let raw: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from mask");
    let bytes = encode_png(|c| img.write_to(c, ImageFormat::Png))?;
    write_atomic(path, &bytes)
}

/// Training splits carry scribbles; every other split is an evaluation
/// split and must carry ground-truth masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitKind {
    Train,
    Eval,
}

impl SplitKind {
    pub fn for_split(name: &str) -> SplitKind {
        if name.starts_with("train") {
            SplitKind::Train
        } else {
            SplitKind::Eval
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    pub kind: SplitKind,
    pub ids: Vec<String>,
    pub image_dir: String,
    pub scribble_dir: String,
    pub gt_dir: String,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, split: &str, ids: Vec<String>) -> Self {
        DatasetManifest {
            root: root.into(),
            split: split.to_string(),
            kind: SplitKind::for_split(split),
            ids,
            image_dir: "images".into(),
            scribble_dir: "scribbles".into(),
            gt_dir: "gt".into(),
        }
    }

    /// Reads `<root>/<split>/manifest.txt`, or lists the image directory
    /// when no manifest file exists.
    pub fn open(root: impl Into<PathBuf>, split: &str) -> Result<Self> {
        let mut manifest = DatasetManifest::new(root, split, Vec::new());
        let split_dir = manifest.split_dir();
        let listed = split_dir.join(MANIFEST_FILE);
        manifest.ids = if listed.is_file() {
            let text = fs::read_to_string(&listed).map_err(|e| Error::io(&listed, e))?;
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect()
        } else {
            list_raster_ids(&split_dir.join(&manifest.image_dir))?
        };
        Ok(manifest)
    }

    pub fn split_dir(&self) -> PathBuf {
        self.root.join(&self.split)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.iter().any(|i| i == id)
    }

    /// First existing `<id>.png|.jpg|.jpeg`, or the `.png` path if none exist.
    pub fn image_path(&self, id: &str) -> PathBuf {
        let dir = self.split_dir().join(&self.image_dir);
        IMAGE_EXTENSIONS
            .iter()
            .map(|ext| dir.join(format!("{id}.{ext}")))
            .find(|p| p.is_file())
            .unwrap_or_else(|| dir.join(format!("{id}.png")))
    }

    pub fn scribble_path(&self, id: &str) -> PathBuf {
        self.split_dir()
            .join(&self.scribble_dir)
            .join(format!("{id}.png"))
    }

    pub fn gt_path(&self, id: &str) -> PathBuf {
        self.split_dir().join(&self.gt_dir).join(format!("{id}.png"))
    }

    pub fn write(&self) -> Result<()> {
        let path = self.split_dir().join(MANIFEST_FILE);
        let mut text = self.ids.join("\n");
        text.push('\n');
        write_atomic(&path, text.as_bytes())
    }
}

fn check_dims(what: &'static str, expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected != actual {
        return Err(Error::SizeMismatch {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}

/// Loads one sample. Training splits require a scribble; evaluation splits
/// require a ground-truth mask and use an empty scribble when none exists.
pub fn load_sample(manifest: &DatasetManifest, id: &str) -> Result<Sample> {
    if !manifest.contains(id) {
        return Err(Error::UnknownSample(id.to_string()));
    }
    let image = load_image(&manifest.image_path(id))?;
    let dims = image.dims();

    let scribble_path = manifest.scribble_path(id);
    let scribble = match manifest.kind {
        SplitKind::Train => Some(decode_scribble(&read_bytes(&scribble_path)?)?),
        SplitKind::Eval if scribble_path.is_file() => {
            Some(decode_scribble(&read_bytes(&scribble_path)?)?)
        }
        SplitKind::Eval => None,
    };
    let scribble = match scribble {
        Some(s) => {
            check_dims("scribble", dims, s.dims())?;
            s
        }
        None => ScribbleMap::unlabeled(dims.0, dims.1),
    };

    let gt_mask = match manifest.kind {
        SplitKind::Eval => {
            let gt = load_mask(&manifest.gt_path(id))?;
            check_dims("ground truth", dims, gt.dim())?;
            Some(gt)
        }
        SplitKind::Train => None,
    };

    Ok(Sample {
        id: id.to_string(),
        image,
        scribble,
        gt_mask,
    })
}

/// Writes a sample's image, scribble and (when present) mask into the
/// split layout. The manifest file is not touched.
pub fn save_sample(manifest: &DatasetManifest, sample: &Sample) -> Result<()> {
    let dir = manifest.split_dir();
    save_image(
        &dir.join(&manifest.image_dir).join(format!("{}.png", sample.id)),
        &sample.image,
    )?;
    write_atomic(
        &manifest.scribble_path(&sample.id),
        &encode_scribble(&sample.scribble)?,
    )?;
    if let Some(gt) = &sample.gt_mask {
        save_mask(&manifest.gt_path(&sample.id), gt)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    MissingImage,
    MissingScribble,
    MissingGroundTruth,
    Unreadable(String),
    BadLabels(String),
    SizeMismatch(String),
    MissingClass(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub split: String,
    pub id: String,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}: {:?}", self.split, self.id, self.kind)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub splits: Vec<String>,
    pub samples_checked: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

fn classify(err: &Error) -> ViolationKind {
    match err {
        Error::InvalidScribbleLabel { .. } | Error::InvalidScribbleFormat(_) => {
            ViolationKind::BadLabels(err.to_string())
        }
        Error::SizeMismatch { .. } => ViolationKind::SizeMismatch(err.to_string()),
        other => ViolationKind::Unreadable(other.to_string()),
    }
}

fn validate_sample(manifest: &DatasetManifest, id: &str) -> Vec<ViolationKind> {
    let mut found = Vec::new();
    if !manifest.image_path(id).is_file() {
        found.push(ViolationKind::MissingImage);
    }
    match manifest.kind {
        SplitKind::Train if !manifest.scribble_path(id).is_file() => {
            found.push(ViolationKind::MissingScribble)
        }
        SplitKind::Eval if !manifest.gt_path(id).is_file() => {
            found.push(ViolationKind::MissingGroundTruth)
        }
        _ => {}
    }
    if !found.is_empty() {
        return found;
    }
    match load_sample(manifest, id) {
        Ok(sample) => {
            if manifest.kind == SplitKind::Train {
                for label in [Label::Foreground, Label::Background] {
                    if sample.scribble.count(label) == 0 {
                        found.push(ViolationKind::MissingClass(format!("{label:?}")));
                    }
                }
            }
        }
        Err(e) => found.push(classify(&e)),
    }
    found
}

/// Checks one split.
pub fn validate_split(manifest: &DatasetManifest) -> ValidationReport {
    let mut report = ValidationReport::default();
    collect_split(manifest, &mut report);
    report
}

fn collect_split(manifest: &DatasetManifest, report: &mut ValidationReport) {
    report.splits.push(manifest.split.clone());
    for id in &manifest.ids {
        report.samples_checked += 1;
        for kind in validate_sample(manifest, id) {
            report.violations.push(Violation {
                split: manifest.split.clone(),
                id: id.clone(),
                kind,
            });
        }
    }
}

/// Checks every split under `root` (any sub-directory holding `images/`).
pub fn validate_dataset(root: &Path) -> Result<ValidationReport> {
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut splits: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("images").is_dir())
        .filter_map(|e| e.file_name().to_str().map(String::from))
        .collect();
    splits.sort();
    let mut report = ValidationReport::default();
    for split in splits {
        let manifest = DatasetManifest::open(root, &split)?;
        collect_split(&manifest, &mut report);
    }
    Ok(report)
}
