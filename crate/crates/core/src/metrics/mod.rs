//! Evaluation measures and dataset-level reports.
//!
//! Predictions are used as given (values in `[0, 1]`, no min-max
//! rescaling); ground truth is binary.

mod enhanced;
mod structure;
mod weighted;

pub use enhanced::{enhanced_alignment, thresholds as e_thresholds};
pub use weighted::{gaussian_1d, nearest_foreground};

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{list_raster_ids, load_gray, load_mask, write_atomic};
use crate::resample::{resize_nearest, resize_plane};
use crate::{Error, Result};

fn check_shapes(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::SizeMismatch {
            what: "prediction",
            expected: gt.dim(),
            actual: pred.dim(),
        });
    }
    if pred.is_empty() {
        return Err(Error::InvalidConfig("metrics need a non-empty map".into()));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> Result<f64> {
    check_shapes(pred, gt)?;
    let sum: f64 = pred
        .iter()
        .zip(gt.iter())
        .map(|(&p, &g)| (p - if g { 1.0 } else { 0.0 }).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

/// S-measure with equal object and region weights.
pub fn s_measure(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> Result<f64> {
    check_shapes(pred, gt)?;
    Ok(structure::s_measure_with(pred, gt, 0.5))
}

pub fn s_measure_with(pred: ArrayView2<f64>, gt: ArrayView2<bool>, alpha: f64) -> Result<f64> {
    check_shapes(pred, gt)?;
    Ok(structure::s_measure_with(pred, gt, alpha))
}

/// Mean E-measure over 256 thresholds.
pub fn e_measure(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> Result<f64> {
    check_shapes(pred, gt)?;
    Ok(enhanced::e_measure(pred, gt))
}

/// Weighted F-measure with `beta² = 1`.
pub fn weighted_fbeta(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> Result<f64> {
    weighted_fbeta_with(pred, gt, 1.0)
}

pub fn weighted_fbeta_with(pred: ArrayView2<f64>, gt: ArrayView2<bool>, beta2: f64) -> Result<f64> {
    check_shapes(pred, gt)?;
    Ok(weighted::weighted_fbeta_with(pred, gt, beta2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub mae: f64,
    pub s_measure: f64,
    pub e_measure: f64,
    pub weighted_fbeta: f64,
}

impl SampleMetrics {
    pub fn compute(id: &str, pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> Result<Self> {
        Ok(SampleMetrics {
            id: id.to_string(),
            mae: mae(pred, gt)?,
            s_measure: s_measure(pred, gt)?,
            e_measure: e_measure(pred, gt)?,
            weighted_fbeta: weighted_fbeta(pred, gt)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub s_measure: f64,
    pub e_measure: f64,
    pub weighted_fbeta: f64,
    pub count: usize,
    pub samples: Vec<SampleMetrics>,
}

impl MetricReport {
    /// Aggregates per-sample rows (sorted by id) into their means.
    pub fn from_samples(mut samples: Vec<SampleMetrics>) -> Self {
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        let n = samples.len().max(1) as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
        MetricReport {
            mae: mean(|s| s.mae),
            s_measure: mean(|s| s.s_measure),
            e_measure: mean(|s| s.e_measure),
            weighted_fbeta: mean(|s| s.weighted_fbeta),
            count: samples.len(),
            samples,
        }
    }

    /// Fixed-width summary: MAE, S_m, E_m, weighted F.
    pub fn table(&self, label: &str) -> String {
        format!(
            "{:<16} {:>8} {:>8} {:>8} {:>8}\n{:<16} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            "dataset", "MAE", "S_m", "E_m", "F_b^w", label, self.mae, self.s_measure, self.e_measure, self.weighted_fbeta
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.samples {
            w.serialize(s)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
        write_atomic(path, &bytes)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let samples = r.deserialize().collect::<std::result::Result<Vec<SampleMetrics>, _>>()?;
        Ok(MetricReport::from_samples(samples))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Optional common evaluation size; `None` evaluates at ground-truth
/// resolution, resizing predictions bilinearly when they differ.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum EvalResolution {
    #[default]
    Native,
    Square(usize),
}

/// Brings a prediction and its ground truth to the evaluation resolution.
pub fn align_for_eval(pred: &Array2<f32>, gt: &Array2<bool>, resolution: EvalResolution) -> (Array2<f64>, Array2<bool>) {
    match resolution {
        EvalResolution::Native => {
            let (h, w) = gt.dim();
            let pred = if pred.dim() == (h, w) {
                pred.clone()
            } else {
                resize_plane(pred.view(), h, w)
            };
            (pred.mapv(|v| v as f64), gt.clone())
        }
        EvalResolution::Square(s) => (
            resize_plane(pred.view(), s, s).mapv(|v| v as f64),
            resize_nearest(gt.view(), s, s),
        ),
    }
}

/// Scores every prediction in `pred_dir` against the mask of the same id in
/// `gt_dir`. The two id sets must match exactly.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path, resolution: EvalResolution) -> Result<MetricReport> {
    let preds = list_raster_ids(pred_dir)?;
    let gts = list_raster_ids(gt_dir)?;
    let missing_pred: Vec<String> = gts.iter().filter(|id| !preds.contains(id)).cloned().collect();
    let missing_gt: Vec<String> = preds.iter().filter(|id| !gts.contains(id)).cloned().collect();
    if !missing_pred.is_empty() || !missing_gt.is_empty() {
        return Err(Error::IdMismatch { missing_pred, missing_gt });
    }
    let find = |dir: &Path, id: &str| {
        ["png", "jpg", "jpeg"]
            .iter()
            .map(|ext| dir.join(format!("{id}.{ext}")))
            .find(|p| p.is_file())
            .unwrap_or_else(|| dir.join(format!("{id}.png")))
    };
    let mut samples = Vec::with_capacity(gts.len());
    for id in &gts {
        let pred = load_gray(&find(pred_dir, id))?;
        let gt = load_mask(&find(gt_dir, id))?;
        let (pred, gt) = align_for_eval(&pred, &gt, resolution);
        samples.push(SampleMetrics::compute(id, pred.view(), gt.view())?);
    }
    Ok(MetricReport::from_samples(samples))
}
