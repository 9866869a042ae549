//! Enhanced-alignment measure averaged over 256 binarization thresholds.
//!
//! For a binarized prediction the per-pixel enhanced alignment depends only
//! on which of the four (prediction, ground truth) label pairs the pixel
//! falls in, so each threshold reduces to four counts.

use ndarray::ArrayView2;

const EPS: f64 = f64::EPSILON;

/// Thresholds `(k + 0.5) / 256`; a pixel is foreground when `pred >= t`.
pub fn thresholds() -> impl Iterator<Item = f64> {
    (0..256).map(|k| (k as f64 + 0.5) / 256.0)
}

/// Enhanced alignment of one binary pixel pair given the two map means.
pub fn enhanced_alignment(fm: bool, gt: bool, mean_fm: f64, mean_gt: f64) -> f64 {
    let a = if fm { 1.0 } else { 0.0 } - mean_fm;
    let b = if gt { 1.0 } else { 0.0 } - mean_gt;
    let align = 2.0 * a * b / (a * a + b * b + EPS);
    (align + 1.0).powi(2) / 4.0
}

/// Mean enhanced-alignment score for the binarization at `t`.
pub(crate) fn e_at_threshold(fg_pred: &[f64], bg_pred: &[f64], t: f64) -> f64 {
    // both slices sorted ascending
    let fg_n = fg_pred.len();
    let bg_n = bg_pred.len();
    let n = (fg_n + bg_n) as f64;
    let tp = fg_n - fg_pred.partition_point(|&p| p < t);
    let fp = bg_n - bg_pred.partition_point(|&p| p < t);
    let (fn_, tn) = (fg_n - tp, bg_n - fp);
    if fg_n == 0 {
        return tn as f64 / n;
    }
    if bg_n == 0 {
        return tp as f64 / n;
    }
    let mean_fm = (tp + fp) as f64 / n;
    let mean_gt = fg_n as f64 / n;
    let sum = tp as f64 * enhanced_alignment(true, true, mean_fm, mean_gt)
        + fp as f64 * enhanced_alignment(true, false, mean_fm, mean_gt)
        + fn_ as f64 * enhanced_alignment(false, true, mean_fm, mean_gt)
        + tn as f64 * enhanced_alignment(false, false, mean_fm, mean_gt);
    sum / n
}

/// Mean E-measure over the 256 thresholds. When the ground truth is all
/// background (foreground) the score is the fraction of pixels predicted
/// background (foreground).
pub fn e_measure(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> f64 {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if g {
            fg.push(p);
        } else {
            bg.push(p);
        }
    }
    fg.sort_by(f64::total_cmp);
    bg.sort_by(f64::total_cmp);
    thresholds().map(|t| e_at_threshold(&fg, &bg, t)).sum::<f64>() / 256.0
}
