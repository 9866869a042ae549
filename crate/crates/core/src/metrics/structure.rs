//! Structure measure: object-aware plus region-aware similarity.

use ndarray::{s, ArrayView2};

const EPS: f64 = f64::EPSILON;

/// Mean and sample standard deviation of `values`; the deviation is 0 for
/// fewer than two values.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let (mean, std) = mean_std(values);
    2.0 * mean / (mean * mean + 1.0 + std + EPS)
}

fn object_similarity(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> f64 {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if g {
            fg.push(p);
        } else {
            bg.push(1.0 - p);
        }
    }
    let u = fg.len() as f64 / pred.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// SSIM-like score of one quadrant; an empty quadrant scores 0 (it always
/// carries zero weight).
fn quadrant_ssim(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let x = pred.sum() / nf;
    let y = gt.iter().filter(|&&g| g).count() as f64 / nf;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let dp = p - x;
        let dg = if g { 1.0 } else { 0.0 } - y;
        sxx += dp * dp;
        syy += dg * dg;
        sxy += dp * dg;
    }
    let denom = nf - 1.0 + EPS;
    let (sxx, syy, sxy) = (sxx / denom, syy / denom, sxy / denom);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Split point `(x, y)`: one past the rounded foreground centroid.
pub(crate) fn centroid(gt: ArrayView2<bool>) -> (usize, usize) {
    let (h, w) = gt.dim();
    let mut area = 0.0;
    let mut sum_x = 0.0;
    let mut sum_y = 0.0;
    for ((r, c), &g) in gt.indexed_iter() {
        if g {
            area += 1.0;
            sum_x += c as f64;
            sum_y += r as f64;
        }
    }
    let (cx, cy) = if area == 0.0 {
        ((w as f64 / 2.0).round_ties_even(), (h as f64 / 2.0).round_ties_even())
    } else {
        ((sum_x / area).round_ties_even(), (sum_y / area).round_ties_even())
    };
    ((cx as usize + 1).min(w), (cy as usize + 1).min(h))
}

fn region_similarity(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> f64 {
    let (h, w) = gt.dim();
    let (x, y) = centroid(gt);
    let area = (h * w) as f64;
    let w1 = (x * y) as f64 / area;
    let w2 = (y * (w - x)) as f64 / area;
    let w3 = ((h - y) * x) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let q = |rows: std::ops::Range<usize>, cols: std::ops::Range<usize>| {
        quadrant_ssim(
            pred.slice(s![rows.clone(), cols.clone()]),
            gt.slice(s![rows, cols]),
        )
    };
    w1 * q(0..y, 0..x) + w2 * q(0..y, x..w) + w3 * q(y..h, 0..x) + w4 * q(y..h, x..w)
}

/// S-measure with weight `alpha` on the object term. Degenerate ground
/// truth falls back to the mean prediction (or its complement).
pub fn s_measure_with(pred: ArrayView2<f64>, gt: ArrayView2<bool>, alpha: f64) -> f64 {
    let n = gt.len() as f64;
    let y = gt.iter().filter(|&&g| g).count() as f64 / n;
    let mean_pred = pred.sum() / n;
    if y == 0.0 {
        1.0 - mean_pred
    } else if y == 1.0 {
        mean_pred
    } else {
        let score = alpha * object_similarity(pred, gt) + (1.0 - alpha) * region_similarity(pred, gt);
        score.max(0.0)
    }
}
