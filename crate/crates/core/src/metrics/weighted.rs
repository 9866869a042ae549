//! Weighted F-measure: errors are smoothed towards the nearest foreground
//! pixel and background errors are amplified with distance from the object.

use ndarray::{Array2, ArrayView2};

const EPS: f64 = f64::EPSILON;
const GAUSS_SIZE: usize = 7;
const GAUSS_SIGMA: f64 = 5.0;

/// Nearest foreground pixel of every pixel (itself for foreground pixels)
/// and the squared distance to it. Ties resolve to the smallest
/// `(row, col)`. `None` when there is no foreground.
///
/// Runs a per-column pass (nearest foreground row in each column) followed
/// by a per-row minimisation over columns: `O(HW(H + W))`.
pub fn nearest_foreground(gt: ArrayView2<bool>) -> Option<Array2<(u64, usize, usize)>> {
    let (h, w) = gt.dim();
    if !gt.iter().any(|&g| g) {
        return None;
    }
    // nearest[y][x] = closest foreground row in column x, smaller row on ties
    let mut nearest = Array2::<Option<usize>>::from_elem((h, w), None);
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if gt[[y, x]] {
                last = Some(y);
            }
            nearest[[y, x]] = last;
        }
        let mut next: Option<usize> = None;
        for y in (0..h).rev() {
            if gt[[y, x]] {
                next = Some(y);
            }
            let up = nearest[[y, x]];
            nearest[[y, x]] = match (up, next) {
                (Some(u), Some(d)) => Some(if d - y < y - u { d } else { u }),
                (u, d) => u.or(d),
            };
        }
    }
    let mut out = Array2::from_elem((h, w), (u64::MAX, 0, 0));
    for y in 0..h {
        for x in 0..w {
            let mut best = (u64::MAX, usize::MAX, usize::MAX);
            for xc in 0..w {
                if let Some(r) = nearest[[y, xc]] {
                    let dy = y.abs_diff(r) as u64;
                    let dx = x.abs_diff(xc) as u64;
                    let cand = (dy * dy + dx * dx, r, xc);
                    if cand < best {
                        best = cand;
                    }
                }
            }
            out[[y, x]] = best;
        }
    }
    Some(out)
}

/// Normalized 1-D Gaussian; its outer product is the 7×7 kernel.
pub fn gaussian_1d() -> [f64; GAUSS_SIZE] {
    let r = (GAUSS_SIZE / 2) as f64;
    let mut k = [0.0; GAUSS_SIZE];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * GAUSS_SIGMA * GAUSS_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian smoothing with zero padding.
fn smooth(x: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let k = gaussian_1d();
    let r = (GAUSS_SIZE / 2) as isize;
    let mut rows = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for xx in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let c = xx as isize + i as isize - r;
                if c >= 0 && (c as usize) < w {
                    acc += kv * x[[y, c as usize]];
                }
            }
            rows[[y, xx]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for xx in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let r_ = y as isize + i as isize - r;
                if r_ >= 0 && (r_ as usize) < h {
                    acc += kv * rows[[r_ as usize, xx]];
                }
            }
            out[[y, xx]] = acc;
        }
    }
    out
}

/// Weighted F-measure with `beta2` the squared recall weight. Empty ground
/// truth scores 0.
pub fn weighted_fbeta_with(pred: ArrayView2<f64>, gt: ArrayView2<bool>, beta2: f64) -> f64 {
    let Some(nearest) = nearest_foreground(gt) else {
        log::warn!("weighted F-measure on empty ground truth is defined as 0");
        return 0.0;
    };
    let (h, w) = gt.dim();
    let err = Array2::from_shape_fn((h, w), |(y, x)| (pred[[y, x]] - if gt[[y, x]] { 1.0 } else { 0.0 }).abs());
    let et = Array2::from_shape_fn((h, w), |(y, x)| {
        let (_, r, c) = nearest[[y, x]];
        err[[r, c]]
    });
    let ea = smooth(&et);
    let mut fp_w = 0.0;
    let mut fg_err = 0.0;
    let mut fg_n = 0.0;
    for y in 0..h {
        for x in 0..w {
            let e = err[[y, x]];
            if gt[[y, x]] {
                let m = if ea[[y, x]] < e { ea[[y, x]] } else { e };
                fg_err += m;
                fg_n += 1.0;
            } else {
                let dist = (nearest[[y, x]].0 as f64).sqrt();
                let importance = 2.0 - (0.5f64.ln() / 5.0 * dist).exp();
                fp_w += e * importance;
            }
        }
    }
    let tp_w = fg_n - fg_err;
    let recall = 1.0 - fg_err / fg_n;
    let precision = tp_w / (tp_w + fp_w + EPS);
    (1.0 + beta2) * recall * precision / (recall + beta2 * precision + EPS)
}
