//! Naive reference implementations shared by the integration tests and the
//! acceptance gate. Each one is a direct transcription of the definition,
//! written without reusing library internals.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scribble_cod::data::{Image, Label, ScribbleMap};
use scribble_cod::objectives::LossConfig;
use scribble_cod::views::ViewTransform;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |_| rng.random_range(0.02..0.98))
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::new(Array3::from_shape_fn((h, w, 3), |_| rng.random::<f32>())).unwrap()
}

pub fn random_scribble(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> ScribbleMap {
    let mut labels = Array2::<u8>::zeros((h, w));
    for v in labels.iter_mut() {
        if rng.random::<f64>() < density {
            *v = if rng.random_bool(0.5) { 1 } else { 2 };
        }
    }
    labels[[0, 0]] = 1;
    labels[[h - 1, w - 1]] = 2;
    ScribbleMap::new(labels).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<bool> {
    // a blob plus noise keeps the structure measures away from degenerate cases
    let (cy, cx) = (rng.random_range(h / 4..3 * h / 4), rng.random_range(w / 4..3 * w / 4));
    let r = rng.random_range(2.0..(h.min(w) as f64 / 3.0));
    Array2::from_shape_fn((h, w), |(y, x)| {
        let d = ((y as f64 - cy as f64).powi(2) + (x as f64 - cx as f64).powi(2)).sqrt();
        (d < r) ^ (rng.random::<f64>() < 0.05)
    })
}

/// Stacks `H × W` maps into a `(B, 1, H, W)` tensor.
pub fn batch_tensor(maps: &[Array2<f64>], dtype: DType) -> Tensor {
    let (h, w) = maps[0].dim();
    let data: Vec<f64> = maps.iter().flat_map(|m| m.iter().copied()).collect();
    Tensor::from_vec(data, (maps.len(), 1, h, w), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Central finite-difference gradient of `f` at `x` (f64).
pub fn numeric_grad(x: &Tensor, h: f64, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
    let base = values(x);
    let shape = x.dims().to_vec();
    (0..base.len())
        .map(|k| {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[k] += h;
            minus[k] -= h;
            let tp = Tensor::from_vec(plus, shape.as_slice(), &Device::Cpu).unwrap();
            let tm = Tensor::from_vec(minus, shape.as_slice(), &Device::Cpu).unwrap();
            (f(&tp) - f(&tm)) / (2.0 * h)
        })
        .collect()
}

/// Autodiff gradient of `f` at `x`.
pub fn analytic_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> Tensor) -> Vec<f64> {
    let var = Var::from_tensor(x).unwrap();
    let out = f(var.as_tensor());
    let grads = out.backward().unwrap();
    match grads.get(var.as_tensor()) {
        Some(g) => values(g),
        None => vec![0.0; x.elem_count()],
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, tiny)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

fn gauss(sq: f64, sigma: f64) -> f64 {
    (-sq / (2.0 * sigma * sigma)).exp()
}

fn d(pi: f64, pj: f64) -> f64 {
    1.0 - pi * pj - (1.0 - pi) * (1.0 - pj)
}

// ---------------------------------------------------------------- losses

/// Context affinity: every pixel against every other pixel, keeping those
/// inside the window around it.
pub fn context_affinity_oracle(preds: &[Array2<f64>], images: &[Image], cfg: &LossConfig) -> f64 {
    let r = (cfg.kernel_window / 2) as i64;
    let mut total = 0.0;
    for (p, img) in preds.iter().zip(images) {
        let (h, w) = p.dim();
        let mut sum = 0.0;
        for iy in 0..h {
            for ix in 0..w {
                let mut acc = 0.0;
                let mut count = 0usize;
                for jy in 0..h {
                    for jx in 0..w {
                        let (dy, dx) = (jy as i64 - iy as i64, jx as i64 - ix as i64);
                        if (dy, dx) == (0, 0) || dy.abs() > r || dx.abs() > r {
                            continue;
                        }
                        let ci = img.rgb(iy, ix);
                        let cj = img.rgb(jy, jx);
                        let dc: f64 = (0..3).map(|c| (ci[c] as f64 - cj[c] as f64).powi(2)).sum();
                        let k = gauss((dy * dy + dx * dx) as f64, cfg.sigma_s) * gauss(dc, cfg.sigma_c);
                        acc += k * d(p[[iy, ix]], p[[jy, jx]]);
                        count += 1;
                    }
                }
                sum += acc / count as f64;
            }
        }
        total += sum / (h * w) as f64;
    }
    total / preds.len() as f64
}

/// Covariance of every channel with the prediction, from explicit sums.
pub fn channel_significance_oracle(feature: &Array3<f32>, pred: &Array2<f64>) -> Vec<f64> {
    let (c, h, w) = feature.dim();
    let m = (h * w) as f64;
    let mut out = Vec::with_capacity(c);
    for k in 0..c {
        let mut sf = 0.0;
        let mut sp = 0.0;
        for y in 0..h {
            for x in 0..w {
                sf += feature[[k, y, x]] as f64;
                sp += pred[[y, x]];
            }
        }
        let (mf, mp) = (sf / m, sp / m);
        let mut cov = 0.0;
        for y in 0..h {
            for x in 0..w {
                cov += (feature[[k, y, x]] as f64 - mf) * (pred[[y, x]] - mp);
            }
        }
        out.push(cov / m);
    }
    out
}

/// Top-`n` channels by |sig|, lower index first on ties, by repeated scans.
pub fn top_channels_oracle(sig: &[f64], n: usize) -> Vec<usize> {
    let mut taken = vec![false; sig.len()];
    let mut out = Vec::new();
    for _ in 0..n.min(sig.len()) {
        let mut best: Option<usize> = None;
        for k in 0..sig.len() {
            if taken[k] {
                continue;
            }
            if best.is_none_or(|b| sig[k].abs() > sig[b].abs()) {
                best = Some(k);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

/// Boundary blocks as `(top, left, height, width)`, counted pixel by pixel.
pub fn boundary_oracle(pred: &Array2<f64>, scribble: &ScribbleMap, cfg: &LossConfig) -> Vec<(usize, usize, usize, usize)> {
    let (h, w) = pred.dim();
    let bs = cfg.block_size;
    let (by, bx) = (h.div_ceil(bs), w.div_ceil(bs));
    let mut fg = vec![0usize; by * bx];
    let mut bg = vec![0usize; by * bx];
    let mut n = vec![0usize; by * bx];
    for y in 0..h {
        for x in 0..w {
            let k = (y / bs) * bx + x / bs;
            n[k] += 1;
            let label = scribble.get(y, x);
            let p = pred[[y, x]];
            if label == Label::Foreground || (label == Label::Unlabeled && p > cfg.fg_conf) {
                fg[k] += 1;
            }
            if label == Label::Background || (label == Label::Unlabeled && p < cfg.bg_conf) {
                bg[k] += 1;
            }
        }
    }
    let mut out = Vec::new();
    for k in 0..by * bx {
        let frac = cfg.boundary_fraction;
        if fg[k] as f64 >= frac * n[k] as f64 && bg[k] as f64 >= frac * n[k] as f64 {
            let (top, left) = ((k / bx) * bs, (k % bx) * bs);
            out.push((top, left, bs.min(h - top), bs.min(w - left)));
        }
    }
    out
}

/// Semantic significance loss with all pixel pairs of every block visited
/// explicitly (both orders, including `i == j`).
pub fn semantic_oracle(preds: &[Array2<f64>], features: &[Array3<f32>], scribbles: &[ScribbleMap], cfg: &LossConfig, epoch: usize) -> f64 {
    let weight = cfg.w_ss_max * (epoch as f64 / cfg.w_ss_ramp_epochs as f64).min(1.0);
    let mut total = 0.0;
    for ((p, f), s) in preds.iter().zip(features).zip(scribbles) {
        let (h, w) = p.dim();
        let sig = channel_significance_oracle(f, p);
        let chans = top_channels_oracle(&sig, cfg.top_channels);
        let std: Vec<Array2<f64>> = chans
            .iter()
            .map(|&k| {
                let m = (h * w) as f64;
                let mean = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| f[[k, y, x]] as f64).sum::<f64>() / m;
                let var = (0..h)
                    .flat_map(|y| (0..w).map(move |x| (y, x)))
                    .map(|(y, x)| (f[[k, y, x]] as f64 - mean).powi(2))
                    .sum::<f64>()
                    / m;
                Array2::from_shape_fn((h, w), |(y, x)| (f[[k, y, x]] as f64 - mean) / var.sqrt())
            })
            .collect();
        let mut sum = 0.0;
        for (top, left, bh, bw) in boundary_oracle(p, s, cfg) {
            let pix: Vec<(usize, usize)> = (top..top + bh).flat_map(|y| (left..left + bw).map(move |x| (y, x))).collect();
            let mut acc = 0.0;
            for &i in &pix {
                for &j in &pix {
                    let pos = (i.0 as f64 - j.0 as f64).powi(2) + (i.1 as f64 - j.1 as f64).powi(2);
                    let feat: f64 = std.iter().map(|c| (c[i] - c[j]).powi(2)).sum();
                    acc += gauss(pos, cfg.sigma_s) * gauss(feat, cfg.sigma_c) * d(p[i], p[j]);
                }
            }
            sum += acc / pix.len() as f64;
        }
        total += sum / (h * w) as f64;
    }
    weight * total / preds.len() as f64
}

// ----------------------------------------------------------------- views

/// One axis of a view: for output index `u`, the source indices and
/// weights it reads, `None` for a tap that falls into the zero fill.
fn axis_taps(u: usize, out: usize, start: usize, len: usize, shift: i64, mirror: bool) -> Vec<(Option<usize>, f64)> {
    let u = if mirror { out - 1 - u } else { u };
    let s = ((u as f64 + 0.5) * len as f64 / out as f64 - 0.5).max(0.0);
    let lo = (s.floor() as usize).min(len - 1);
    let hi = (lo + 1).min(len - 1);
    let frac = if hi == lo { 0.0 } else { s - lo as f64 };
    let src = |t: usize| {
        let v = t as i64 - shift;
        (0..len as i64).contains(&v).then(|| start + v as usize)
    };
    vec![(src(lo), 1.0 - frac), (src(hi), frac)]
}

/// Transformed map and validity by inverse coordinate lookup per pixel.
pub fn view_oracle(t: &ViewTransform, map: &Array2<f64>) -> (Array2<f64>, Array2<bool>) {
    let (oh, ow) = (
        ((t.source.0 as f64 * t.resize_scale).round() as usize).max(1),
        ((t.source.1 as f64 * t.resize_scale).round() as usize).max(1),
    );
    let c = t.crop;
    let (dx, dy) = t.translate;
    let mut out = Array2::zeros((oh, ow));
    let mut valid = Array2::from_elem((oh, ow), false);
    for y in 0..oh {
        let ry = axis_taps(y, oh, c.top, c.height, dy, false);
        for x in 0..ow {
            let rx = axis_taps(x, ow, c.left, c.width, dx, t.hflip);
            let mut v = 0.0;
            let mut ok = true;
            for &(sy, wy) in &ry {
                for &(sx, wx) in &rx {
                    match (sy, sx) {
                        (Some(sy), Some(sx)) => v += wy * wx * map[[sy, sx]],
                        _ => {
                            if wy * wx > 0.0 {
                                ok = false;
                            }
                        }
                    }
                }
            }
            out[[y, x]] = v;
            valid[[y, x]] = ok;
        }
    }
    (out, valid)
}

// --------------------------------------------------------------- metrics

pub fn mae_oracle(pred: &Array2<f64>, gt: &Array2<bool>) -> f64 {
    let mut s = 0.0;
    for (p, g) in pred.iter().zip(gt.iter()) {
        s += (p - if *g { 1.0 } else { 0.0 }).abs();
    }
    s / pred.len() as f64
}

fn object(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * mean / (mean * mean + 1.0 + std + f64::EPSILON)
}

fn ssim_block(pred: &Array2<f64>, gt: &Array2<bool>, rows: (usize, usize), cols: (usize, usize)) -> f64 {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for y in rows.0..rows.1 {
        for x in cols.0..cols.1 {
            xs.push(pred[[y, x]]);
            ys.push(if gt[[y, x]] { 1.0 } else { 0.0 });
        }
    }
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cxy = 0.0;
    for k in 0..xs.len() {
        vx += (xs[k] - mx).powi(2);
        vy += (ys[k] - my).powi(2);
        cxy += (xs[k] - mx) * (ys[k] - my);
    }
    let den = n - 1.0 + f64::EPSILON;
    let (vx, vy, cxy) = (vx / den, vy / den, cxy / den);
    let a = 4.0 * mx * my * cxy;
    let b = (mx * mx + my * my) * (vx + vy);
    if a != 0.0 {
        a / (b + f64::EPSILON)
    } else if b == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// S-measure (α = 0.5) with the usual conventions: object scores with the
/// sample deviation, quadrants split one past the rounded centroid.
pub fn s_measure_oracle(pred: &Array2<f64>, gt: &Array2<bool>) -> f64 {
    let (h, w) = gt.dim();
    let n = (h * w) as f64;
    let fg_count = gt.iter().filter(|&&g| g).count();
    let mean_pred = pred.sum() / n;
    if fg_count == 0 {
        return 1.0 - mean_pred;
    }
    if fg_count == h * w {
        return mean_pred;
    }
    let fg: Vec<f64> = pred.iter().zip(gt.iter()).filter(|(_, g)| **g).map(|(p, _)| *p).collect();
    let bg: Vec<f64> = pred.iter().zip(gt.iter()).filter(|(_, g)| !**g).map(|(p, _)| 1.0 - *p).collect();
    let u = fg_count as f64 / n;
    let so = u * object(&fg) + (1.0 - u) * object(&bg);

    let (mut sy, mut sx) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if gt[[y, x]] {
                sy += y as f64;
                sx += x as f64;
            }
        }
    }
    let cx = ((sx / fg_count as f64).round_ties_even() as usize + 1).min(w);
    let cy = ((sy / fg_count as f64).round_ties_even() as usize + 1).min(h);
    let w1 = (cx * cy) as f64 / n;
    let w2 = ((w - cx) * cy) as f64 / n;
    let w3 = (cx * (h - cy)) as f64 / n;
    let w4 = 1.0 - w1 - w2 - w3;
    let sr = w1 * ssim_block(pred, gt, (0, cy), (0, cx))
        + w2 * ssim_block(pred, gt, (0, cy), (cx, w))
        + w3 * ssim_block(pred, gt, (cy, h), (0, cx))
        + w4 * ssim_block(pred, gt, (cy, h), (cx, w));
    (0.5 * so + 0.5 * sr).max(0.0)
}

/// Mean enhanced-alignment over thresholds `(k + 0.5) / 256`, every pixel
/// scored individually.
pub fn e_measure_oracle(pred: &Array2<f64>, gt: &Array2<bool>) -> f64 {
    let n = pred.len() as f64;
    let gt_f: Vec<f64> = gt.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect();
    let mean_gt = gt_f.iter().sum::<f64>() / n;
    let mut total = 0.0;
    for k in 0..256 {
        let t = (k as f64 + 0.5) / 256.0;
        let fm: Vec<f64> = pred.iter().map(|&p| if p >= t { 1.0 } else { 0.0 }).collect();
        let score = if mean_gt == 0.0 {
            fm.iter().map(|v| 1.0 - v).sum::<f64>() / n
        } else if mean_gt == 1.0 {
            fm.iter().sum::<f64>() / n
        } else {
            let mean_fm = fm.iter().sum::<f64>() / n;
            let mut s = 0.0;
            for i in 0..fm.len() {
                let a = fm[i] - mean_fm;
                let b = gt_f[i] - mean_gt;
                let align = 2.0 * a * b / (a * a + b * b + f64::EPSILON);
                s += (align + 1.0).powi(2) / 4.0;
            }
            s / n
        };
        total += score;
    }
    total / 256.0
}

/// Weighted F-measure (β² = 1): brute-force nearest foreground pixel (ties
/// to the smallest row, then column), full 7×7 Gaussian (σ = 5) with zero
/// padding.
pub fn weighted_f_oracle(pred: &Array2<f64>, gt: &Array2<bool>) -> f64 {
    let (h, w) = gt.dim();
    let fgs: Vec<(usize, usize)> = gt.indexed_iter().filter(|(_, g)| **g).map(|(i, _)| i).collect();
    if fgs.is_empty() {
        return 0.0;
    }
    let e = Array2::from_shape_fn((h, w), |(y, x)| (pred[[y, x]] - if gt[[y, x]] { 1.0 } else { 0.0 }).abs());
    let mut dist = Array2::<f64>::zeros((h, w));
    let mut et = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = (u64::MAX, 0usize, 0usize);
            for &(r, c) in &fgs {
                let d2 = ((y as i64 - r as i64).pow(2) + (x as i64 - c as i64).pow(2)) as u64;
                if (d2, r, c) < best {
                    best = (d2, r, c);
                }
            }
            dist[[y, x]] = (best.0 as f64).sqrt();
            et[[y, x]] = e[[best.1, best.2]];
        }
    }
    let mut kernel = [[0.0f64; 7]; 7];
    let mut ksum = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (a, b) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(a * a + b * b) / 50.0).exp();
            ksum += *v;
        }
    }
    let mut ea = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, row) in kernel.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    let (sy, sx) = (y as i64 + i as i64 - 3, x as i64 + j as i64 - 3);
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        acc += v / ksum * et[[sy as usize, sx as usize]];
                    }
                }
            }
            ea[[y, x]] = acc;
        }
    }
    let mut ew = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            ew[[y, x]] = if gt[[y, x]] {
                e[[y, x]].min(ea[[y, x]])
            } else {
                e[[y, x]] * (2.0 - ((0.5f64).ln() / 5.0 * dist[[y, x]]).exp())
            };
        }
    }
    let fg_n = fgs.len() as f64;
    let fg_err: f64 = fgs.iter().map(|&i| ew[i]).sum();
    let fp: f64 = ew.iter().zip(gt.iter()).filter(|(_, g)| !**g).map(|(v, _)| *v).sum();
    let tp = fg_n - fg_err;
    let recall = 1.0 - fg_err / fg_n;
    let precision = tp / (f64::EPSILON + tp + fp);
    2.0 * recall * precision / (f64::EPSILON + recall + precision)
}


// ------------------------------------------------------ gradient checks

/// Inputs for the 8×8 double-precision gradient checks: predictions kept
/// away from every threshold the losses use, so finite differences never
/// cross a selection boundary.
pub struct GradFixture {
    pub pred: Array2<f64>,
    pub other: Array2<f64>,
    pub image: Image,
    pub scribble: ScribbleMap,
    pub feature: Array3<f32>,
    pub cfg: LossConfig,
    pub epoch: usize,
}

pub fn grad_fixture(seed: u64) -> GradFixture {
    let mut rng = rng(seed);
    let (h, w) = (8, 8);
    // repeating columns: confident foreground, uncertain, two confident
    // background, so every 4-wide block mixes both classes
    let pred = Array2::from_shape_fn((h, w), |(_, x)| match x % 4 {
        0 => rng.random_range(0.85..0.97),
        1 => rng.random_range(0.3..0.7),
        _ => rng.random_range(0.03..0.15),
    });
    let other = random_map(&mut rng, h, w);
    let image = Image::new(Array3::from_shape_fn((h, w, 3), |_| rng.random_range(0.3..0.5))).unwrap();
    let scribble = random_scribble(&mut rng, h, w, 0.3);
    let feature = Array3::from_shape_fn((6, h, w), |(c, y, x)| {
        (c as f32 + 1.0) * (x as f32 - 3.5) * 0.1 + rng.random_range(-0.5f32..0.5) + y as f32 * 0.05
    });
    let cfg = LossConfig {
        block_size: 4,
        top_channels: 3,
        boundary_fraction: 0.25,
        sigma_c: 1.0,
        iv_start_epoch: 0,
        ..Default::default()
    };
    GradFixture {
        pred,
        other,
        image,
        scribble,
        feature,
        cfg,
        epoch: 30,
    }
}

/// Relative error between autodiff and central differences for every loss,
/// in the order pce, cv, rcv, iv, ca, ss, aux, total.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    use scribble_cod::objectives::{
        aux_loss, cv_loss, iv_loss, pce_loss, rcv_loss, semantic_significance_loss, total_loss, AffinityKernel,
        LossInputs, ViewPair,
    };

    let fx = grad_fixture(7);
    let x = batch_tensor(std::slice::from_ref(&fx.pred), DType::F64);
    let other = batch_tensor(std::slice::from_ref(&fx.other), DType::F64);
    let scribbles = vec![fx.scribble.clone()];
    let images = vec![fx.image.clone()];
    let features = vec![fx.feature.clone()];
    let valid = Array2::from_shape_fn((8, 8), |(y, x)| !(y == 0 && x < 3));
    let cfg = fx.cfg.clone();
    let epoch = fx.epoch;
    let h = 1e-5;

    let check = |f: &dyn Fn(&Tensor) -> Tensor| {
        let a = analytic_grad(&x, f);
        let n = numeric_grad(&x, h, &|t| scalar(&f(t)));
        rel_err(&a, &n)
    };

    let mut out = Vec::new();
    out.push(("pce", check(&|p| pce_loss(p, &scribbles).unwrap())));
    out.push(("cv", check(&|p| cv_loss(p, &other, &valid, cfg.alpha).unwrap())));
    // rcv: scaled single-sided gradients against differences of cv
    let rcv = {
        let gamma = cfg.gamma;
        let a_hat = analytic_grad(&x, &|p| rcv_loss(&other, p, &valid, cfg.alpha, gamma).unwrap());
        let n_hat: Vec<f64> = numeric_grad(&x, h, &|p| scalar(&cv_loss(&other, p, &valid, cfg.alpha).unwrap()))
            .into_iter()
            .map(|g| (1.0 + gamma) * g)
            .collect();
        let a_al = analytic_grad(&x, &|p| rcv_loss(p, &other, &valid, cfg.alpha, gamma).unwrap());
        let n_al: Vec<f64> = numeric_grad(&x, h, &|p| scalar(&cv_loss(p, &other, &valid, cfg.alpha).unwrap()))
            .into_iter()
            .map(|g| (1.0 - gamma) * g)
            .collect();
        rel_err(&a_hat, &n_hat).max(rel_err(&a_al, &n_al))
    };
    out.push(("rcv", rcv));
    out.push(("iv", check(&|p| iv_loss(p, &cfg, epoch).unwrap())));
    let kernel = AffinityKernel::new(&images, &cfg, &x).unwrap();
    out.push(("ca", check(&|p| kernel.loss(p).unwrap())));
    out.push(("ss", check(&|p| semantic_significance_loss(p, &features, &scribbles, &cfg, epoch).unwrap())));
    out.push(("aux", check(&|p| aux_loss(p, &scribbles, &kernel, &cfg, epoch).unwrap())));

    // total: the cross-view term passes (1 − γ) of its derivative to the
    // aligned prediction, so the reference is the rest of the objective plus
    // that share of the cv differences
    let mut t = ViewTransform::identity(8, 8);
    t.hflip = true;
    t.translate = (1, 0);
    let side: Vec<Tensor> = (1..5)
        .map(|k| batch_tensor(&[fx.other.mapv(|v| (v + 0.1 * k as f64).min(0.95))], DType::F64))
        .collect();
    let view_valid = t.validity_mask().unwrap();
    let total_with = |p: &Tensor, cfg: &LossConfig| {
        let outputs = [p.clone(), side[0].clone(), side[1].clone(), side[2].clone(), side[3].clone()];
        let pair = ViewPair {
            aligned: t.apply_to_tensor(p).unwrap(),
            transformed: other.clone(),
            valid: view_valid.clone(),
        };
        let inputs = LossInputs {
            outputs: &outputs,
            features: &features,
            scribbles: &scribbles,
            images: &images,
            view: Some(&pair),
            epoch,
        };
        total_loss(&inputs, cfg).unwrap().total
    };
    let analytic = analytic_grad(&x, &|p| total_with(p, &cfg));
    let no_cv = LossConfig { use_cv: false, ..cfg.clone() };
    let rest = numeric_grad(&x, h, &|p| scalar(&total_with(p, &no_cv)));
    let cross = numeric_grad(&x, h, &|p| {
        scalar(&cv_loss(&t.apply_to_tensor(p).unwrap(), &other, &view_valid, cfg.alpha).unwrap())
    });
    let numeric: Vec<f64> = rest.iter().zip(&cross).map(|(r, c)| r + (1.0 - cfg.gamma) * c).collect();
    out.push(("total", rel_err(&analytic, &numeric)));
    out
}

// ------------------------------------------------------------- network

use scribble_cod::crnet::{CrNetConfig, NetworkOutputs};

pub fn small_net(depth: usize, width: usize, channels: usize, size: usize) -> CrNetConfig {
    CrNetConfig {
        depth,
        width,
        channels,
        input_size: size,
        ..Default::default()
    }
}

/// Shape, range and finiteness contract of one forward pass.
pub fn check_outputs(out: &NetworkOutputs, b: usize, h: usize, w: usize, channels: usize) -> Result<(), String> {
    if out.maps.len() != 5 {
        return Err(format!("{} maps", out.maps.len()));
    }
    for (k, m) in out.maps.iter().enumerate() {
        if m.dims() != [b, 1, h, w] {
            return Err(format!("map {k} has shape {:?}", m.dims()));
        }
        let v = values(m);
        if let Some(bad) = v.iter().find(|x| !x.is_finite() || **x < 0.0 || **x > 1.0) {
            return Err(format!("map {k} holds {bad}"));
        }
    }
    let want = [b, channels, h.div_ceil(4), w.div_ceil(4)];
    if out.feature.dims() != want {
        return Err(format!("feature shape {:?}, expected {want:?}", out.feature.dims()));
    }
    if values(&out.feature).iter().any(|x| !x.is_finite()) {
        return Err("non-finite feature".into());
    }
    Ok(())
}

pub fn random_batch(seed: u64, b: usize, h: usize, w: usize, dtype: DType) -> Tensor {
    let mut rng = rng(seed);
    let data: Vec<f64> = (0..b * 3 * h * w).map(|_| rng.random::<f64>()).collect();
    Tensor::from_vec(data, (b, 3, h, w), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

// ------------------------------------------------------------ training

use scribble_cod::pipeline::TrainConfig;

/// A small but complete training setup: every loss term, every view
/// operation, a narrow network. Inside-view and semantic terms switch on
/// after the first epoch.
pub fn tiny_train(size: usize, steps: usize) -> TrainConfig {
    let mut c = TrainConfig {
        input_size: size,
        batch_size: 2,
        epochs: 4,
        max_steps: Some(steps),
        max_lr: 1e-2,
        seed: 3,
        ..Default::default()
    };
    c.net = small_net(18, 8, 8, size);
    c.loss.top_channels = 4;
    c.loss.block_size = 16;
    c.loss.iv_start_epoch = 1;
    c.loss.w_ss_ramp_epochs = 2;
    c
}

/// Every parameter and buffer of a network, by name.
pub fn snapshot(net: &scribble_cod::crnet::CrNet) -> Vec<(String, Vec<f64>)> {
    let store = net.store();
    let mut out: Vec<(String, Vec<f64>)> = store.params().iter().map(|(n, v)| (n.clone(), values(v.as_tensor()))).collect();
    for (n, _) in store.buffers() {
        out.push((n.clone(), values(&store.buffer(n).unwrap())));
    }
    out
}
