//! Procedural camouflage samples with exact masks and automatic scribbles.
//!
//! Background and foreground share the same smooth value-noise texture
//! model; the foreground parameters (base color, noise scale, amplitude)
//! differ from the background by at most `max_offset` relative, so the
//! object is low-contrast by construction. Scribbles are straight strokes
//! grown from a seed pixel inside the eroded foreground and the eroded
//! background.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Image, Label, Sample, ScribbleMap, MIN_SIDE};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Largest relative difference between foreground and background
    /// texture parameters.
    pub max_offset: f64,
    /// Erosion margin for scribble placement, as a fraction of the side.
    pub erosion_frac: f64,
    pub noise_amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            max_offset: 0.15,
            erosion_frac: 0.05,
            noise_amplitude: 0.3,
        }
    }
}

pub fn synth_generate(seed: u64, count: usize, size: usize) -> Result<Vec<Sample>> {
    synth_generate_with(&SynthConfig::default(), seed, count, size)
}

pub fn synth_generate_with(cfg: &SynthConfig, seed: u64, count: usize, size: usize) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::InvalidConfig("synthetic sample count must be at least 1".into()));
    }
    if size < MIN_SIDE {
        return Err(Error::InvalidConfig(format!(
            "synthetic size {size} cannot fit the erosion margins (minimum {MIN_SIDE})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| generate_one(cfg, &mut rng, size, format!("synth_{seed}_{i:04}")))
        .collect()
}

/// Smooth value noise in `[0, 1]` from a `cells × cells` lattice with
/// smoothstep interpolation.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Array2<f64> {
    let cells = cells.max(1);
    let lattice = Array2::from_shape_fn((cells + 2, cells + 2), |_| rng.random::<f64>());
    let step = size as f64 / cells as f64;
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    Array2::from_shape_fn((size, size), |(y, x)| {
        let fy = y as f64 / step;
        let fx = x as f64 / step;
        let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
        let (ty, tx) = (smooth(fy - iy as f64), smooth(fx - ix as f64));
        let top = lattice[[iy, ix]] * (1.0 - tx) + lattice[[iy, ix + 1]] * tx;
        let bot = lattice[[iy + 1, ix]] * (1.0 - tx) + lattice[[iy + 1, ix + 1]] * tx;
        top * (1.0 - ty) + bot * ty
    })
}

fn texture(rng: &mut ChaCha8Rng, size: usize, cells: f64) -> Array2<f64> {
    let coarse = value_noise(rng, size, cells.round() as usize);
    let fine = value_noise(rng, size, (cells * 2.7).round() as usize);
    (coarse * 0.65) + (fine * 0.35)
}

struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    harmonics: [(f64, f64); 3],
}

impl Blob {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 + 0.5 - self.cy;
        let dx = x as f64 + 0.5 - self.cx;
        let theta = dy.atan2(dx);
        let wobble: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(k, &(amp, phase))| amp * ((k as f64 + 2.0) * theta + phase).sin())
            .sum();
        (dy * dy + dx * dx).sqrt() <= self.radius * (1.0 + wobble)
    }
}

/// Pixels whose whole disc of radius `margin` lies inside `region` and the
/// image bounds.
fn erode(region: &Array2<bool>, margin: usize) -> Array2<bool> {
    let (h, w) = region.dim();
    let m = margin as isize;
    let offsets: Vec<(isize, isize)> = (-m..=m)
        .flat_map(|dy| (-m..=m).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= m * m)
        .collect();
    Array2::from_shape_fn((h, w), |(y, x)| {
        region[[y, x]]
            && offsets.iter().all(|&(dy, dx)| {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && region[[yy as usize, xx as usize]]
            })
    })
}

/// Straight stroke through `start`, extended both ways while it stays in
/// `allowed`, then thickened by its 4-neighbours inside `allowed`.
fn grow_stroke(allowed: &Array2<bool>, start: (usize, usize), theta: f64, max_len: f64) -> Vec<(usize, usize)> {
    let (h, w) = allowed.dim();
    let mut line = vec![start];
    for dir in [1.0, -1.0] {
        let (dy, dx) = (dir * theta.sin(), dir * theta.cos());
        let mut t = 1.0;
        while t <= max_len {
            let y = (start.0 as f64 + dy * t).round();
            let x = (start.1 as f64 + dx * t).round();
            if y < 0.0 || x < 0.0 || y as usize >= h || x as usize >= w || !allowed[[y as usize, x as usize]] {
                break;
            }
            line.push((y as usize, x as usize));
            t += 1.0;
        }
    }
    let mut stroke = line.clone();
    for &(y, x) in &line {
        let neighbours = [
            (y.wrapping_sub(1), x),
            (y + 1, x),
            (y, x.wrapping_sub(1)),
            (y, x + 1),
        ];
        for (ny, nx) in neighbours {
            if ny < h && nx < w && allowed[[ny, nx]] {
                stroke.push((ny, nx));
            }
        }
    }
    stroke.sort_unstable();
    stroke.dedup();
    stroke
}

fn generate_one(cfg: &SynthConfig, rng: &mut ChaCha8Rng, size: usize, id: String) -> Result<Sample> {
    let s = size as f64;
    let margin = (cfg.erosion_frac * s).ceil().max(1.0) as usize;

    let blob = Blob {
        cy: s * rng.random_range(0.38..0.62),
        cx: s * rng.random_range(0.38..0.62),
        radius: s * rng.random_range(0.18..0.26),
        harmonics: [
            (rng.random_range(0.0..0.12), rng.random_range(0.0..std::f64::consts::TAU)),
            (rng.random_range(0.0..0.08), rng.random_range(0.0..std::f64::consts::TAU)),
            (rng.random_range(0.0..0.05), rng.random_range(0.0..std::f64::consts::TAU)),
        ],
    };
    let mask = Array2::from_shape_fn((size, size), |(y, x)| blob.contains(y, x));

    let mut offset = || rng.random_range(-cfg.max_offset..=cfg.max_offset);
    let (o_scale, o_amp) = (offset(), offset());
    let o_color = [offset(), offset(), offset()];
    let bg_color: [f64; 3] = [
        rng.random_range(0.3..0.7),
        rng.random_range(0.3..0.7),
        rng.random_range(0.3..0.7),
    ];
    let bg_cells = rng.random_range(5.0..9.0);
    let bg_tex = texture(rng, size, bg_cells);
    let fg_tex = texture(rng, size, bg_cells * (1.0 + o_scale));
    let bg_amp = cfg.noise_amplitude;
    let fg_amp = cfg.noise_amplitude * (1.0 + o_amp);

    let pixels = Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
        let v = if mask[[y, x]] {
            bg_color[c] * (1.0 + o_color[c]) + fg_amp * (fg_tex[[y, x]] - 0.5)
        } else {
            bg_color[c] + bg_amp * (bg_tex[[y, x]] - 0.5)
        };
        v.clamp(0.0, 1.0) as f32
    });

    let inner_fg = erode(&mask, margin);
    let inner_bg = erode(&mask.mapv(|m| !m), margin);
    let fg_seeds: Vec<(usize, usize)> = inner_fg.indexed_iter().filter(|(_, &v)| v).map(|(p, _)| p).collect();
    let bg_seeds: Vec<(usize, usize)> = inner_bg.indexed_iter().filter(|(_, &v)| v).map(|(p, _)| p).collect();
    if fg_seeds.is_empty() || bg_seeds.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "size {size} leaves no room for scribbles after a {margin}px erosion"
        )));
    }

    // fg stroke starts at the eroded pixel closest to the blob centre
    let fg_start = *fg_seeds
        .iter()
        .min_by(|a, b| {
            let d = |p: &(usize, usize)| (p.0 as f64 + 0.5 - blob.cy).powi(2) + (p.1 as f64 + 0.5 - blob.cx).powi(2);
            d(a).total_cmp(&d(b))
        })
        .expect("non-empty");
    let bg_start = bg_seeds[rng.random_range(0..bg_seeds.len())];

    let mut scribble = ScribbleMap::unlabeled(size, size);
    let fg_theta = rng.random_range(0.0..std::f64::consts::PI);
    for (y, x) in grow_stroke(&inner_fg, fg_start, fg_theta, blob.radius * 0.8) {
        scribble.set(y, x, Label::Foreground);
    }
    let bg_theta = rng.random_range(0.0..std::f64::consts::PI);
    for (y, x) in grow_stroke(&inner_bg, bg_start, bg_theta, s * 0.25) {
        scribble.set(y, x, Label::Background);
    }

    Ok(Sample {
        id,
        image: Image::new(pixels)?,
        scribble,
        gt_mask: Some(mask),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_samples_each_with_both_classes() {
        let samples = synth_generate(1, 10, 96).unwrap();
        assert_eq!(samples.len(), 10);
        for s in &samples {
            assert_eq!(s.dims(), (96, 96));
            assert!(s.scribble.count(Label::Foreground) >= 1);
            assert!(s.scribble.count(Label::Background) >= 1);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = synth_generate(7, 3, 64).unwrap();
        let b = synth_generate(7, 3, 64).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(8, 3, 64).unwrap();
        assert_ne!(a[0].image, c[0].image);
    }

    #[test]
    fn scribbles_respect_the_mask() {
        for seed in 0..5 {
            for s in synth_generate(seed, 4, 80).unwrap() {
                let gt = s.gt_mask.as_ref().unwrap();
                for ((y, x), &v) in s.scribble.labels().indexed_iter() {
                    match Label::from_u8(v).unwrap() {
                        Label::Foreground => assert!(gt[[y, x]]),
                        Label::Background => assert!(!gt[[y, x]]),
                        Label::Unlabeled => {}
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(synth_generate(1, 0, 96).is_err());
        assert!(synth_generate(1, 2, 20).is_err());
    }

    #[test]
    fn erosion_shrinks_regions() {
        let mut region = Array2::from_elem((20, 20), false);
        for y in 5..15 {
            for x in 5..15 {
                region[[y, x]] = true;
            }
        }
        let inner = erode(&region, 2);
        assert!(inner[[10, 10]]);
        assert!(!inner[[5, 10]]);
        assert!(!inner[[6, 10]]);
        assert!(inner[[7, 10]]);
    }
}
