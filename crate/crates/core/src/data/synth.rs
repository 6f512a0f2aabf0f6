//! Synthetic curvilinear images: branching random-walk strokes over a
//! textured background.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::io::{ColorImage, SamplePair};
use crate::error::{Error, Result};
use crate::map::Map2;
use crate::metrics::gaussian_blur;
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct StrokeParams {
    pub min_strokes: usize,
    pub max_strokes: usize,
    pub min_width: usize,
    pub max_width: usize,
    pub branch_prob: f64,
    /// Accepted foreground fraction band.
    pub min_fraction: f64,
    pub max_fraction: f64,
    pub noise_std: f64,
}

impl Default for StrokeParams {
    fn default() -> Self {
        StrokeParams {
            min_strokes: 3,
            max_strokes: 8,
            min_width: 1,
            max_width: 3,
            branch_prob: 0.6,
            min_fraction: 0.02,
            max_fraction: 0.20,
            noise_std: 0.03,
        }
    }
}

const MAX_ATTEMPTS: usize = 200;

struct Canvas {
    n: usize,
    label: Vec<f64>,
    /// Darkening strength per pixel; thin strokes are fainter.
    ink: Vec<f64>,
}

impl Canvas {
    fn stamp(&mut self, y: f64, x: f64, width: usize, ink: f64) {
        let n = self.n as isize;
        let (cy, cx) = (y.round() as isize, x.round() as isize);
        let cells: &[(isize, isize)] = match width {
            1 => &[(0, 0)],
            2 => &[(0, 0), (0, 1), (1, 0), (1, 1)],
            _ => &[(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)],
        };
        for &(dy, dx) in cells {
            let (i, j) = (cy + dy, cx + dx);
            if i >= 0 && j >= 0 && i < n && j < n {
                let at = (i * n + j) as usize;
                self.label[at] = 1.0;
                self.ink[at] = self.ink[at].max(ink);
            }
        }
    }

    /// Smooth random walk: the heading drifts with a slowly varying turn rate.
    /// Returns the visited points so branches can start from them.
    fn stroke(
        &mut self,
        rng: &mut ChaCha8Rng,
        start: (f64, f64),
        heading: f64,
        len: usize,
        width: usize,
    ) -> Vec<(f64, f64)> {
        let turn = Normal::new(0.0, 0.02).expect("valid std");
        let ink = 0.25 + 0.2 * (width as f64 - 1.0);
        let (mut y, mut x) = start;
        let mut theta = heading;
        let mut omega: f64 = 0.0;
        let mut pts = Vec::with_capacity(len);
        for _ in 0..len {
            self.stamp(y, x, width, ink);
            pts.push((y, x));
            omega = (omega + turn.sample(rng)).clamp(-0.12, 0.12);
            theta += omega;
            // unit steps keep single-pixel strokes 8-connected
            y += theta.sin();
            x += theta.cos();
            let lim = self.n as f64 + 4.0;
            if y < -4.0 || x < -4.0 || y > lim || x > lim {
                break;
            }
        }
        pts
    }
}

fn draw_label(n: usize, rng: &mut ChaCha8Rng, p: &StrokeParams) -> Canvas {
    let mut c = Canvas { n, label: vec![0.0; n * n], ink: vec![0.0; n * n] };
    let strokes = rng.gen_range(p.min_strokes..=p.max_strokes);
    for s in 0..strokes {
        // the first stroke is always one pixel wide so thin structure exists
        let width = if s == 0 { p.min_width } else { rng.gen_range(p.min_width..=p.max_width) };
        let start = (rng.gen_range(0.0..n as f64), rng.gen_range(0.0..n as f64));
        let heading = rng.gen_range(0.0..std::f64::consts::TAU);
        let len = rng.gen_range(n / 2..=n + n / 2);
        let pts = c.stroke(rng, start, heading, len, width);
        if pts.len() > 4 && rng.gen_bool(p.branch_prob) {
            let from = pts[rng.gen_range(pts.len() / 4..pts.len())];
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let bw = rng.gen_range(p.min_width..=width);
            let turn = side * rng.gen_range(0.4..1.2);
            c.stroke(rng, from, heading + turn, len / 2, bw);
        }
    }
    c
}

fn render(c: &Canvas, rng: &mut ChaCha8Rng, p: &StrokeParams) -> Result<ColorImage> {
    let n = c.n;
    let ink = Map2::new(n, n, c.ink.clone())?;
    let soft = gaussian_blur(&ink, 0.7);
    let white = Normal::new(0.0, 1.0).expect("valid std");
    let field = Map2::from_fn(n, n, |_, _| white.sample(rng));
    let texture = gaussian_blur(&field, 4.0);
    let noise = Normal::new(0.0, p.noise_std).expect("valid std");
    let base = [0.78, 0.45, 0.22];
    let gain = [0.55, 0.9, 0.45];
    let channels = (0..3)
        .map(|ch| {
            Map2::from_fn(n, n, |i, j| {
                let v = base[ch] + 0.25 * texture.get(i, j) - gain[ch] * soft.get(i, j) + noise.sample(rng);
                v.clamp(0.0, 1.0)
            })
        })
        .collect();
    ColorImage::new(channels)
}

/// One sample, drawn from its own stream so it does not depend on how many
/// others are generated.
pub fn synth_sample(index: usize, size: usize, seed_: u64, p: &StrokeParams) -> Result<SamplePair> {
    if size == 0 || size % 16 != 0 {
        return Err(Error::invalid("synth", format!("size {size} must be a positive multiple of 16")));
    }
    if p.min_width == 0 || p.min_width > p.max_width || p.min_strokes == 0 || p.min_strokes > p.max_strokes {
        return Err(Error::invalid("synth", "inconsistent stroke parameters"));
    }
    let mut rng = seed::rng(seed_, "synth", index as u64);
    for _ in 0..MAX_ATTEMPTS {
        let canvas = draw_label(size, &mut rng, p);
        let frac = canvas.label.iter().sum::<f64>() / (size * size) as f64;
        if frac < p.min_fraction || frac > p.max_fraction {
            continue;
        }
        let image = render(&canvas, &mut rng, p)?;
        let label = Map2::new(size, size, canvas.label)?;
        return SamplePair::new(format!("synth_{index:05}"), image, label);
    }
    Err(Error::Data(format!(
        "synth: no sample within foreground band [{}, {}] after {MAX_ATTEMPTS} attempts",
        p.min_fraction, p.max_fraction
    )))
}

pub fn synth_dataset(n: usize, size: usize, seed_: u64, p: &StrokeParams) -> Result<Vec<SamplePair>> {
    synth_range(0..n, size, seed_, p)
}

/// Samples with indices in `range`; used to carve disjoint splits from one seed.
pub fn synth_range(
    range: std::ops::Range<usize>,
    size: usize,
    seed_: u64,
    p: &StrokeParams,
) -> Result<Vec<SamplePair>> {
    use rayon::prelude::*;
    range.into_par_iter().map(|i| synth_sample(i, size, seed_, p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectivity::{connectivity_map, ConnectivityModel};
    use crate::metrics::label_components;

    #[test]
    fn deterministic_per_seed() {
        let a = synth_dataset(3, 32, 5, &StrokeParams::default()).unwrap();
        let b = synth_dataset(3, 32, 5, &StrokeParams::default()).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(3, 32, 6, &StrokeParams::default()).unwrap();
        assert_ne!(a[0].label, c[0].label);
    }

    #[test]
    fn labels_in_band_with_thin_parts() {
        let p = StrokeParams::default();
        for s in synth_dataset(8, 64, 1, &p).unwrap() {
            let frac = s.label.sum() / (64.0 * 64.0);
            assert!((p.min_fraction..=p.max_fraction).contains(&frac), "{frac}");
            let fg: Vec<bool> = s.label.data().iter().map(|&v| v > 0.0).collect();
            assert!(label_components(&fg, 64, 64).1 >= 1);
            let c = connectivity_map(&s.label, &ConnectivityModel::default()).unwrap();
            assert!(c.data().iter().zip(s.label.data()).any(|(&ci, &y)| y == 1.0 && ci < 0.5));
            assert!(s.image.channels.iter().all(|ch| ch.in_unit_range()));
        }
    }

    #[test]
    fn bad_size_rejected() {
        assert!(synth_sample(0, 30, 1, &StrokeParams::default()).is_err());
    }
}
