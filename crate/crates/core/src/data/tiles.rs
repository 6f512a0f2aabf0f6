//! Sliding-window prediction with mirrored context and Gaussian blending.

use rayon::prelude::*;

use super::io::ColorImage;
use crate::error::{Error, Result};
use crate::map::Map2;
use crate::model::Network;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TilePlan {
    pub height: usize,
    pub width: usize,
    pub tile: usize,
    pub stride: usize,
    /// Extra mirrored border fed to the predictor on every side and cropped away.
    pub context: usize,
    /// Top-left corners, row-major.
    pub offsets: Vec<(usize, usize)>,
    pub sigma: f64,
}

fn axis_offsets(dim: usize, tile: usize, stride: usize) -> Vec<usize> {
    if dim <= tile {
        return vec![0];
    }
    let mut v: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + tile < dim).collect();
    v.push(dim - tile);
    v.dedup();
    v
}

/// Stride is `tile * (1 - overlap)`; the last window on each axis is pulled
/// back so it ends at the image border. Images smaller than a tile get one
/// window whose overhang is mirrored.
pub fn make_tile_plan(height: usize, width: usize, tile: usize, overlap: f64) -> Result<TilePlan> {
    if tile == 0 || height == 0 || width == 0 {
        return Err(Error::invalid("tile_plan", "tile and image extents must be positive"));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::invalid("tile_plan", format!("overlap {overlap} outside [0, 1)")));
    }
    let stride = ((tile as f64 * (1.0 - overlap)).round() as usize).max(1);
    let rows = axis_offsets(height, tile, stride);
    let cols = axis_offsets(width, tile, stride);
    let offsets = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    Ok(TilePlan { height, width, tile, stride, context: 0, offsets, sigma: tile as f64 / 4.0 })
}

impl TilePlan {
    pub fn with_context(mut self, context: usize) -> Self {
        self.context = context;
        self
    }

    /// How many windows cover each pixel.
    pub fn coverage(&self) -> Vec<u32> {
        let mut cov = vec![0u32; self.height * self.width];
        for &(r, c) in &self.offsets {
            for i in r..(r + self.tile).min(self.height) {
                for j in c..(c + self.tile).min(self.width) {
                    cov[i * self.width + j] += 1;
                }
            }
        }
        cov
    }

    /// Blending weight of a pixel at `(di, dj)` inside a window.
    pub fn weight(&self, di: usize, dj: usize) -> f64 {
        let c = (self.tile as f64 - 1.0) / 2.0;
        let (dy, dx) = (di as f64 - c, dj as f64 - c);
        (-(dy * dy + dx * dx) / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Anything that maps a `[1,C,T,T]` window to a `T x T` probability map.
pub trait TilePredictor: Sync {
    fn predict_tile(&self, window: &Tensor) -> Result<Map2>;
}

impl TilePredictor for Network {
    fn predict_tile(&self, window: &Tensor) -> Result<Map2> {
        let (pred, _) = self.predict(window)?;
        Map2::from_tensor(&pred)
    }
}

/// Half-sample symmetric mirror of an index into `0..n`.
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

fn window(image: &ColorImage, top: isize, left: isize, size: usize) -> Tensor {
    let (h, w) = image.dims();
    let mut data = Vec::with_capacity(image.channels.len() * size * size);
    for ch in &image.channels {
        for i in 0..size {
            let si = mirror(top + i as isize, h);
            for j in 0..size {
                data.push(ch.get(si, mirror(left + j as isize, w)));
            }
        }
    }
    Tensor::new(vec![1, image.channels.len(), size, size], data).expect("sized window")
}

/// Predicts every window (possibly in parallel), then blends them in offset
/// order, so the result does not depend on scheduling. Pixels seen by a
/// single window take that window's value unchanged.
pub fn predict_tiled(p: &impl TilePredictor, image: &ColorImage, plan: &TilePlan) -> Result<Map2> {
    let (h, w) = image.dims();
    if (h, w) != (plan.height, plan.width) {
        return Err(Error::shape(
            "predict_tiled",
            "image size",
            format!("{}x{}", plan.height, plan.width),
            format!("{h}x{w}"),
        ));
    }
    let size = plan.tile + 2 * plan.context;
    let ctx = plan.context as isize;
    let preds: Vec<Map2> = plan
        .offsets
        .par_iter()
        .map(|&(r, c)| {
            let out = p.predict_tile(&window(image, r as isize - ctx, c as isize - ctx, size))?;
            if out.dims() != (size, size) {
                return Err(Error::shape("predict_tiled", "tile prediction", size, format!("{:?}", out.dims())));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut num = vec![0.0; h * w];
    let mut den = vec![0.0; h * w];
    let mut count = vec![0u32; h * w];
    let mut single = vec![0.0; h * w];
    for (&(r, c), pred) in plan.offsets.iter().zip(&preds) {
        for di in 0..plan.tile.min(h - r) {
            for dj in 0..plan.tile.min(w - c) {
                let at = (r + di) * w + c + dj;
                let v = pred.get(di + plan.context, dj + plan.context);
                let wt = plan.weight(di, dj);
                num[at] += wt * v;
                den[at] += wt;
                count[at] += 1;
                single[at] = v;
            }
        }
    }
    let mut out = Map2::zeros(h, w);
    for at in 0..h * w {
        out.data_mut()[at] = match count[at] {
            0 => return Err(Error::invalid("predict_tiled", format!("pixel {} not covered by the plan", at))),
            1 => single[at],
            _ => num[at] / den[at],
        };
    }
    Ok(out)
}
