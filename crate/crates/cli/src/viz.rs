//! Raster views: gate attention maps, connectivity features, error overlays.

use anyhow::Result;

use csau::connectivity::{connectivity_feature_map, ConnectivityModel};
use csau::data::{ColorImage, TilePlan};
use csau::map::Map2;
use csau::model::Network;
use csau::tensor::Tensor;

/// Attention maps of every gate (finest first) for the first window of the
/// plan, each at its gate's own resolution.
pub fn attention_maps(net: &Network, image: &ColorImage, plan: &TilePlan) -> Result<Vec<Map2>> {
    if net.num_gates() == 0 {
        return Ok(vec![]);
    }
    let (h, w) = image.dims();
    let size = plan.tile + 2 * plan.context;
    let (r0, c0) = plan.offsets[0];
    let mirror = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let m = i.rem_euclid(2 * n);
        (if m < n { m } else { 2 * n - 1 - m }) as usize
    };
    let top = r0 as isize - plan.context as isize;
    let left = c0 as isize - plan.context as isize;
    let mut data = Vec::with_capacity(image.channels.len() * size * size);
    for ch in &image.channels {
        for i in 0..size {
            for j in 0..size {
                data.push(ch.get(mirror(top + i as isize, h), mirror(left + j as isize, w)));
            }
        }
    }
    let window = Tensor::new(vec![1, image.channels.len(), size, size], data)?;
    let (_, alphas) = net.predict(&window)?;
    Ok(alphas.iter().map(Map2::from_tensor).collect::<csau::Result<_>>()?)
}

/// Per-pixel break risk `y * (1 - C^2)`; all black for an empty label.
pub fn feature_map(y: &Map2, model: &ConnectivityModel) -> Result<Map2> {
    Ok(connectivity_feature_map(y, model)?)
}

/// True positives white, false positives grey, false negatives red.
pub fn fn_overlay(pred: &Map2, y: &Map2, threshold: f64) -> Result<ColorImage> {
    pred.check_same("fn_overlay", y)?;
    let (h, w) = y.dims();
    let mut ch = [Map2::zeros(h, w), Map2::zeros(h, w), Map2::zeros(h, w)];
    for i in 0..h * w {
        let p = pred.data()[i] >= threshold;
        let t = y.data()[i] > 0.5;
        let rgb = match (p, t) {
            (true, true) => [1.0, 1.0, 1.0],
            (true, false) => [0.5, 0.5, 0.5],
            (false, true) => [1.0, 0.0, 0.0],
            (false, false) => [0.0, 0.0, 0.0],
        };
        for c in 0..3 {
            ch[c].data_mut()[i] = rgb[c];
        }
    }
    Ok(ColorImage::new(ch.to_vec())?)
}
