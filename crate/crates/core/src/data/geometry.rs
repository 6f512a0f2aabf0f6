//! Centred zero padding and the rotation/flip augmentation set.

use super::io::{ColorImage, SamplePair};
use crate::error::{Error, Result};
use crate::map::Map2;

/// Top and left margins that centre an `h x w` source in `th x tw`.
/// Odd remainders put the extra row/column at the bottom/right.
pub fn pad_offsets(h: usize, w: usize, th: usize, tw: usize) -> (usize, usize) {
    ((th - h) / 2, (tw - w) / 2)
}

pub fn pad_to(m: &Map2, th: usize, tw: usize) -> Result<Map2> {
    let (h, w) = m.dims();
    if th < h || tw < w {
        return Err(Error::invalid("pad_to", format!("target {th}x{tw} smaller than source {h}x{w}")));
    }
    let (top, left) = pad_offsets(h, w, th, tw);
    let mut out = Map2::zeros(th, tw);
    for i in 0..h {
        out.data_mut()[(i + top) * tw + left..][..w].copy_from_slice(&m.data()[i * w..][..w]);
    }
    Ok(out)
}

/// Inverse of [`pad_to`] for a source of `h x w`.
pub fn unpad(m: &Map2, h: usize, w: usize) -> Result<Map2> {
    let (th, tw) = m.dims();
    if th < h || tw < w {
        return Err(Error::invalid("unpad", format!("source {h}x{w} larger than padded {th}x{tw}")));
    }
    let (top, left) = pad_offsets(h, w, th, tw);
    Ok(Map2::from_fn(h, w, |i, j| m.get(i + top, j + left)))
}

pub fn pad_image(im: &ColorImage, th: usize, tw: usize) -> Result<ColorImage> {
    ColorImage::new(im.channels.iter().map(|c| pad_to(c, th, tw)).collect::<Result<_>>()?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Flip {
    None,
    /// Mirror columns.
    Horizontal,
    /// Mirror rows.
    Vertical,
}

/// One of the 270 augmentation transforms: rotate, then flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Variant {
    pub rotation_deg: u32,
    pub flip: Flip,
}

pub const ROTATION_STEP_DEG: u32 = 4;
pub const NUM_VARIANTS: usize = 270;

/// Rotation-major order; index 0 is the identity.
pub fn variants() -> Vec<Variant> {
    let mut v = Vec::with_capacity(NUM_VARIANTS);
    for k in 0..360 / ROTATION_STEP_DEG {
        for flip in [Flip::None, Flip::Horizontal, Flip::Vertical] {
            v.push(Variant { rotation_deg: k * ROTATION_STEP_DEG, flip });
        }
    }
    v
}

fn sin_cos(deg: u32) -> (f64, f64) {
    match deg % 360 {
        0 => (0.0, 1.0),
        90 => (1.0, 0.0),
        180 => (0.0, -1.0),
        270 => (-1.0, 0.0),
        d => (d as f64).to_radians().sin_cos(),
    }
}

#[derive(Clone, Copy)]
enum Interp {
    Bilinear,
    Nearest,
}

/// Rotates a square map about its centre `(n - 1) / 2`; uncovered pixels are 0.
fn rotate(m: &Map2, deg: u32, interp: Interp) -> Map2 {
    if deg % 360 == 0 {
        return m.clone();
    }
    let (h, w) = m.dims();
    let (s, c) = sin_cos(deg);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    Map2::from_fn(h, w, |i, j| {
        let (y, x) = (i as f64 - cy, j as f64 - cx);
        // inverse rotation of the output coordinate
        let sy = c * y - s * x + cy;
        let sx = s * y + c * x + cx;
        match interp {
            Interp::Nearest => {
                let (ry, rx) = (sy.round(), sx.round());
                if ry < 0.0 || rx < 0.0 || ry > (h - 1) as f64 || rx > (w - 1) as f64 {
                    0.0
                } else {
                    m.get(ry as usize, rx as usize)
                }
            }
            Interp::Bilinear => {
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let at = |a: f64, b: f64| m.get_or_zero(a as isize, b as isize);
                (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
                    + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0))
            }
        }
    })
}

fn flip(m: &Map2, f: Flip) -> Map2 {
    let (h, w) = m.dims();
    match f {
        Flip::None => m.clone(),
        Flip::Horizontal => Map2::from_fn(h, w, |i, j| m.get(i, w - 1 - j)),
        Flip::Vertical => Map2::from_fn(h, w, |i, j| m.get(h - 1 - i, j)),
    }
}

pub fn transform_image(m: &Map2, v: Variant) -> Map2 {
    flip(&rotate(m, v.rotation_deg, Interp::Bilinear), v.flip)
}

pub fn transform_label(m: &Map2, v: Variant) -> Map2 {
    flip(&rotate(m, v.rotation_deg, Interp::Nearest), v.flip)
}

pub fn apply_variant(pair: &SamplePair, v: Variant) -> Result<SamplePair> {
    let (h, w) = pair.label.dims();
    if h != w {
        return Err(Error::invalid("augment", format!("canvas {h}x{w} is not square; pad first")));
    }
    Ok(SamplePair {
        id: pair.id.clone(),
        image: pair.image.map_channels(|c| transform_image(c, v)),
        label: transform_label(&pair.label, v),
    })
}

/// All 270 variants of one sample, in [`variants`] order.
pub fn augment(pair: &SamplePair) -> Result<Vec<SamplePair>> {
    variants().into_iter().map(|v| apply_variant(pair, v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drive_margins() {
        let m = Map2::filled(584, 565, 1.0);
        let p = pad_to(&m, 640, 640).unwrap();
        assert_eq!(pad_offsets(584, 565, 640, 640), (28, 37));
        // bottom 28 rows and right 38 columns are zero
        assert_eq!(p.get(28, 37), 1.0);
        assert_eq!(p.get(27, 37), 0.0);
        assert_eq!(p.get(28 + 583, 37 + 564), 1.0);
        assert_eq!(p.get(28 + 584, 37), 0.0);
        assert_eq!(p.get(28, 37 + 565), 0.0);
        assert_eq!(unpad(&p, 584, 565).unwrap(), m);
    }

    #[test]
    fn smaller_target_rejected() {
        assert!(pad_to(&Map2::zeros(4, 4), 3, 4).is_err());
    }

    #[test]
    fn variant_list() {
        let v = variants();
        assert_eq!(v.len(), NUM_VARIANTS);
        assert_eq!(v[0], Variant { rotation_deg: 0, flip: Flip::None });
        assert_eq!(v.last().unwrap().rotation_deg, 356);
    }

    #[test]
    fn half_turn_is_double_flip() {
        let m = Map2::from_fn(7, 7, |i, j| ((i * 3 + j * j) % 2) as f64);
        let rot = transform_label(&m, Variant { rotation_deg: 180, flip: Flip::None });
        let both = flip(&flip(&m, Flip::Horizontal), Flip::Vertical);
        assert_eq!(rot, both);
    }

    #[test]
    fn quarter_turns_are_exact_for_images() {
        let m = Map2::from_fn(6, 6, |i, j| (i * 6 + j) as f64 / 36.0);
        let r4 = (0..4).fold(m.clone(), |a, _| transform_image(&a, Variant { rotation_deg: 90, flip: Flip::None }));
        assert_eq!(r4, m);
    }

    #[test]
    fn labels_stay_binary() {
        let m = Map2::from_fn(9, 9, |i, j| ((i + j) % 3 == 0) as u8 as f64);
        let r = transform_label(&m, Variant { rotation_deg: 32, flip: Flip::Vertical });
        assert!(r.is_binary());
    }
}
