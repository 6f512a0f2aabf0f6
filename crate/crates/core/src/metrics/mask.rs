//! Difference-of-Gaussians edges, the thin-structure mask and masked accuracy.

use crate::connectivity::{connectivity_map, ConnectivityModel};
use crate::error::{Error, Result};
use crate::map::Map2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DogParams {
    pub sigma1: f64,
    pub sigma2: f64,
    pub tau: f64,
}

impl Default for DogParams {
    fn default() -> Self {
        DogParams { sigma1: 1.0, sigma2: 1.6, tau: 0.01 }
    }
}

/// Normalized Gaussian truncated at radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian blur with reflective borders.
pub fn gaussian_blur(m: &Map2, sigma: f64) -> Map2 {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = m.dims();
    let rows = Map2::from_fn(h, w, |i, j| {
        k.iter().enumerate().map(|(t, kv)| kv * m.get(i, reflect(j as isize + t as isize - r, w))).sum()
    });
    Map2::from_fn(h, w, |i, j| {
        k.iter().enumerate().map(|(t, kv)| kv * rows.get(reflect(i as isize + t as isize - r, h), j)).sum()
    })
}

/// `|G(sigma1) * y - G(sigma2) * y| > tau` as a 0/1 map.
pub fn dog_edges(y: &Map2, p: &DogParams) -> Result<Map2> {
    if !y.is_binary() {
        return Err(Error::invalid("dog_edges", "label must be binary"));
    }
    if !(p.sigma1 > 0.0 && p.sigma2 > 0.0 && p.tau >= 0.0) {
        return Err(Error::invalid("dog_edges", "sigmas must be positive and tau non-negative"));
    }
    let a = gaussian_blur(y, p.sigma1);
    let b = gaussian_blur(y, p.sigma2);
    a.zip_map(&b, |u, v| if (u - v).abs() > p.tau { 1.0 } else { 0.0 })
}

/// Evaluation mask with its two sources kept for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMap {
    pub mask: Map2,
    /// Foreground pixels whose `1 - C^2` exceeds the threshold.
    pub thin: Map2,
    pub edges: Map2,
}

impl MaskMap {
    pub fn count(&self) -> usize {
        self.mask.count_nonzero()
    }
}

pub fn cs_mask(y: &Map2, model: &ConnectivityModel, t2: f64, dog: &DogParams) -> Result<MaskMap> {
    if !y.is_binary() {
        return Err(Error::invalid("cs_mask", "label must be binary"));
    }
    let c = connectivity_map(y, model)?;
    let thin = c.zip_map(y, |ci, yi| if (1.0 - ci * ci) > t2 && yi == 1.0 { 1.0 } else { 0.0 })?;
    let edges = dog_edges(y, dog)?;
    let mask = thin.zip_map(&edges, |a, b| a.max(b))?;
    if mask.count_nonzero() == 0 {
        return Err(Error::numeric("cs_mask", "mask is empty; masked accuracy is undefined"));
    }
    Ok(MaskMap { mask, thin, edges })
}

/// Numerator convention for the masked accuracy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AccCsMode {
    /// Mask pixels whose binarized prediction equals the label.
    #[default]
    Agreement,
    /// Mask pixels predicted foreground, regardless of the label.
    PredictedForeground,
}

impl AccCsMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "agreement" => Ok(AccCsMode::Agreement),
            "predicted_foreground" => Ok(AccCsMode::PredictedForeground),
            _ => Err(Error::invalid("acc_cs_mode", format!("unknown mode {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AccCsMode::Agreement => "agreement",
            AccCsMode::PredictedForeground => "predicted_foreground",
        }
    }
}

pub fn acc_cs(pred: &Map2, y: &Map2, mask: &Map2, threshold: f64, mode: AccCsMode) -> Result<f64> {
    pred.check_same("acc_cs", y)?;
    pred.check_same("acc_cs", mask)?;
    let mut total = 0usize;
    let mut hits = 0usize;
    for ((&p, &t), &m) in pred.data().iter().zip(y.data()).zip(mask.data()) {
        if m == 0.0 {
            continue;
        }
        total += 1;
        let fg = p >= threshold;
        let hit = match mode {
            AccCsMode::Agreement => fg == (t >= 0.5),
            AccCsMode::PredictedForeground => fg,
        };
        hits += hit as usize;
    }
    if total == 0 {
        return Err(Error::numeric("acc_cs", "mask is empty"));
    }
    Ok(hits as f64 / total as f64)
}
