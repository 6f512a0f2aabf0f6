//! Local connectivity probability.
//!
//! The probability that a structure passing through a pixel stays connected is
//! modelled as a clamped power law of the foreground density in the `r x r`
//! window centred on it:
//!
//! ```text
//! C(d) = clamp(alpha * d^beta - gamma, 0, 1),   d = window sum / r^2
//! ```
//!
//! The constants come from a Monte-Carlo study of random patches, see
//! [`sampling`] and [`fit`].

pub mod fit;
pub mod sampling;

pub use fit::CurvePoint;
pub use fit::{fit_model, FitReport};
pub use sampling::{
    connectivity_curve, is_connected_patch, is_connected_patch_with, sample_patches, ConnectedRule, DensityStat,
    PatchSample,
};

use crate::error::{Error, Result};
use crate::map::Map2;

/// Fitted `(alpha, beta, gamma, r)` tuple.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConnectivityModel {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub r: usize,
}

impl Default for ConnectivityModel {
    /// Published constants for a `5 x 5` window.
    fn default() -> Self {
        ConnectivityModel { alpha: 10.3180, beta: 1.9808, gamma: -0.0254, r: 5 }
    }
}

impl ConnectivityModel {
    pub fn new(alpha: f64, beta: f64, gamma: f64, r: usize) -> Result<Self> {
        let m = ConnectivityModel { alpha, beta, gamma, r };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r < 3 || self.r % 2 == 0 {
            return Err(Error::invalid("connectivity", format!("r={} must be odd and >= 3", self.r)));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) || !self.gamma.is_finite() {
            return Err(Error::invalid(
                "connectivity",
                format!("need alpha > 0, beta > 0 (alpha={}, beta={})", self.alpha, self.beta),
            ));
        }
        Ok(())
    }

    /// Unclamped power law `alpha * d^beta - gamma`, with `0^beta = 0`.
    pub fn raw(&self, d: f64) -> f64 {
        let p = if d <= 0.0 { 0.0 } else { d.powf(self.beta) };
        self.alpha * p - self.gamma
    }

    /// Connectivity probability for local density `d`.
    pub fn eval(&self, d: f64) -> f64 {
        self.raw(d).clamp(0.0, 1.0)
    }

    pub fn half(&self) -> usize {
        self.r / 2
    }
}

/// Per-pixel `C_i` over a source map, zero-padded at the borders.
pub fn connectivity_map(z: &Map2, model: &ConnectivityModel) -> Result<Map2> {
    model.validate()?;
    let (h, w) = z.dims();
    if model.r > h || model.r > w {
        return Err(Error::invalid("connectivity_map", format!("window r={} exceeds image {h}x{w}", model.r)));
    }
    let area = (model.r * model.r) as f64;
    let dens = window_sums(z, model.r);
    Ok(dens.map(|s| model.eval(s / area)))
}

/// Zero-padded `r x r` window sums, accumulated in row-major window order.
pub fn window_sums(z: &Map2, r: usize) -> Map2 {
    let (h, w) = z.dims();
    let half = (r / 2) as isize;
    Map2::from_fn(h, w, |i, j| {
        let mut s = 0.0;
        for di in -half..=half {
            for dj in -half..=half {
                s += z.get_or_zero(i as isize + di, j as isize + dj);
            }
        }
        s
    })
}

/// `y_i * (1 - C_i^2)`: large where a foreground pixel is at risk of breaking.
pub fn connectivity_feature_map(y: &Map2, model: &ConnectivityModel) -> Result<Map2> {
    if !y.is_binary() {
        return Err(Error::invalid("connectivity_feature_map", "label map must be binary"));
    }
    let c = connectivity_map(y, model)?;
    y.zip_map(&c, |yi, ci| yi * (1.0 - ci * ci))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_zero_map_gives_floor() {
        let m = ConnectivityModel::default();
        let c = connectivity_map(&Map2::zeros(8, 8), &m).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.0254).abs() < 1e-15));
    }

    #[test]
    fn all_one_interior_saturates() {
        let m = ConnectivityModel::default();
        assert!((m.raw(1.0) - 10.3434).abs() < 1e-12);
        let c = connectivity_map(&Map2::filled(9, 9, 1.0), &m).unwrap();
        assert_eq!(c.get(4, 4), 1.0);
    }

    #[test]
    fn density_point_two() {
        let m = ConnectivityModel::default();
        let expect = 10.3180 * 0.2f64.powf(1.9808) + 0.0254;
        assert!((m.eval(0.2) - expect).abs() < 1e-15);
        assert!((m.eval(0.2) - 0.4507).abs() < 1e-3);
    }

    #[test]
    fn isolated_pixel_feature() {
        let m = ConnectivityModel::default();
        let mut y = Map2::zeros(9, 9);
        y.set(4, 4, 1.0);
        let f = connectivity_feature_map(&y, &m).unwrap();
        let c = 10.3180 * 0.04f64.powf(1.9808) + 0.0254;
        assert!((c - 0.0426).abs() < 1e-3);
        assert!((f.get(4, 4) - (1.0 - c * c)).abs() < 1e-15);
        assert!((f.get(4, 4) - 0.9982).abs() < 1e-3);
        assert_eq!(f.get(0, 0), 0.0);
    }

    #[test]
    fn saturated_interior_feature_is_zero() {
        let y = Map2::filled(9, 9, 1.0);
        let f = connectivity_feature_map(&y, &ConnectivityModel::default()).unwrap();
        assert_eq!(f.get(4, 4), 0.0);
    }

    #[test]
    fn window_larger_than_image_is_rejected() {
        let m = ConnectivityModel::default();
        assert!(connectivity_map(&Map2::zeros(4, 9), &m).is_err());
    }

    #[test]
    fn invalid_models_rejected() {
        assert!(ConnectivityModel::new(1.0, 2.0, 0.0, 4).is_err());
        assert!(ConnectivityModel::new(-1.0, 2.0, 0.0, 5).is_err());
        assert!(ConnectivityModel::new(1.0, 0.0, 0.0, 5).is_err());
    }
}
