//! Single-channel `H x W` grids: label maps, probability maps and derived maps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major `H x W` grid of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Map2 {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

/// Binary ground truth (values 0 or 1).
pub type LabelMap = Map2;
/// Per-pixel foreground probability in `[0, 1]`.
pub type ProbabilityMap = Map2;

impl Map2 {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape("map", "length", h * w, data.len()));
        }
        Ok(Map2 { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self::filled(h, w, 0.0)
    }

    pub fn filled(h: usize, w: usize, v: f64) -> Self {
        Map2 { h, w, data: vec![v; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                data.push(f(i, j));
            }
        }
        Map2 { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.w + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.w + j] = v;
    }

    /// Value at signed coordinates, zero outside the grid.
    #[inline]
    pub fn get_or_zero(&self, i: isize, j: isize) -> f64 {
        if i < 0 || j < 0 || i >= self.h as isize || j >= self.w as isize {
            0.0
        } else {
            self.data[i as usize * self.w + j as usize]
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Map2 {
        Map2 { h: self.h, w: self.w, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Map2, f: impl Fn(f64, f64) -> f64) -> Result<Map2> {
        self.check_same("zip_map", other)?;
        Ok(Map2 { h: self.h, w: self.w, data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() })
    }

    pub fn check_same(&self, op: &'static str, other: &Map2) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(
                op,
                "map dims",
                format!("{}x{}", self.h, self.w),
                format!("{}x{}", other.h, other.w),
            ));
        }
        Ok(())
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    /// `1` where `v >= t`, else `0`.
    pub fn threshold(&self, t: f64) -> Map2 {
        self.map(|v| if v >= t { 1.0 } else { 0.0 })
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// `[1, 1, H, W]` tensor view of the map.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.h, self.w], self.data.clone()).expect("consistent dims")
    }

    /// Inverse of [`Map2::to_tensor`]; accepts any tensor holding exactly one `H x W` plane.
    pub fn from_tensor(t: &Tensor) -> Result<Map2> {
        let (n, c, h, w) = t.dims4("map")?;
        if n * c != 1 {
            return Err(Error::shape("map", "planes", 1, n * c));
        }
        Map2::new(h, w, t.data().to_vec())
    }
}
