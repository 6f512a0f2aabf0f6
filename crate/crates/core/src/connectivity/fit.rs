//! Least-squares fit of the clamped power law to empirical connectivity rates.

use super::ConnectivityModel;
use crate::error::{Error, Result};

/// One empirical point of the connectivity curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub density: f64,
    pub probability: f64,
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub model: ConnectivityModel,
    /// Euclidean norm of the residuals over the points used in the fit.
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub points_used: usize,
}

const MAX_ITERS: usize = 500;
const MIN_DENSITIES: usize = 10;
const MIN_TRIALS: usize = 1000;

fn residuals(m: &ConnectivityModel, pts: &[CurvePoint]) -> Vec<f64> {
    pts.iter().map(|p| m.eval(p.density) - p.probability).collect()
}

fn cost(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Solves a 3x3 system by Gaussian elimination with partial pivoting.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let s: f64 = (row + 1..3).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Fits `(alpha, beta, gamma)` by Gauss-Newton with step halving, starting at
/// `(10, 2, 0)` and using only points whose empirical rate lies strictly in
/// `(0, 1)`. The window side `r` is carried through unchanged.
///
/// Needs at least 10 distinct densities with 1000 trials each.
pub fn fit_model(points: &[CurvePoint], r: usize) -> Result<FitReport> {
    let mut densities: Vec<f64> = points.iter().filter(|p| p.trials >= MIN_TRIALS).map(|p| p.density).collect();
    densities.sort_by(f64::total_cmp);
    densities.dedup();
    if densities.len() < MIN_DENSITIES {
        return Err(Error::invalid(
            "fit_model",
            format!("need >= {MIN_DENSITIES} densities with >= {MIN_TRIALS} trials, got {}", densities.len()),
        ));
    }
    let pts: Vec<CurvePoint> = points.iter().copied().filter(|p| p.probability > 0.0 && p.probability < 1.0).collect();
    if pts.len() < 3 {
        return Err(Error::numeric("fit_model", format!("only {} points strictly inside (0, 1); need 3", pts.len())));
    }

    let mut m = ConnectivityModel { alpha: 10.0, beta: 2.0, gamma: 0.0, r };
    let mut res = residuals(&m, &pts);
    let mut c = cost(&res);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERS {
        iterations += 1;
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        for (p, ri) in pts.iter().zip(&res) {
            let raw = m.raw(p.density);
            if raw <= 0.0 || raw >= 1.0 || p.density <= 0.0 {
                continue;
            }
            let pw = p.density.powf(m.beta);
            let row = [pw, m.alpha * pw * p.density.ln(), -1.0];
            for a in 0..3 {
                jtr[a] += row[a] * ri;
                for b in 0..3 {
                    jtj[a][b] += row[a] * row[b];
                }
            }
        }
        let grad_norm = jtr.iter().map(|v| v * v).sum::<f64>().sqrt();
        if grad_norm < 1e-15 {
            converged = true;
            break;
        }
        let step = solve3(jtj, jtr.map(|v| -v)).unwrap_or(jtr.map(|v| -v));
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = ConnectivityModel {
                alpha: m.alpha + t * step[0],
                beta: m.beta + t * step[1],
                gamma: m.gamma + t * step[2],
                r,
            };
            if trial.alpha > 0.0 && trial.beta > 0.0 {
                let tr = residuals(&trial, &pts);
                let tc = cost(&tr);
                if tc < c {
                    let rel = (c - tc) / c.max(f64::MIN_POSITIVE);
                    let step_size = t * step.iter().map(|v| v * v).sum::<f64>().sqrt();
                    m = trial;
                    res = tr;
                    c = tc;
                    accepted = true;
                    if rel < 1e-14 || step_size < 1e-13 || c < 1e-30 {
                        converged = true;
                    }
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            // no descent along the Gauss-Newton direction: stationary point
            converged = true;
        }
        if converged {
            break;
        }
    }
    if !converged {
        log::warn!("fit_model: no convergence after {MAX_ITERS} iterations; returning best iterate");
    }
    Ok(FitReport { model: m, residual_norm: c.sqrt(), iterations, converged, points_used: pts.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve3_identity() {
        let x = solve3([[2.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 1.0]], [2.0, 2.0, 3.0]).unwrap();
        assert_eq!(x, [1.0, 0.5, 3.0]);
    }

    #[test]
    fn too_few_densities_rejected() {
        let pts: Vec<_> =
            (1..=5).map(|k| CurvePoint { density: k as f64 / 25.0, probability: 0.5, trials: 5000 }).collect();
        assert!(fit_model(&pts, 5).is_err());
    }
}
