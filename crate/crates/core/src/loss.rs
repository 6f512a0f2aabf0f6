//! Cross-entropy and the connection-sensitive loss.
//!
//! Both losses are built as graph expressions over a prediction `[N,1,H,W]`
//! so they can sit at the end of a network forward pass. Map-level wrappers
//! evaluate a single prediction/label pair and return diagnostic maps.

use rand::Rng;

use crate::connectivity::{connectivity_map, ConnectivityModel};
use crate::error::{Error, Result};
use crate::map::Map2;
use crate::seed;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    pub fn name(self) -> &'static str {
        match self {
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            _ => Err(Error::invalid("reduction", format!("unknown reduction {s:?}"))),
        }
    }
}

/// Which training objective to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Ce,
    Cs,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Cs => "cs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "cs" => Ok(LossKind::Cs),
            _ => Err(Error::invalid("loss_kind", format!("unknown loss {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsLossConfig {
    pub model: ConnectivityModel,
    /// Side of the max-pool neighbourhood used for the risk weight.
    pub lambda: usize,
    /// Predictions are clamped to `[eps, 1 - eps]` before any log.
    pub eps: f64,
    pub reduction: Reduction,
}

impl Default for CsLossConfig {
    fn default() -> Self {
        CsLossConfig { model: ConnectivityModel::default(), lambda: 7, eps: 1e-7, reduction: Reduction::Mean }
    }
}

impl CsLossConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.lambda % 2 == 0 {
            return Err(Error::invalid("cs_loss", format!("lambda={} must be odd", self.lambda)));
        }
        if !(self.eps > 0.0 && self.eps <= 1e-3) {
            return Err(Error::invalid("cs_loss", format!("eps={} outside (0, 1e-3]", self.eps)));
        }
        Ok(())
    }
}

/// Graph handles for one connection-sensitive loss evaluation.
#[derive(Debug)]
pub struct CsTerms {
    pub total: Var,
    pub per_pixel: Var,
    pub theta2: Var,
    pub weight: Var,
    pub c_pred: Var,
    /// Constants of the graph: they depend on the labels only.
    pub theta1: Tensor,
    pub c_gt: Tensor,
}

fn check_labels(op: &'static str, g: &Graph, pred: Var, y: &Tensor) -> Result<()> {
    let (n, c, h, w) = g.value(pred).dims4(op)?;
    if c != 1 {
        return Err(Error::shape(op, "prediction channels", "1", c.to_string()));
    }
    if y.shape() != [n, c, h, w] {
        return Err(Error::shape(op, "label shape", format!("{:?}", [n, c, h, w]), format!("{:?}", y.shape())));
    }
    if y.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(op, "labels must be binary"));
    }
    Ok(())
}

fn reduce(g: &mut Graph, per_pixel: Var, reduction: Reduction) -> Var {
    match reduction {
        Reduction::Mean => g.mean(per_pixel),
        Reduction::Sum => g.sum(per_pixel),
    }
}

/// Returns `(per_pixel, total)` for binary cross-entropy.
pub fn ce_graph(g: &mut Graph, pred: Var, y: &Tensor, eps: f64, reduction: Reduction) -> Result<(Var, Var)> {
    check_labels("ce_loss", g, pred, y)?;
    let f = g.clamp(pred, eps, 1.0 - eps);
    let yv = g.input(y.clone());
    let not_y = g.input(y.map(|v| 1.0 - v));
    let log_f = g.log(f)?;
    let one_minus_f = g.one_minus(f);
    let log_1mf = g.log(one_minus_f)?;
    let pos = g.mul(yv, log_f)?;
    let neg = g.mul(not_y, log_1mf)?;
    let s = g.add(pos, neg)?;
    let per_pixel = g.scale(s, -1.0);
    let total = reduce(g, per_pixel, reduction);
    Ok((per_pixel, total))
}

/// Local connectivity of every plane of a `[N,1,H,W]` graph value, kept
/// differentiable: box sum by an all-ones convolution, then the clamped power law.
fn connectivity_graph(g: &mut Graph, z: Var, model: &ConnectivityModel) -> Result<Var> {
    let r = model.r;
    let ones = g.input(Tensor::ones(&[1, 1, r, r]));
    let sums = g.conv2d(z, ones, None, 1, r / 2)?;
    let d = g.scale(sums, 1.0 / (r * r) as f64);
    let d = g.clamp(d, 0.0, 1.0);
    let p = g.powf(d, model.beta)?;
    let raw = g.scale(p, model.alpha);
    let raw = g.add_scalar(raw, -model.gamma);
    Ok(g.clamp(raw, 0.0, 1.0))
}

fn connectivity_planes(y: &Tensor, model: &ConnectivityModel) -> Result<Tensor> {
    let (n, _, h, w) = y.dims4("cs_loss")?;
    let mut out = Vec::with_capacity(n * h * w);
    for plane in y.data().chunks(h * w) {
        let m = Map2::new(h, w, plane.to_vec())?;
        out.extend_from_slice(connectivity_map(&m, model)?.data());
    }
    Tensor::new(vec![n, 1, h, w], out)
}

/// Builds the connection-sensitive loss. The label-side factor and label
/// connectivity are constants; the prediction-side factor, prediction
/// connectivity and the neighbourhood max are differentiated.
pub fn cs_graph(g: &mut Graph, pred: Var, y: &Tensor, cfg: &CsLossConfig) -> Result<CsTerms> {
    cfg.validate()?;
    check_labels("cs_loss", g, pred, y)?;
    let c_gt = connectivity_planes(y, &cfg.model)?;
    let theta1 = Tensor::new(
        y.shape().to_vec(),
        c_gt.data().iter().zip(y.data()).map(|(c, yv)| (1.0 - c * c * yv).exp()).collect(),
    )?;

    let f = g.clamp(pred, cfg.eps, 1.0 - cfg.eps);
    let c_pred = connectivity_graph(g, f, &cfg.model)?;
    let c2 = g.mul(c_pred, c_pred)?;
    let c2f = g.mul(c2, f)?;
    let e = g.one_minus(c2f);
    let theta2 = g.exp(e);

    let yv = g.input(y.clone());
    let peak = g.max_pool2d(f, cfg.lambda, 1, cfg.lambda / 2)?;
    let gap = g.sub(peak, f)?;
    let gap_fg = g.mul(gap, yv)?;
    let weight = g.add_scalar(gap_fg, 1.0);

    let theta1_y =
        g.input(Tensor::new(y.shape().to_vec(), theta1.data().iter().zip(y.data()).map(|(t, yv)| t * yv).collect())?);
    let not_y = g.input(y.map(|v| 1.0 - v));
    let log_f = g.log(f)?;
    let one_minus_f = g.one_minus(f);
    let log_1mf = g.log(one_minus_f)?;
    let pos = g.mul(theta1_y, log_f)?;
    let neg0 = g.mul(not_y, log_1mf)?;
    let neg = g.mul(theta2, neg0)?;
    let s = g.add(pos, neg)?;
    let ws = g.mul(weight, s)?;
    let per_pixel = g.scale(ws, -1.0);
    let total = reduce(g, per_pixel, cfg.reduction);
    Ok(CsTerms { total, per_pixel, theta2, weight, c_pred, theta1, c_gt })
}

/// Builds either loss over a graph prediction, returning the scalar root.
pub fn loss_graph(g: &mut Graph, kind: LossKind, pred: Var, y: &Tensor, cfg: &CsLossConfig) -> Result<Var> {
    match kind {
        LossKind::Ce => Ok(ce_graph(g, pred, y, cfg.eps, cfg.reduction)?.1),
        LossKind::Cs => Ok(cs_graph(g, pred, y, cfg)?.total),
    }
}

fn check_maps(op: &'static str, pred: &Map2, y: &Map2) -> Result<()> {
    pred.check_same(op, y)?;
    if !pred.in_unit_range() {
        return Err(Error::invalid(op, "prediction values must lie in [0, 1]"));
    }
    Ok(())
}

/// Scalar cross-entropy of one prediction map.
pub fn ce_loss(pred: &Map2, y: &Map2, reduction: Reduction, eps: f64) -> Result<f64> {
    check_maps("ce_loss", pred, y)?;
    let mut g = Graph::new();
    let p = g.input(pred.to_tensor());
    let (_, total) = ce_graph(&mut g, p, &y.to_tensor(), eps, reduction)?;
    Ok(g.value(total).item())
}

/// Scalar loss and per-pixel diagnostics for one prediction map.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_pixel: Map2,
    pub theta1: Map2,
    pub theta2: Map2,
    pub weight: Map2,
    pub c_gt: Map2,
    pub c_pred: Map2,
}

pub fn cs_loss(pred: &Map2, y: &Map2, cfg: &CsLossConfig) -> Result<LossBreakdown> {
    check_maps("cs_loss", pred, y)?;
    let mut g = Graph::new();
    let p = g.input(pred.to_tensor());
    let t = cs_graph(&mut g, p, &y.to_tensor(), cfg)?;
    let total = g.value(t.total).item();
    if !total.is_finite() {
        return Err(Error::numeric("cs_loss", format!("non-finite loss {total}")));
    }
    Ok(LossBreakdown {
        total,
        per_pixel: Map2::from_tensor(g.value(t.per_pixel))?,
        theta1: Map2::from_tensor(&t.theta1)?,
        theta2: Map2::from_tensor(g.value(t.theta2))?,
        weight: Map2::from_tensor(g.value(t.weight))?,
        c_gt: Map2::from_tensor(&t.c_gt)?,
        c_pred: Map2::from_tensor(g.value(t.c_pred))?,
    })
}

/// Gradient of the sum-reduced CS loss with respect to the prediction.
pub fn cs_loss_gradient(pred: &Map2, y: &Map2, cfg: &CsLossConfig) -> Result<(f64, Map2)> {
    check_maps("cs_loss", pred, y)?;
    let mut g = Graph::new();
    let p = g.param(pred.to_tensor());
    let t = cs_graph(&mut g, p, &y.to_tensor(), cfg)?;
    let total = g.value(t.total).item();
    g.backward(t.total)?;
    let grad = g.take_grad(p).ok_or_else(|| Error::numeric("cs_loss", "no gradient reached the prediction"))?;
    Ok((total, Map2::from_tensor(&grad)?))
}

/// Coordinates whose finite difference would straddle a non-differentiable
/// point: a neighbourhood-max tie, or a clamp boundary of the prediction
/// connectivity, within `margin` of being crossed.
pub fn kink_coordinates(pred: &Map2, y: &Map2, cfg: &CsLossConfig, margin: f64) -> Vec<bool> {
    let (h, w) = pred.dims();
    let f = pred.map(|v| v.clamp(cfg.eps, 1.0 - cfg.eps));
    let mut kink = vec![false; h * w];
    let lh = (cfg.lambda / 2) as isize;
    // neighbourhood max: only windows centred on foreground matter
    for i in 0..h as isize {
        for j in 0..w as isize {
            if y.get(i as usize, j as usize) == 0.0 {
                continue;
            }
            let mut vals: Vec<(f64, usize)> = Vec::new();
            for a in (i - lh).max(0)..=(i + lh).min(h as isize - 1) {
                for b in (j - lh).max(0)..=(j + lh).min(w as isize - 1) {
                    vals.push((f.get(a as usize, b as usize), a as usize * w + b as usize));
                }
            }
            let top = vals.iter().map(|v| v.0).fold(f64::MIN, f64::max);
            let close: Vec<usize> = vals.iter().filter(|v| top - v.0 <= margin).map(|v| v.1).collect();
            if close.len() > 1 {
                for at in close {
                    kink[at] = true;
                }
            }
        }
    }
    // prediction connectivity near its clamp edges
    let r = cfg.model.r;
    let sums = crate::connectivity::window_sums(&f, r);
    let rh = (r / 2) as isize;
    let slack = margin * cfg.model.alpha * cfg.model.beta * 2.0;
    for i in 0..h as isize {
        for j in 0..w as isize {
            let d = sums.get(i as usize, j as usize) / (r * r) as f64;
            let raw = cfg.model.raw(d);
            if (raw - 1.0).abs() <= slack || raw.abs() <= slack {
                for a in (i - rh).max(0)..=(i + rh).min(h as isize - 1) {
                    for b in (j - rh).max(0)..=(j + rh).min(w as isize - 1) {
                        kink[a as usize * w + b as usize] = true;
                    }
                }
            }
        }
    }
    kink
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub excluded: usize,
    pub max_rel_err: f64,
    /// `(trial, row, col, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, usize, f64, f64)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Relative error with a small absolute floor so exact zeros compare cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central-difference check of one instance, excluding kink coordinates.
pub fn grad_check_instance(
    pred: &Map2,
    y: &Map2,
    cfg: &CsLossConfig,
    step: f64,
    trial: usize,
    report: &mut GradCheckReport,
) -> Result<()> {
    let (_, analytic) = cs_loss_gradient(pred, y, cfg)?;
    let kink = kink_coordinates(pred, y, cfg, 4.0 * step);
    let (h, w) = pred.dims();
    let eval = |m: &Map2| cs_loss(m, y, cfg).map(|b| b.total);
    for i in 0..h {
        for j in 0..w {
            if kink[i * w + j] {
                report.excluded += 1;
                continue;
            }
            let mut plus = pred.clone();
            plus.set(i, j, pred.get(i, j) + step);
            let mut minus = pred.clone();
            minus.set(i, j, pred.get(i, j) - step);
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = analytic.get(i, j);
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                if e >= report.max_rel_err {
                    report.worst = Some((trial, i, j, a, numeric));
                }
            }
        }
    }
    Ok(())
}

/// Random-instance gradient check of the sum-reduced CS loss. Predictions are
/// drawn away from the probability clamp so every perturbation stays inside it.
pub fn cs_loss_grad_check(h: usize, w: usize, trials: usize, seed: u64) -> Result<GradCheckReport> {
    if h > 16 || w > 16 || h == 0 || w == 0 {
        return Err(Error::invalid("cs_loss_grad_check", format!("shape {h}x{w} outside 1..=16")));
    }
    let cfg = CsLossConfig { reduction: Reduction::Sum, ..CsLossConfig::default() };
    let mut report = GradCheckReport { checked: 0, excluded: 0, max_rel_err: 0.0, worst: None, tolerance: 1e-4 };
    for t in 0..trials {
        let mut rng = seed::rng(seed, "cs-grad-check", t as u64);
        let y = Map2::from_fn(h, w, |_, _| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
        let mut rng = seed::rng(seed, "cs-grad-check-pred", t as u64);
        let pred = Map2::from_fn(h, w, |_, _| rng.gen_range(0.05..0.95));
        grad_check_instance(&pred, &y, &cfg, 1e-5, t, &mut report)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_sum() -> CsLossConfig {
        CsLossConfig { reduction: Reduction::Sum, ..CsLossConfig::default() }
    }

    #[test]
    fn ce_confident_positive_is_near_zero() {
        let p = Map2::filled(1, 1, 1.0 - 1e-7);
        let y = Map2::filled(1, 1, 1.0);
        assert!(ce_loss(&p, &y, Reduction::Sum, 1e-7).unwrap() < 1e-6);
    }

    #[test]
    fn ce_point_nine() {
        let p = Map2::filled(1, 1, 0.9);
        let y = Map2::filled(1, 1, 1.0);
        let l = ce_loss(&p, &y, Reduction::Sum, 1e-7).unwrap();
        assert!((l - 0.10536051565782628).abs() < 1e-12);
    }

    #[test]
    fn ce_mean_divides_by_pixels() {
        let p = Map2::filled(2, 3, 0.9);
        let y = Map2::filled(2, 3, 1.0);
        let s = ce_loss(&p, &y, Reduction::Sum, 1e-7).unwrap();
        let m = ce_loss(&p, &y, Reduction::Mean, 1e-7).unwrap();
        assert!((s / 6.0 - m).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = Map2::filled(2, 3, 0.5);
        let y = Map2::filled(3, 2, 1.0);
        assert!(ce_loss(&p, &y, Reduction::Sum, 1e-7).is_err());
        assert!(cs_loss(&p, &y, &cfg_sum()).is_err());
    }

    #[test]
    fn background_pixel_uses_prediction_factor() {
        let p = Map2::filled(8, 8, 0.3);
        let y = Map2::zeros(8, 8);
        let b = cs_loss(&p, &y, &cfg_sum()).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(b.weight.get(i, j), 1.0);
                let c = b.c_pred.get(i, j);
                let theta2 = (1.0 - c * c * 0.3).exp();
                assert!((b.theta2.get(i, j) - theta2).abs() < 1e-12);
                assert!((b.per_pixel.get(i, j) + theta2 * 0.7f64.ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saturated_interior_collapses_to_ce() {
        let y = Map2::filled(9, 9, 1.0);
        let p = Map2::filled(9, 9, 0.9);
        let b = cs_loss(&p, &y, &cfg_sum()).unwrap();
        assert_eq!(b.c_gt.get(4, 4), 1.0);
        assert_eq!(b.theta1.get(4, 4), 1.0);
        assert_eq!(b.weight.get(4, 4), 1.0);
        assert!((b.per_pixel.get(4, 4) - 0.10536051565782628).abs() < 1e-12);
    }

    #[test]
    fn thin_pixel_is_upweighted() {
        // hand evaluation: w = 1.7, C_gt = 0.4507, f = 0.1
        let c: f64 = 10.3180 * 0.2f64.powf(1.9808) + 0.0254;
        let theta1 = (1.0 - c * c).exp();
        let contribution = 1.7 * theta1 * -(0.1f64.ln());
        assert!((theta1 - 2.2187).abs() < 1e-3);
        assert!((contribution - 8.685).abs() < 5e-3);

        // a 1-px line through a 5x5 window has d = 0.2 at its centre
        let y = Map2::from_fn(11, 11, |i, _| if i == 5 { 1.0 } else { 0.0 });
        let p = Map2::from_fn(11, 11, |i, j| {
            if i == 5 && j == 5 {
                0.1
            } else if i == 5 && j == 6 {
                0.8
            } else {
                0.01
            }
        });
        let b = cs_loss(&p, &y, &cfg_sum()).unwrap();
        assert!((b.c_gt.get(5, 5) - c).abs() < 1e-12);
        assert!((b.weight.get(5, 5) - 1.7).abs() < 1e-12);
        assert!((b.per_pixel.get(5, 5) - contribution).abs() < 1e-9);
    }

    #[test]
    fn factors_stay_in_one_to_e() {
        let mut rng = seed::rng(5, "t", 0);
        let y = Map2::from_fn(12, 12, |_, _| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
        let p = Map2::from_fn(12, 12, |i, j| ((i * 7 + j * 3) % 11) as f64 / 10.0);
        let b = cs_loss(&p, &y, &cfg_sum()).unwrap();
        let e = std::f64::consts::E;
        for v in b.theta1.data().iter().chain(b.theta2.data()) {
            assert!((1.0..=e).contains(v));
        }
        assert!(b.total >= 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let r = cs_loss_grad_check(8, 8, 4, 17).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.checked > 100);
    }

    #[test]
    fn uniform_prediction_excludes_ties() {
        let mut rng = seed::rng(3, "t", 1);
        let y = Map2::from_fn(8, 8, |_, _| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
        let p = Map2::filled(8, 8, 0.5);
        let mut rep = GradCheckReport { checked: 0, excluded: 0, max_rel_err: 0.0, worst: None, tolerance: 1e-4 };
        grad_check_instance(&p, &y, &cfg_sum(), 1e-5, 0, &mut rep).unwrap();
        assert!(rep.excluded > 0);
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn exact_prediction_has_small_gradient() {
        let y = Map2::from_fn(8, 8, |i, j| if i == j || i == 3 { 1.0 } else { 0.0 });
        let eps = 1e-7;
        let p = y.map(|v| v.clamp(eps, 1.0 - eps));
        let cfg = cfg_sum();
        let (_, grad) = cs_loss_gradient(&p, &y, &cfg).unwrap();
        let (_, grad_half) = cs_loss_gradient(&Map2::filled(8, 8, 0.5), &y, &cfg).unwrap();
        let max = grad.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let max_half = grad_half.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        // the clamp stops the gradient at the optimum
        assert!(max < max_half);
    }

    #[test]
    fn near_tie_is_flagged() {
        let y = Map2::from_fn(7, 7, |i, j| if i == 3 && j == 3 { 1.0 } else { 0.0 });
        let mut p = Map2::filled(7, 7, 0.2);
        p.set(1, 1, 0.7);
        p.set(5, 5, 0.7 + 1e-6);
        let kink = kink_coordinates(&p, &y, &cfg_sum(), 4e-5);
        assert!(kink[7 + 1] && kink[5 * 7 + 5]);
        assert!(!kink[2 * 7 + 2]);
    }
}
