//! Confusion counts, threshold sweeps and areas under PR/ROC curves.

use crate::error::{Error, Result};
use crate::map::Map2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Rates with a zero denominator are reported as 0.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn fpr(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Counts after binarizing `pred >= threshold`; labels are compared as `y >= 0.5`.
pub fn confusion(pred: &Map2, y: &Map2, threshold: f64) -> Result<Confusion> {
    pred.check_same("confusion", y)?;
    let mut c = Confusion::default();
    for (&p, &t) in pred.data().iter().zip(y.data()) {
        match (p >= threshold, t >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Points of a threshold sweep; `thresholds[i]` produced `points[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveData {
    pub points: Vec<(f64, f64)>,
    pub thresholds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Curves {
    /// `(recall, precision)`, starting at `(0, 1)`.
    pub pr: CurveData,
    /// `(fpr, tpr)`, starting at `(0, 0)`.
    pub roc: CurveData,
    pub pr_auc: f64,
    pub roc_auc: f64,
}

fn class_counts(op: &'static str, scores: &[f64], labels: &[bool]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(op, "length", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid(op, "scores must be finite"));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::numeric(
            op,
            format!("AUC needs both classes; got {pos} positive and {neg} negative pixels"),
        ));
    }
    Ok((pos, neg))
}

fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

/// Sweeps every distinct score as a threshold (descending) and integrates
/// both curves with the trapezoid rule.
pub fn curves_from_scores(scores: &[f64], labels: &[bool]) -> Result<Curves> {
    let (pos, neg) = class_counts("curves_and_auc", scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut roc = CurveData { points: vec![(0.0, 0.0)], thresholds: vec![f64::INFINITY] };
    let mut pr = CurveData { points: vec![(0.0, 1.0)], thresholds: vec![f64::INFINITY] };
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        roc.points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        roc.thresholds.push(t);
        pr.points.push((tp as f64 / pos as f64, tp as f64 / (tp + fp) as f64));
        pr.thresholds.push(t);
    }
    let roc_auc = trapezoid(&roc.points);
    let pr_auc = trapezoid(&pr.points);
    Ok(Curves { pr, roc, pr_auc, roc_auc })
}

pub fn curves_and_auc(pred: &Map2, y: &Map2) -> Result<Curves> {
    pred.check_same("curves_and_auc", y)?;
    let labels: Vec<bool> = y.data().iter().map(|&v| v >= 0.5).collect();
    curves_from_scores(pred.data(), &labels)
}

/// Mann-Whitney form of ROC-AUC: midranks over the pooled scores, ties ½.
pub fn rank_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts("rank_auc", scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * order[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_inverted_confusion() {
        let y = Map2::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = confusion(&y, &y, 0.5).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let c = confusion(&y.map(|v| 1.0 - v), &y, 0.5).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn threshold_is_inclusive() {
        let p = Map2::filled(1, 1, 0.5);
        let y = Map2::filled(1, 1, 1.0);
        assert_eq!(confusion(&p, &y, 0.5).unwrap().tp, 1);
    }

    #[test]
    fn separating_scores_give_unit_areas() {
        let c = curves_from_scores(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(c.roc_auc, 1.0);
        assert_eq!(c.pr_auc, 1.0);
    }

    #[test]
    fn constant_scores_give_half() {
        let c = curves_from_scores(&[0.3; 6], &[true, false, true, false, false, true]).unwrap();
        assert_eq!(c.roc_auc, 0.5);
        assert_eq!(rank_auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
    }

    #[test]
    fn thresholds_strictly_decrease() {
        let c = curves_from_scores(&[0.1, 0.5, 0.5, 0.9, 0.3], &[false, true, false, true, true]).unwrap();
        assert!(c.roc.thresholds.windows(2).all(|w| w[0] > w[1]));
        assert!(c.roc.points.windows(2).all(|w| w[0].0 <= w[1].0));
        assert_eq!(*c.roc.points.last().unwrap(), (1.0, 1.0));
    }

    #[test]
    fn single_class_rejected() {
        assert!(curves_from_scores(&[0.1, 0.2], &[true, true]).is_err());
        assert!(rank_auc(&[0.1, 0.2], &[false, false]).is_err());
    }

    #[test]
    fn f1_zero_without_positives() {
        let c = Confusion { tp: 0, fp: 0, tn: 3, fn_: 0 };
        assert_eq!(c.f1(), 0.0);
        assert_eq!(c.accuracy(), 1.0);
    }
}
