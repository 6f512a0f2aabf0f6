//! Segmentation metrics: confusion rates, PR/ROC areas, the connectivity
//! masked accuracy and a fragment counter.

mod components;
mod curves;
mod mask;

pub use components::{broken_components, dilate, label_components, Breaks};
pub use curves::{confusion, curves_and_auc, curves_from_scores, rank_auc, Confusion, CurveData, Curves};
pub use mask::{acc_cs, cs_mask, dog_edges, gaussian_blur, gaussian_kernel, AccCsMode, DogParams, MaskMap};

use crate::connectivity::ConnectivityModel;
use crate::error::{Error, Result};
use crate::map::Map2;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsConfig {
    pub threshold: f64,
    /// Threshold on `1 - C^2` selecting thin foreground pixels.
    pub thin_threshold: f64,
    pub dog: DogParams,
    pub model: ConnectivityModel,
    pub acc_mode: AccCsMode,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            threshold: 0.5,
            thin_threshold: 0.5,
            dog: DogParams::default(),
            model: ConnectivityModel::default(),
            acc_mode: AccCsMode::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub fpr: f64,
    pub pr_auc: f64,
    pub roc_auc: f64,
    pub acc_cs: f64,
    pub gt_components: f64,
    pub pred_components: f64,
    pub breaks: f64,
    pub threshold: f64,
}

impl MetricsReport {
    pub const COLUMNS: [&'static str; 11] = [
        "f1",
        "precision",
        "recall",
        "accuracy",
        "fpr",
        "pr_auc",
        "roc_auc",
        "acc_cs",
        "gt_components",
        "pred_components",
        "breaks",
    ];

    pub fn values(&self) -> [f64; 11] {
        [
            self.f1,
            self.precision,
            self.recall,
            self.accuracy,
            self.fpr,
            self.pr_auc,
            self.roc_auc,
            self.acc_cs,
            self.gt_components,
            self.pred_components,
            self.breaks,
        ]
    }

    /// Column-wise mean of several reports.
    pub fn mean(reports: &[MetricsReport]) -> Result<MetricsReport> {
        let Some(first) = reports.first() else {
            return Err(Error::invalid("metrics_mean", "no reports"));
        };
        let n = reports.len() as f64;
        let mut acc = [0.0; 11];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        let m = acc.map(|a| a / n);
        Ok(MetricsReport {
            f1: m[0],
            precision: m[1],
            recall: m[2],
            accuracy: m[3],
            fpr: m[4],
            pr_auc: m[5],
            roc_auc: m[6],
            acc_cs: m[7],
            gt_components: m[8],
            pred_components: m[9],
            breaks: m[10],
            threshold: first.threshold,
        })
    }
}

/// Everything computed for one prediction/label pair.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub curves: Curves,
    pub mask: MaskMap,
}

pub fn evaluate(pred: &Map2, y: &Map2, cfg: &MetricsConfig) -> Result<Evaluation> {
    pred.check_same("evaluate", y)?;
    if !y.is_binary() {
        return Err(Error::invalid("evaluate", "label must be binary"));
    }
    if !pred.in_unit_range() {
        return Err(Error::invalid("evaluate", "prediction values must lie in [0, 1]"));
    }
    let c = confusion(pred, y, cfg.threshold)?;
    let curves = curves_and_auc(pred, y)?;
    let mask = cs_mask(y, &cfg.model, cfg.thin_threshold, &cfg.dog)?;
    let acc = acc_cs(pred, y, &mask.mask, cfg.threshold, cfg.acc_mode)?;
    let b = broken_components(pred, y, cfg.threshold)?;
    let report = MetricsReport {
        f1: c.f1(),
        precision: c.precision(),
        recall: c.recall(),
        accuracy: c.accuracy(),
        fpr: c.fpr(),
        pr_auc: curves.pr_auc,
        roc_auc: curves.roc_auc,
        acc_cs: acc,
        gt_components: b.gt_components as f64,
        pred_components: b.pred_components as f64,
        breaks: b.breaks as f64,
        threshold: cfg.threshold,
    };
    Ok(Evaluation { report, curves, mask })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_scores_one() {
        let y = Map2::from_fn(16, 16, |i, j| if i == 8 || j == 3 { 1.0 } else { 0.0 });
        let e = evaluate(&y, &y, &MetricsConfig::default()).unwrap();
        assert_eq!(e.report.f1, 1.0);
        assert_eq!(e.report.acc_cs, 1.0);
        assert_eq!(e.report.roc_auc, 1.0);
        assert_eq!(e.report.breaks, 0.0);
    }

    #[test]
    fn mean_of_identical_reports() {
        let y = Map2::from_fn(8, 8, |i, _| if i == 4 { 1.0 } else { 0.0 });
        let r = evaluate(&y, &y, &MetricsConfig::default()).unwrap().report;
        assert_eq!(MetricsReport::mean(&[r.clone(), r.clone()]).unwrap(), r);
    }
}
