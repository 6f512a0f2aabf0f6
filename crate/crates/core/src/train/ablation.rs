//! The {plain, attention} x {ce, cs} comparison grid.

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::{fit, TrainConfig};
use crate::data::{pad_image, unpad, SamplePair};
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::map::Map2;
use crate::metrics::{evaluate, MetricsConfig, MetricsReport};
use crate::model::{Network, NetworkSpec};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationVariant {
    pub name: &'static str,
    pub attention: bool,
    pub loss: LossKind,
}

impl AblationVariant {
    pub fn spec(&self, base_channels: usize) -> NetworkSpec {
        if self.attention {
            NetworkSpec::attention(base_channels)
        } else {
            NetworkSpec::plain(base_channels)
        }
    }
}

pub fn ablation_variants() -> [AblationVariant; 4] {
    [
        AblationVariant { name: "UCE", attention: false, loss: LossKind::Ce },
        AblationVariant { name: "UCS", attention: false, loss: LossKind::Cs },
        AblationVariant { name: "AUCE", attention: true, loss: LossKind::Ce },
        AblationVariant { name: "CSAU", attention: true, loss: LossKind::Cs },
    ]
}

pub struct AblationData<'a> {
    pub train: &'a [SamplePair],
    pub val: &'a [SamplePair],
    pub test: &'a [SamplePair],
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    /// `None` for rows averaged over seeds.
    pub seed: Option<u64>,
    pub report: MetricsReport,
    pub best_val_loss: f64,
    pub parameters: usize,
    /// Hash of the train/val/test split the row was trained and scored on.
    pub split_hash: String,
}

/// Content hash over ids, labels and images of all three splits.
pub fn split_hash(data: &AblationData) -> String {
    let mut h = Sha256::new();
    for (tag, set) in [("train", data.train), ("val", data.val), ("test", data.test)] {
        h.update(tag.as_bytes());
        h.update((set.len() as u64).to_le_bytes());
        for s in set {
            h.update(s.id.as_bytes());
            for v in s.label.data().iter().chain(s.image.channels.iter().flat_map(|c| c.data())) {
                h.update(v.to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Whole-image probability map, zero-padded up to the network's size multiple.
pub fn predict_full(net: &Network, s: &SamplePair) -> Result<Map2> {
    let (h, w) = s.label.dims();
    let m = net.spec().spatial_multiple();
    let (th, tw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let x = pad_image(&s.image, th, tw)?.to_tensor();
    let (pred, _) = net.predict(&x)?;
    unpad(&Map2::from_tensor(&pred)?, h, w)
}

/// Mean test metrics of a network over a split.
pub fn score(net: &Network, test: &[SamplePair], metrics: &MetricsConfig) -> Result<MetricsReport> {
    let reports = test
        .iter()
        .map(|s| Ok(evaluate(&predict_full(net, s)?, &s.label, metrics)?.report))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::mean(&reports)
}

/// Trains every variant for every seed on the same split. Rows come back in
/// (seed, variant) order regardless of scheduling.
pub fn run_ablation(
    data: &AblationData,
    base_channels: usize,
    cfg: &TrainConfig,
    seeds: &[u64],
    metrics: &MetricsConfig,
) -> Result<Vec<AblationRow>> {
    if data.test.is_empty() {
        return Err(Error::invalid("ablation", "empty test split"));
    }
    let hash = split_hash(data);
    let jobs: Vec<(u64, AblationVariant)> =
        seeds.iter().flat_map(|&s| ablation_variants().into_iter().map(move |v| (s, v))).collect();
    jobs.par_iter()
        .map(|&(s, v)| {
            let mut c = cfg.clone();
            c.seed = s;
            c.loss_kind = v.loss;
            // the initial weights depend on the seed and architecture only, so
            // the two losses start from identical networks
            let net = Network::build(&v.spec(base_channels), seed::derive(s, "init", 0))?;
            let parameters = net.num_parameters();
            let out = fit(net, data.train, data.val, &c)?;
            let best = Network::from_archive(&out.best)?;
            log::info!("ablation {} seed {s}: best val {:.5}", v.name, out.best_val_loss);
            Ok(AblationRow {
                variant: v.name.to_string(),
                seed: Some(s),
                report: score(&best, data.test, metrics)?,
                best_val_loss: out.best_val_loss,
                parameters,
                split_hash: hash.clone(),
            })
        })
        .collect()
}

/// One row per variant, metrics averaged over seeds.
pub fn mean_by_variant(rows: &[AblationRow]) -> Result<Vec<AblationRow>> {
    ablation_variants()
        .iter()
        .filter_map(|v| {
            let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == v.name).collect();
            let first = mine.first()?;
            let reports: Vec<MetricsReport> = mine.iter().map(|r| r.report.clone()).collect();
            Some(MetricsReport::mean(&reports).map(|report| AblationRow {
                variant: v.name.to_string(),
                seed: None,
                report,
                best_val_loss: mine.iter().map(|r| r.best_val_loss).sum::<f64>() / mine.len() as f64,
                parameters: first.parameters,
                split_hash: first.split_hash.clone(),
            }))
        })
        .collect()
}

pub fn table_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,seed,");
    s.push_str(&MetricsReport::COLUMNS.join(","));
    s.push_str(",best_val_loss,parameters,split_hash\n");
    for r in rows {
        let seed = r.seed.map_or_else(|| "mean".to_string(), |s| s.to_string());
        let vals: Vec<String> = r.report.values().iter().map(|v| v.to_string()).collect();
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant,
            seed,
            vals.join(","),
            r.best_val_loss,
            r.parameters,
            r.split_hash
        ));
    }
    s
}
