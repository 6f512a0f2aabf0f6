//! Training loop, checkpoints and the four-way ablation.

mod ablation;
mod optim;

pub use ablation::{
    ablation_variants, mean_by_variant, predict_full, run_ablation, score, split_hash, table_csv, AblationData,
    AblationRow, AblationVariant,
};
pub use optim::{schedule_update, AdamW, AdamWConfig, ScheduleConfig, ScheduleEvent, ScheduleState};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::archive::Archive;
use crate::data::{apply_variant, variants, SamplePair, NUM_VARIANTS};
use crate::error::{Error, Result};
use crate::loss::{loss_graph, CsLossConfig, LossKind};
use crate::model::Network;
use crate::seed;
use crate::tensor::{BnMode, Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamWConfig,
    pub schedule: ScheduleConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub validate_every: usize,
    pub loss_kind: LossKind,
    pub loss: CsLossConfig,
    /// Apply one random rotation/flip variant per sample per epoch.
    pub augment: bool,
    /// Fill the `wall_time` history column with elapsed seconds; otherwise 0.
    pub record_wall_time: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamWConfig::default(),
            schedule: ScheduleConfig::default(),
            batch_size: 2,
            max_epochs: 25,
            validate_every: 50,
            loss_kind: LossKind::Cs,
            loss: CsLossConfig::default(),
            augment: false,
            record_wall_time: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 || self.validate_every == 0 {
            return Err(Error::invalid("train_config", "batch_size and validate_every must be positive"));
        }
        if self.adam.weight_decay < 0.0
            || !(0.0..1.0).contains(&self.adam.beta1)
            || !(0.0..1.0).contains(&self.adam.beta2)
        {
            return Err(Error::invalid("train_config", "betas must be in [0, 1) and weight decay non-negative"));
        }
        Ok(())
    }
}

/// One validation point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_time: f64,
}

pub const HISTORY_HEADER: &str = "step,epoch,train_loss,val_loss,lr,wall_time,weight_decay";

pub fn history_csv(rows: &[HistoryRow], weight_decay: f64) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.epoch, r.train_loss, r.val_loss, r.lr, r.wall_time, weight_decay
        ));
    }
    s
}

/// Stack images and labels of a batch into `[B,3,H,W]` and `[B,1,H,W]`.
pub fn batch_tensors(samples: &[&SamplePair]) -> Result<(Tensor, Tensor)> {
    let first = samples.first().ok_or_else(|| Error::invalid("batch", "empty batch"))?;
    let (h, w) = first.label.dims();
    let c = first.image.channels.len();
    let mut xs = Vec::with_capacity(samples.len() * c * h * w);
    let mut ys = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.label.dims() != (h, w) || s.image.channels.len() != c {
            return Err(Error::shape("batch", "sample size", format!("{h}x{w}"), format!("{:?}", s.label.dims())));
        }
        s.image.extend_batch(&mut xs);
        ys.extend_from_slice(s.label.data());
    }
    Ok((Tensor::new(vec![samples.len(), c, h, w], xs)?, Tensor::new(vec![samples.len(), 1, h, w], ys)?))
}

/// Mean per-image loss with eval-mode batch norm.
pub fn validation_loss(net: &Network, val: &[SamplePair], kind: LossKind, loss: &CsLossConfig) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::invalid("validation", "empty validation set"));
    }
    let mut total = 0.0;
    for s in val {
        let (x, y) = batch_tensors(&[s])?;
        let mut g = Graph::new();
        let f = net.forward(&mut g, &x, BnMode::Eval)?;
        let l = loss_graph(&mut g, kind, f.pred, &y, loss)?;
        total += g.value(l).item();
    }
    Ok(total / val.len() as f64)
}

pub struct FitOutcome {
    pub best: Archive,
    pub best_val_loss: f64,
    pub history: Vec<HistoryRow>,
    pub steps: u64,
}

/// Resumable training run. All randomness is a function of the seed, the
/// epoch and the position in the epoch, so a restored trainer continues
/// exactly where the checkpoint left off.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    net: Network,
    opt: AdamW,
    sched: ScheduleState,
    train: &'a [SamplePair],
    val: &'a [SamplePair],
    epoch: usize,
    /// Next batch index within the epoch.
    cursor: usize,
    step: u64,
    loss_sum: f64,
    loss_count: usize,
    history: Vec<HistoryRow>,
    best: Option<Archive>,
    last_good: Option<Archive>,
    started: Instant,
    elapsed_before: f64,
}

impl<'a> Trainer<'a> {
    pub fn new(net: Network, cfg: TrainConfig, train: &'a [SamplePair], val: &'a [SamplePair]) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::invalid("fit", "training and validation sets must be nonempty"));
        }
        let opt = AdamW::new(net.params());
        let sched = ScheduleState::new(&cfg.schedule);
        Ok(Trainer {
            cfg,
            net,
            opt,
            sched,
            train,
            val,
            epoch: 0,
            cursor: 0,
            step: 0,
            loss_sum: 0.0,
            loss_count: 0,
            history: vec![],
            best: None,
            last_good: None,
            started: Instant::now(),
            elapsed_before: 0.0,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.history
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.sched.lr
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.cfg.batch_size)
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.max_epochs
    }

    /// Minimum-validation-loss network so far.
    pub fn best_checkpoint(&self) -> Option<&Archive> {
        self.best.as_ref()
    }

    /// Network as of the last finite validation.
    pub fn last_good_checkpoint(&self) -> Option<&Archive> {
        self.last_good.as_ref()
    }

    fn epoch_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut seed::rng(self.cfg.seed, "shuffle", self.epoch as u64));
        order
    }

    fn epoch_variants(&self) -> Vec<usize> {
        let mut rng = seed::rng(self.cfg.seed, "augment", self.epoch as u64);
        (0..self.train.len()).map(|_| rng.gen_range(0..NUM_VARIANTS)).collect()
    }

    /// Runs one batch (and a validation when due). Returns `false` once all
    /// epochs are done.
    pub fn step_batch(&mut self) -> Result<bool> {
        if self.finished() {
            return Ok(false);
        }
        let order = self.epoch_order();
        let bs = self.cfg.batch_size;
        let idx = &order[self.cursor * bs..((self.cursor + 1) * bs).min(order.len())];
        let owned: Vec<SamplePair>;
        let batch: Vec<&SamplePair> = if self.cfg.augment {
            let vs = self.epoch_variants();
            let table = variants();
            owned = idx.iter().map(|&i| apply_variant(&self.train[i], table[vs[i]])).collect::<Result<_>>()?;
            owned.iter().collect()
        } else {
            idx.iter().map(|&i| &self.train[i]).collect()
        };
        let (x, y) = batch_tensors(&batch)?;

        let mut g = Graph::new();
        let f = self.net.forward(&mut g, &x, BnMode::Train)?;
        let loss = loss_graph(&mut g, self.cfg.loss_kind, f.pred, &y, &self.cfg.loss)?;
        let lv = g.value(loss).item();
        g.backward(loss)?;
        let grads: Vec<Tensor> = f
            .params
            .iter()
            .zip(self.net.params())
            .map(|(&v, p)| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        drop(g);
        self.net.commit_stats(&f.batch_stats);
        let lr = self.sched.lr;
        self.opt.step(self.net.params_mut(), &grads, lr, &self.cfg.adam)?;
        self.step += 1;
        self.loss_sum += lv;
        self.loss_count += 1;

        self.cursor += 1;
        let per_epoch = self.batches_per_epoch();
        if self.cursor % self.cfg.validate_every == 0 || self.cursor == per_epoch {
            self.validate()?;
        }
        if self.cursor == per_epoch {
            self.cursor = 0;
            self.epoch += 1;
        }
        Ok(!self.finished())
    }

    fn validate(&mut self) -> Result<()> {
        let val_loss = validation_loss(&self.net, self.val, self.cfg.loss_kind, &self.cfg.loss)?;
        if !val_loss.is_finite() {
            return Err(Error::numeric(
                "fit",
                format!("validation loss {val_loss} at step {}; training diverged", self.step),
            ));
        }
        let snapshot = self.net.to_archive();
        if val_loss < self.sched.best {
            self.best = Some(snapshot.clone());
        }
        self.last_good = Some(snapshot);
        schedule_update(&mut self.sched, val_loss, &self.cfg.schedule);
        let wall_time =
            if self.cfg.record_wall_time { self.elapsed_before + self.started.elapsed().as_secs_f64() } else { 0.0 };
        self.history.push(HistoryRow {
            step: self.step,
            epoch: self.epoch,
            train_loss: self.loss_sum / self.loss_count.max(1) as f64,
            val_loss,
            lr: self.sched.lr,
            wall_time,
        });
        log::info!(
            "step {} epoch {} train {:.5} val {:.5} lr {:.1e}",
            self.step,
            self.epoch,
            self.loss_sum / self.loss_count.max(1) as f64,
            val_loss,
            self.sched.lr
        );
        self.loss_sum = 0.0;
        self.loss_count = 0;
        Ok(())
    }

    pub fn run(&mut self) -> Result<FitOutcome> {
        while self.step_batch()? {}
        let best = self.best.clone().ok_or_else(|| Error::numeric("fit", "no validation was run"))?;
        Ok(FitOutcome { best, best_val_loss: self.sched.best, history: self.history.clone(), steps: self.step })
    }

    /// Full trainer state: network, optimizer moments, schedule, position,
    /// history and the best snapshot.
    pub fn checkpoint(&self) -> Archive {
        let mut a = self.net.to_archive();
        a.kind = "trainer".into();
        self.opt.write(&mut a);
        a.set("trainer.epoch", self.epoch);
        a.set("trainer.cursor", self.cursor);
        a.set("trainer.step", self.step);
        a.set("trainer.loss_sum", self.loss_sum);
        a.set("trainer.loss_count", self.loss_count);
        a.set("trainer.seed", self.cfg.seed);
        a.set("trainer.train_len", self.train.len());
        a.set("sched.lr", self.sched.lr);
        a.set("sched.best", self.sched.best);
        a.set("sched.no_improve", self.sched.no_improve);
        let elapsed =
            if self.cfg.record_wall_time { self.elapsed_before + self.started.elapsed().as_secs_f64() } else { 0.0 };
        a.set("trainer.elapsed", elapsed);
        let col = |f: fn(&HistoryRow) -> f64| {
            Tensor::new(vec![self.history.len()], self.history.iter().map(f).collect()).expect("1-d")
        };
        a.put_array("history.step", col(|r| r.step as f64));
        a.put_array("history.epoch", col(|r| r.epoch as f64));
        a.put_array("history.train_loss", col(|r| r.train_loss));
        a.put_array("history.val_loss", col(|r| r.val_loss));
        a.put_array("history.lr", col(|r| r.lr));
        a.put_array("history.wall_time", col(|r| r.wall_time));
        for (prefix, snap) in [("best.", &self.best), ("last_good.", &self.last_good)] {
            if let Some(s) = snap {
                for (k, v) in &s.text {
                    a.set(&format!("{prefix}{k}"), v);
                }
                for (k, v) in &s.arrays {
                    a.put_array(&format!("{prefix}{k}"), v.clone());
                }
            }
        }
        a
    }

    pub fn restore(a: &Archive, cfg: TrainConfig, train: &'a [SamplePair], val: &'a [SamplePair]) -> Result<Self> {
        if a.kind != "trainer" {
            return Err(Error::Data(format!("expected a trainer checkpoint, found {:?}", a.kind)));
        }
        let mut net_arch = a.clone();
        net_arch.kind = "network".into();
        let net = Network::from_archive(&net_arch)?;
        if a.parse::<usize>("trainer.train_len")? != train.len() || a.parse::<u64>("trainer.seed")? != cfg.seed {
            return Err(Error::Data("checkpoint was taken with a different training set or seed".into()));
        }
        let mut t = Trainer::new(net, cfg, train, val)?;
        t.opt = AdamW::read(a, t.net.params())?;
        t.epoch = a.parse("trainer.epoch")?;
        t.cursor = a.parse("trainer.cursor")?;
        t.step = a.parse("trainer.step")?;
        t.loss_sum = a.parse("trainer.loss_sum")?;
        t.loss_count = a.parse("trainer.loss_count")?;
        t.sched = ScheduleState {
            lr: a.parse("sched.lr")?,
            best: a.parse("sched.best")?,
            no_improve: a.parse("sched.no_improve")?,
        };
        t.elapsed_before = a.parse("trainer.elapsed")?;
        let col = |k: &str| a.array(&format!("history.{k}")).map(|t| t.data().to_vec());
        let (steps, epochs, tl, vl, lr, wt) =
            (col("step")?, col("epoch")?, col("train_loss")?, col("val_loss")?, col("lr")?, col("wall_time")?);
        t.history = (0..steps.len())
            .map(|i| HistoryRow {
                step: steps[i] as u64,
                epoch: epochs[i] as usize,
                train_loss: tl[i],
                val_loss: vl[i],
                lr: lr[i],
                wall_time: wt[i],
            })
            .collect();
        for (prefix, slot) in [("best.", &mut t.best), ("last_good.", &mut t.last_good)] {
            let mut s = Archive::new("network");
            for (k, v) in &a.text {
                if let Some(rest) = k.strip_prefix(prefix) {
                    s.text.insert(rest.to_string(), v.clone());
                }
            }
            for (k, v) in &a.arrays {
                if let Some(rest) = k.strip_prefix(prefix) {
                    s.arrays.insert(rest.to_string(), v.clone());
                }
            }
            if !s.text.is_empty() {
                *slot = Some(s);
            }
        }
        Ok(t)
    }
}

/// Trains from scratch and returns the best checkpoint with the history.
pub fn fit(net: Network, train: &[SamplePair], val: &[SamplePair], cfg: &TrainConfig) -> Result<FitOutcome> {
    Trainer::new(net, cfg.clone(), train, val)?.run()
}
