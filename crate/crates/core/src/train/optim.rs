//! AdamW and the validation-driven learning-rate schedule.

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First/second moments and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &[Tensor]) -> Self {
        AdamW {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    /// One update. Decay shrinks the parameters directly (`p *= 1 - lr * wd`)
    /// instead of passing through the moments. A non-finite gradient skips
    /// the whole step and returns `false`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64, cfg: &AdamWConfig) -> Result<bool> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape("adamw", "parameter count", self.m.len(), grads.len()));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adamw",
                    "gradient shape",
                    format!("{:?}", p.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
        }
        if grads.iter().any(|g| !g.is_finite()) {
            log::warn!("adamw: non-finite gradient at step {}; update skipped", self.t + 1);
            return Ok(false);
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gv;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gv * gv;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *pv *= 1.0 - lr * cfg.weight_decay;
                *pv -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(true)
    }

    pub(crate) fn write(&self, a: &mut Archive) {
        a.set("adam.t", self.t);
        for (k, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            a.put_array(&format!("adam.m.{k}"), Tensor::new(vec![m.len()], m.clone()).expect("1-d"));
            a.put_array(&format!("adam.v.{k}"), Tensor::new(vec![v.len()], v.clone()).expect("1-d"));
        }
    }

    pub(crate) fn read(a: &Archive, params: &[Tensor]) -> Result<Self> {
        let mut opt = AdamW::new(params);
        opt.t = a.parse("adam.t")?;
        for k in 0..params.len() {
            let m = a.array(&format!("adam.m.{k}"))?;
            let v = a.array(&format!("adam.v.{k}"))?;
            if m.numel() != opt.m[k].len() || v.numel() != opt.v[k].len() {
                return Err(Error::Data(format!("optimizer moment {k} has the wrong length")));
            }
            opt.m[k] = m.data().to_vec();
            opt.v[k] = v.data().to_vec();
        }
        Ok(opt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub lr0: f64,
    pub lr_floor: f64,
    pub decay_factor: f64,
    pub decay_patience: u32,
    pub reset_patience: u32,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { lr0: 0.002, lr_floor: 1e-4, decay_factor: 0.1, decay_patience: 5, reset_patience: 20 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_floor > 0.0 && self.lr_floor < self.lr0) {
            return Err(Error::invalid("schedule", "need 0 < lr_floor < lr0"));
        }
        if self.decay_patience == 0 || self.decay_patience >= self.reset_patience {
            return Err(Error::invalid("schedule", "need 0 < decay_patience < reset_patience"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::invalid("schedule", "decay_factor must be in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleState {
    pub lr: f64,
    pub best: f64,
    pub no_improve: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleEvent {
    Improved,
    Stalled,
    Decayed,
    Reset,
}

impl ScheduleState {
    pub fn new(cfg: &ScheduleConfig) -> Self {
        ScheduleState { lr: cfg.lr0, best: f64::INFINITY, no_improve: 0 }
    }
}

/// One validation result. A single counter tracks consecutive non-improving
/// validations: every multiple of `decay_patience` decays the rate (down to
/// the floor), and reaching `reset_patience` restores `lr0` and clears it.
pub fn schedule_update(s: &mut ScheduleState, val_loss: f64, cfg: &ScheduleConfig) -> ScheduleEvent {
    if val_loss < s.best {
        s.best = val_loss;
        s.no_improve = 0;
        return ScheduleEvent::Improved;
    }
    s.no_improve += 1;
    if s.no_improve >= cfg.reset_patience {
        s.lr = cfg.lr0;
        s.no_improve = 0;
        ScheduleEvent::Reset
    } else if s.no_improve % cfg.decay_patience == 0 {
        s.lr = (cfg.decay_factor * s.lr).max(cfg.lr_floor);
        ScheduleEvent::Decayed
    } else {
        ScheduleEvent::Stalled
    }
}
