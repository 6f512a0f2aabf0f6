//! Layer handles and their graph evaluation.
//!
//! Layers hold indices into the network's parameter and running-statistics
//! tables; [`Ctx`] resolves them against the graph leaves of one pass.

use crate::error::Result;
use crate::tensor::{BatchStats, BnMode, Graph, RunningStats, Var};

/// 3x3 convolution without bias followed by batch norm.
#[derive(Clone, Debug)]
pub(crate) struct ConvBn {
    pub w: usize,
    pub gamma: usize,
    pub beta: usize,
    pub stats: usize,
}

/// Convolution with optional bias.
#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub w: usize,
    pub b: Option<usize>,
}

/// 2x2 stride-2 transposed convolution with bias.
#[derive(Clone, Debug)]
pub(crate) struct Up {
    pub w: usize,
    pub b: usize,
}

/// Additive attention gate. Census: five convolutions, five batch norms,
/// four ReLUs, one max pool, one transposed convolution.
#[derive(Clone, Debug)]
pub(crate) struct Gate {
    pub skip: ConvBn,
    pub gating: ConvBn,
    pub joint: ConvBn,
    pub up: Up,
    pub refine: ConvBn,
    pub score: ConvBn,
}

/// Which feature map rides alongside the gated skip connection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinkMode {
    /// Upsampled gating-path features.
    Up,
    /// Skip-path features.
    Down,
}

pub(crate) struct GateOutput {
    pub out: Var,
    pub alpha: Var,
}

pub(crate) struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub params: &'a [Var],
    pub stats: &'a [RunningStats],
    pub mode: BnMode,
    pub eps: f64,
    pub batch: Vec<(usize, BatchStats)>,
}

impl Ctx<'_> {
    pub fn conv_bn(&mut self, l: &ConvBn, x: Var, relu: bool) -> Result<Var> {
        let y = self.g.conv2d(x, self.params[l.w], None, 1, 1)?;
        let (gamma, beta) = (self.params[l.gamma], self.params[l.beta]);
        let y = match self.mode {
            BnMode::Train => {
                let (y, b) = self.g.batch_norm_train(y, gamma, beta, self.eps)?;
                self.batch.push((l.stats, b));
                y
            }
            BnMode::Eval => self.g.batch_norm_eval(y, gamma, beta, &self.stats[l.stats], self.eps)?,
        };
        Ok(if relu { self.g.relu(y) } else { y })
    }

    pub fn conv(&mut self, l: &Conv, x: Var) -> Result<Var> {
        let b = l.b.map(|i| self.params[i]);
        self.g.conv2d(x, self.params[l.w], b, 1, 1)
    }

    pub fn up(&mut self, l: &Up, x: Var) -> Result<Var> {
        self.g.conv_transpose2d(x, self.params[l.w], Some(self.params[l.b]), 2, 2)
    }

    /// `x` is the skip feature at resolution R, `gating` the coarser feature
    /// at R/2. Returns the link-concatenated output and the 1-channel weight.
    pub fn gate(&mut self, l: &Gate, x: Var, gating: Var, link: LinkMode) -> Result<GateOutput> {
        let (_, cx, h, w) = self.g.value(x).dims4("attention_gate")?;
        let (_, _, gh, gw) = self.g.value(gating).dims4("attention_gate")?;
        if gh * 2 != h || gw * 2 != w {
            return Err(crate::Error::shape(
                "attention_gate",
                "gating resolution",
                format!("{}x{}", h / 2, w / 2),
                format!("{gh}x{gw}"),
            ));
        }
        let xp = self.conv_bn(&l.skip, x, true)?;
        let xs = self.g.max_pool2d(xp, 2, 2, 0)?;
        let gp = self.conv_bn(&l.gating, gating, true)?;
        let s = self.g.add(xs, gp)?;
        let j = self.conv_bn(&l.joint, s, true)?;
        let u = self.up(&l.up, j)?;
        let u2 = self.conv_bn(&l.refine, u, true)?;
        let logits = self.conv_bn(&l.score, u2, false)?;
        let alpha = self.g.sigmoid(logits);
        let wide = self.g.broadcast_channels(alpha, cx)?;
        let gated = self.g.mul(wide, x)?;
        let extra = match link {
            LinkMode::Up => u2,
            LinkMode::Down => xp,
        };
        let out = self.g.concat_channels(gated, extra)?;
        Ok(GateOutput { out, alpha })
    }
}
