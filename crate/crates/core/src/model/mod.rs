//! Attention-gated U-Net.
//!
//! Encoder level `l` has `c * 2^l` channels (two conv/BN/ReLU layers, then a
//! 2x2 max pool); the bottleneck has `c * 2^depth`. Each decoder level merges
//! the (optionally gated) skip connection with the upsampled coarser level.
//! Gates take the coarser level's features, before its transposed
//! convolution, as the gating signal.
//!
//! Output head: without the concatenation head, `conv9_1 -> conv9_2 ->
//! sigmoid`. With it, the finest gate's weight map is appended to the
//! `conv9_1` features and `conv10_1 -> conv10_2 -> conv10_3 -> sigmoid`
//! produces the prediction.

mod layers;

use rand_distr::{Distribution, Normal};

pub use layers::LinkMode;
use layers::{Conv, ConvBn, Ctx, Gate, Up};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{BatchStats, BnMode, Graph, RunningStats, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    None,
    UpLink,
    DownLink,
}

impl AttentionMode {
    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::None => "none",
            AttentionMode::UpLink => "up_link",
            AttentionMode::DownLink => "down_link",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttentionMode::None),
            "up_link" | "up" => Ok(AttentionMode::UpLink),
            "down_link" | "down" => Ok(AttentionMode::DownLink),
            _ => Err(Error::invalid("attention", format!("unknown mode {s:?}"))),
        }
    }

    fn link(self) -> Option<LinkMode> {
        match self {
            AttentionMode::None => None,
            AttentionMode::UpLink => Some(LinkMode::Up),
            AttentionMode::DownLink => Some(LinkMode::Down),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub attention: AttentionMode,
    pub concat_attention_head: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            in_channels: 3,
            base_channels: 32,
            depth: 4,
            attention: AttentionMode::UpLink,
            concat_attention_head: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl NetworkSpec {
    /// Plain U-Net: no gates, `conv9` head.
    pub fn plain(base_channels: usize) -> Self {
        NetworkSpec { base_channels, attention: AttentionMode::None, concat_attention_head: false, ..Self::default() }
    }

    /// Up-link gates with the attention concatenation head.
    pub fn attention(base_channels: usize) -> Self {
        NetworkSpec { base_channels, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("network_spec", m));
        if self.in_channels == 0 || self.base_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.depth == 0 || self.depth > 6 {
            return bad(format!("depth {} outside 1..=6", self.depth));
        }
        if self.concat_attention_head && self.attention == AttentionMode::None {
            return bad("the concatenation head needs attention gates".into());
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || !(self.bn_eps > 0.0) {
            return bad("bn_momentum must be in (0, 1] and bn_eps positive".into());
        }
        Ok(())
    }

    /// Channel width at a level (`depth` is the bottleneck).
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Required divisor of the input height and width.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }

    fn write(&self, a: &mut Archive) {
        a.set("spec.in_channels", self.in_channels);
        a.set("spec.base_channels", self.base_channels);
        a.set("spec.depth", self.depth);
        a.set("spec.attention", self.attention.name());
        a.set("spec.concat_attention_head", self.concat_attention_head);
        a.set("spec.bn_momentum", format!("{:e}", self.bn_momentum));
        a.set("spec.bn_eps", format!("{:e}", self.bn_eps));
    }

    fn read(a: &Archive) -> Result<Self> {
        let s = NetworkSpec {
            in_channels: a.parse("spec.in_channels")?,
            base_channels: a.parse("spec.base_channels")?,
            depth: a.parse("spec.depth")?,
            attention: AttentionMode::parse(a.get("spec.attention")?)?,
            concat_attention_head: a.parse("spec.concat_attention_head")?,
            bn_momentum: a.parse("spec.bn_momentum")?,
            bn_eps: a.parse("spec.bn_eps")?,
        };
        s.validate()?;
        Ok(s)
    }
}

enum Head {
    Plain { out: Conv },
    Concat { c1: ConvBn, c2: ConvBn, out: Conv },
}

struct Layout {
    enc: Vec<[ConvBn; 2]>,
    bottleneck: [ConvBn; 2],
    /// `ups[l]` maps level `l + 1` to level `l`.
    ups: Vec<Up>,
    gates: Vec<Gate>,
    /// Two layers per level `1..depth`; `dec[0]` holds `conv9_1` only.
    dec: Vec<Vec<ConvBn>>,
    head: Head,
}

struct Builder {
    seed: u64,
    names: Vec<String>,
    params: Vec<Tensor>,
    stat_names: Vec<String>,
    stats: Vec<RunningStats>,
}

impl Builder {
    fn tensor(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let mut rng = seed::rng(self.seed, &name, 0);
        let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape matches");
        self.tensor(name, t)
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize) -> ConvBn {
        let w = self.he(format!("{name}.weight"), &[cout, cin, 3, 3], cin * 9);
        let gamma = self.tensor(format!("{name}.bn.gamma"), Tensor::ones(&[cout]));
        let beta = self.tensor(format!("{name}.bn.beta"), Tensor::zeros(&[cout]));
        self.stat_names.push(format!("{name}.bn"));
        self.stats.push(RunningStats::new(cout));
        ConvBn { w, gamma, beta, stats: self.stats.len() - 1 }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        let w = self.he(format!("{name}.weight"), &[cout, cin, 3, 3], cin * 9);
        let b = self.tensor(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv { w, b: Some(b) }
    }

    fn up(&mut self, name: &str, cin: usize, cout: usize) -> Up {
        let w = self.he(format!("{name}.weight"), &[cin, cout, 2, 2], cin);
        let b = self.tensor(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Up { w, b }
    }

    fn gate(&mut self, name: &str, cx: usize, cg: usize) -> Gate {
        let f = cx;
        Gate {
            skip: self.conv_bn(&format!("{name}.skip"), cx, f),
            gating: self.conv_bn(&format!("{name}.gating"), cg, f),
            joint: self.conv_bn(&format!("{name}.joint"), f, f),
            up: self.up(&format!("{name}.up"), f, f),
            refine: self.conv_bn(&format!("{name}.refine"), f, f),
            score: self.conv_bn(&format!("{name}.score"), f, 1),
        }
    }
}

/// Result of one forward pass.
pub struct Forward {
    /// `[N,1,H,W]` probabilities.
    pub pred: Var,
    /// Gate weight maps indexed by level (finest first); empty without gates.
    pub alphas: Vec<Var>,
    /// Graph leaves of the parameters, in [`Network::param_names`] order.
    pub params: Vec<Var>,
    /// Train-mode batch statistics, to be folded in with [`Network::commit_stats`].
    pub batch_stats: Vec<(usize, BatchStats)>,
}

pub struct Network {
    spec: NetworkSpec,
    names: Vec<String>,
    params: Vec<Tensor>,
    stat_names: Vec<String>,
    stats: Vec<RunningStats>,
    layout: Layout,
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network").field("spec", &self.spec).field("parameters", &self.num_parameters()).finish()
    }
}

impl Network {
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder { seed, names: vec![], params: vec![], stat_names: vec![], stats: vec![] };
        let d = spec.depth;
        let mut enc = Vec::with_capacity(d);
        let mut cin = spec.in_channels;
        for l in 0..d {
            let c = spec.width(l);
            enc.push([b.conv_bn(&format!("enc{l}.conv1"), cin, c), b.conv_bn(&format!("enc{l}.conv2"), c, c)]);
            cin = c;
        }
        let cb = spec.width(d);
        let bottleneck = [b.conv_bn("bottleneck.conv1", cin, cb), b.conv_bn("bottleneck.conv2", cb, cb)];
        let ups = (0..d).map(|l| b.up(&format!("up{l}"), spec.width(l + 1), spec.width(l))).collect();
        let gates = if spec.attention == AttentionMode::None {
            vec![]
        } else {
            (0..d).map(|l| b.gate(&format!("gate{l}"), spec.width(l), spec.width(l + 1))).collect()
        };
        let mut dec = Vec::with_capacity(d);
        for l in 0..d {
            let c = spec.width(l);
            let skip = if gates.is_empty() { c } else { 2 * c };
            let merged = skip + c;
            if l == 0 {
                dec.push(vec![b.conv_bn("conv9_1", merged, c)]);
            } else {
                dec.push(vec![
                    b.conv_bn(&format!("dec{l}.conv1"), merged, c),
                    b.conv_bn(&format!("dec{l}.conv2"), c, c),
                ]);
            }
        }
        let c = spec.base_channels;
        let head = if spec.concat_attention_head {
            Head::Concat {
                c1: b.conv_bn("conv10_1", c + 1, c),
                c2: b.conv_bn("conv10_2", c, c),
                out: b.conv("conv10_3", c, 1),
            }
        } else {
            Head::Plain { out: b.conv("conv9_2", c, 1) }
        };
        Ok(Network {
            spec: spec.clone(),
            names: b.names,
            params: b.params,
            stat_names: b.stat_names,
            stats: b.stats,
            layout: Layout { enc, bottleneck, ups, gates, dec, head },
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn num_gates(&self) -> usize {
        self.layout.gates.len()
    }

    /// Builds the forward graph. Train mode normalizes with batch statistics,
    /// which are returned rather than applied so the network stays shared.
    pub fn forward(&self, g: &mut Graph, image: &Tensor, mode: BnMode) -> Result<Forward> {
        const OP: &str = "forward";
        let (_, c, h, w) = image.dims4(OP)?;
        if c != self.spec.in_channels {
            return Err(Error::shape(OP, "input channels", self.spec.in_channels, c));
        }
        let m = self.spec.spatial_multiple();
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::shape(OP, "spatial extent", format!("multiple of {m}"), format!("{h}x{w}")));
        }
        let params: Vec<Var> = self.params.iter().map(|t| g.param(t.clone())).collect();
        let x = g.input(image.clone());
        let mut ctx = Ctx { g, params: &params, stats: &self.stats, mode, eps: self.spec.bn_eps, batch: vec![] };
        let lay = &self.layout;
        let link = self.spec.attention.link();

        let mut skips = Vec::with_capacity(lay.enc.len());
        let mut hcur = x;
        for [c1, c2] in &lay.enc {
            hcur = ctx.conv_bn(c1, hcur, true)?;
            hcur = ctx.conv_bn(c2, hcur, true)?;
            skips.push(hcur);
            hcur = ctx.g.max_pool2d(hcur, 2, 2, 0)?;
        }
        hcur = ctx.conv_bn(&lay.bottleneck[0], hcur, true)?;
        let mut coarse = ctx.conv_bn(&lay.bottleneck[1], hcur, true)?;

        let mut alphas = vec![None; lay.gates.len()];
        let mut dec_out = coarse;
        for l in (0..lay.enc.len()).rev() {
            let up = ctx.up(&lay.ups[l], coarse)?;
            let left = match link {
                Some(mode) => {
                    let o = ctx.gate(&lay.gates[l], skips[l], coarse, mode)?;
                    alphas[l] = Some(o.alpha);
                    o.out
                }
                None => skips[l],
            };
            let merged = ctx.g.concat_channels(left, up)?;
            let mut f = merged;
            for layer in &lay.dec[l] {
                f = ctx.conv_bn(layer, f, true)?;
            }
            if l == 0 {
                dec_out = f;
            } else {
                coarse = f;
            }
        }
        let alphas: Vec<Var> = alphas.into_iter().map(|a| a.expect("every gate ran")).collect();
        let logits = match &lay.head {
            Head::Plain { out } => ctx.conv(out, dec_out)?,
            Head::Concat { c1, c2, out } => {
                let cat = ctx.g.concat_channels(dec_out, alphas[0])?;
                let f = ctx.conv_bn(c1, cat, true)?;
                let f = ctx.conv_bn(c2, f, true)?;
                ctx.conv(out, f)?
            }
        };
        let pred = ctx.g.sigmoid(logits);
        let batch_stats = std::mem::take(&mut ctx.batch);
        Ok(Forward { pred, alphas, params, batch_stats })
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn commit_stats(&mut self, batch: &[(usize, BatchStats)]) {
        for (i, b) in batch {
            self.stats[*i].update(b, self.spec.bn_momentum);
        }
    }

    /// Eval-mode prediction and gate maps as plain tensors.
    pub fn predict(&self, image: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, image, BnMode::Eval)?;
        let alphas = f.alphas.iter().map(|&a| g.value(a).clone()).collect();
        Ok((g.value(f.pred).clone(), alphas))
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new("network");
        self.spec.write(&mut a);
        for (n, t) in self.names.iter().zip(&self.params) {
            a.put_array(&format!("param.{n}"), t.clone());
        }
        for (n, s) in self.stat_names.iter().zip(&self.stats) {
            a.put_array(&format!("stats.{n}.mean"), Tensor::new(vec![s.mean.len()], s.mean.clone()).expect("1-d"));
            a.put_array(&format!("stats.{n}.var"), Tensor::new(vec![s.var.len()], s.var.clone()).expect("1-d"));
            a.set(&format!("stats.{n}.updates"), s.updates);
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.kind != "network" {
            return Err(Error::Data(format!("expected a network archive, found {:?}", a.kind)));
        }
        let spec = NetworkSpec::read(a)?;
        let mut net = Network::build(&spec, 0)?;
        for (n, t) in net.names.iter().zip(net.params.iter_mut()) {
            let src = a.array(&format!("param.{n}"))?;
            if src.shape() != t.shape() {
                return Err(Error::Data(format!("parameter {n}: shape {:?} != {:?}", src.shape(), t.shape())));
            }
            *t = src.clone();
        }
        for (n, s) in net.stat_names.iter().zip(net.stats.iter_mut()) {
            let mean = a.array(&format!("stats.{n}.mean"))?;
            let var = a.array(&format!("stats.{n}.var"))?;
            if mean.numel() != s.mean.len() || var.numel() != s.var.len() {
                return Err(Error::Data(format!("running stats {n}: wrong length")));
            }
            s.mean = mean.data().to_vec();
            s.var = var.data().to_vec();
            s.updates = a.parse(&format!("stats.{n}.updates"))?;
        }
        Ok(net)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// Evaluates a single gate on its own: returns `(output, alpha)` values.
/// Parameters are laid out as for a network gate between widths `cx` and `cg`.
pub struct StandaloneGate {
    net_params: Vec<Tensor>,
    stats: Vec<RunningStats>,
    gate: Gate,
}

impl StandaloneGate {
    pub fn new(cx: usize, cg: usize, seed: u64) -> Self {
        let mut b = Builder { seed, names: vec![], params: vec![], stat_names: vec![], stats: vec![] };
        let gate = b.gate("gate", cx, cg);
        StandaloneGate { net_params: b.params, stats: b.stats, gate }
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.net_params
    }

    /// Builds the gate on `x` and `g` leaves inside `graph`, train-mode BN.
    pub fn apply(&self, graph: &mut Graph, x: Var, g: Var, link: LinkMode) -> Result<(Var, Var, Vec<Var>)> {
        let params: Vec<Var> = self.net_params.iter().map(|t| graph.param(t.clone())).collect();
        let mut ctx =
            Ctx { g: graph, params: &params, stats: &self.stats, mode: BnMode::Train, eps: 1e-5, batch: vec![] };
        let o = ctx.gate(&self.gate, x, g, link)?;
        Ok((o.out, o.alpha, params))
    }
}
