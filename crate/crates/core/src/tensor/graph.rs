//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] owns every value produced during one forward pass. Nodes are
//! appended in evaluation order, so the node list is already topologically
//! sorted and [`Graph::backward`] walks it back to front.

use super::kernels::{self, ConvGeom, UpGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { stride: usize, pad: usize },
    ConvTranspose2x2,
    MaxPool2d { argmax: Vec<usize> },
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Relu,
    Sigmoid,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    Powf(f64),
    Log,
    Exp,
    Clamp { lo: f64, hi: f64 },
    ConcatChannels { ca: usize },
    BroadcastChannels,
    Sum,
    Mean,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
    inputs: Vec<Var>,
}

/// Batch-norm mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel statistics of one training batch (biased variance).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Running mean/variance tracked across training batches.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub updates: u64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels], updates: 0 }
    }

    /// Exponential update; the stored variance is the unbiased estimate.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        let bessel = if batch.count > 1 { batch.count as f64 / (batch.count - 1) as f64 } else { 1.0 };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * batch.mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * batch.var[c] * bessel;
        }
        self.updates += 1;
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, "operand shape", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

fn channel_vec(op: &'static str, what: &str, t: &Tensor, c: usize) -> Result<()> {
    if t.numel() != c {
        return Err(Error::shape(op, what, c, t.numel()));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<Var>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op, inputs });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf, inputs: vec![] });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient populated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    // ---- spatial operators ----------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let (n, cin, h, wd) = self.value(x).dims4(OP)?;
        let (cout, wcin, kh, kw) = self.value(w).dims4(OP)?;
        if wcin != cin {
            return Err(Error::shape(OP, "input channels", wcin, cin));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(OP, format!("kernel {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be positive"));
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(Error::shape(OP, "spatial extent", format!(">= {kh}x{kw}"), format!("{h}x{wd}")));
        }
        if (h + 2 * padding - kh) % stride != 0 {
            return Err(Error::shape(OP, "height", "(H+2p-kh) divisible by stride", h));
        }
        if (wd + 2 * padding - kw) % stride != 0 {
            return Err(Error::shape(OP, "width", "(W+2p-kw) divisible by stride", wd));
        }
        if let Some(b) = bias {
            channel_vec(OP, "bias length", self.value(b), cout)?;
        }
        let g = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (wd + 2 * padding - kw) / stride + 1,
        };
        let out =
            kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), bias.map(|b| self.value(b).data()), &g);
        let value = Tensor::new(vec![n, cout, g.ho, g.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(value, Op::Conv2d { stride, pad: padding }, inputs))
    }

    /// Kernel-2, stride-2 transposed convolution; weight is `[cin, cout, 2, 2]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, kernel: usize) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        if stride != 2 || kernel != 2 {
            return Err(Error::invalid(
                OP,
                format!("only kernel=2, stride=2 is supported (got kernel={kernel}, stride={stride})"),
            ));
        }
        let (n, cin, h, wd) = self.value(x).dims4(OP)?;
        let (wcin, cout, kh, kw) = self.value(w).dims4(OP)?;
        if wcin != cin {
            return Err(Error::shape(OP, "input channels", wcin, cin));
        }
        if (kh, kw) != (2, 2) {
            return Err(Error::shape(OP, "kernel", "2x2", format!("{kh}x{kw}")));
        }
        if let Some(b) = bias {
            channel_vec(OP, "bias length", self.value(b), cout)?;
        }
        let g = UpGeom { n, cin, cout, h, w: wd };
        let out = kernels::conv_transpose2x2_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &g,
        );
        let value = Tensor::new(vec![n, cout, 2 * h, 2 * wd], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(value, Op::ConvTranspose2x2, inputs))
    }

    /// Window max pool. Supported configurations: kernel 2 / stride 2 / pad 0,
    /// and odd kernel `k` / stride 1 / pad `k / 2` (size-preserving).
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "max_pool2d";
        match (kernel, stride, padding) {
            (2, 2, 0) => {}
            (k, 1, p) if k % 2 == 1 && p == k / 2 => {}
            _ => {
                return Err(Error::invalid(
                    OP,
                    format!("unsupported kernel/stride/padding {kernel}/{stride}/{padding}"),
                ))
            }
        }
        let dims = self.value(x).dims4(OP)?;
        let (n, c, h, w) = dims;
        if h + 2 * padding < kernel || w + 2 * padding < kernel {
            return Err(Error::shape(OP, "spatial extent", format!(">= {kernel}"), format!("{h}x{w}")));
        }
        if kernel == 2 && (h % 2 != 0 || w % 2 != 0) {
            return Err(Error::shape(OP, "spatial extent", "even", format!("{h}x{w}")));
        }
        let (out, argmax, ho, wo) = kernels::max_pool_forward(self.value(x).data(), dims, kernel, stride, padding);
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool2d { argmax }, vec![x]))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        const OP: &str = "batch_norm";
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        channel_vec(OP, "gamma length", self.value(gamma), c)?;
        channel_vec(OP, "beta length", self.value(beta), c)?;
        Ok((n, c, h * w))
    }

    /// Normalizes with the batch's own per-channel statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, hw) = self.bn_check(x, gamma, beta)?;
        let xs = self.value(x).data();
        let count = n * hw;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for ni in 0..n {
                s += xs[(ni * c + ch) * hw..][..hw].iter().sum::<f64>();
            }
            let m = s / count as f64;
            let mut v = 0.0;
            for ni in 0..n {
                v += xs[(ni * c + ch) * hw..][..hw].iter().map(|&t| (t - m) * (t - m)).sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = v / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (value, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std, (n, c, hw));
        let out = self.push(value, Op::BatchNorm { xhat, inv_std, train: true }, vec![x, gamma, beta]);
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Normalizes with stored running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, stats: &RunningStats, eps: f64) -> Result<Var> {
        let (n, c, hw) = self.bn_check(x, gamma, beta)?;
        channel_vec("batch_norm", "running stats length", &Tensor::zeros(&[stats.mean.len()]), c)?;
        if stats.updates == 0 {
            log::warn!("batch_norm: eval mode with untrained running statistics (mean 0, var 1)");
        }
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (value, xhat) = self.bn_apply(x, gamma, beta, &stats.mean, &inv_std, (n, c, hw));
        Ok(self.push(value, Op::BatchNorm { xhat, inv_std, train: false }, vec![x, gamma, beta]))
    }

    /// Mode-dispatching batch norm that also maintains `stats` in train mode.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: BnMode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        match mode {
            BnMode::Train => {
                let (out, batch) = self.batch_norm_train(x, gamma, beta, eps)?;
                stats.update(&batch, momentum);
                Ok(out)
            }
            BnMode::Eval => self.batch_norm_eval(x, gamma, beta, stats, eps),
        }
    }

    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        (n, c, hw): (usize, usize, usize),
    ) -> (Tensor, Vec<f64>) {
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for ni in 0..n {
            for ch in 0..c {
                let off = (ni * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        (Tensor { shape: self.value(x).shape().to_vec(), data: out }, xhat)
    }

    // ---- elementwise ------------------------------------------------------

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, vec![a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu, |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid, sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp, f64::exp)
    }

    /// Natural log; rejects non-positive inputs.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::invalid("log", format!("non-positive argument {bad}")));
        }
        Ok(self.unary(a, Op::Log, f64::ln))
    }

    /// `a^p` for `a >= 0`, with `0^p = 0`.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        if p <= 0.0 {
            return Err(Error::invalid("powf", format!("exponent {p} must be positive")));
        }
        if let Some(bad) = self.value(a).data().iter().find(|&&v| v < 0.0 || v.is_nan()) {
            return Err(Error::invalid("powf", format!("negative base {bad}")));
        }
        Ok(self.unary(a, Op::Powf(p), |v| if v == 0.0 { 0.0 } else { v.powf(p) }))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp { lo, hi }, |v| v.max(lo).min(hi))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(s), |v| v * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar, |v| v + s)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            Tensor {
                shape: ta.shape().to_vec(),
                data: ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            }
        } else if tb.numel() == 1 {
            let y = tb.data()[0];
            ta.map(|x| f(x, y))
        } else if ta.numel() == 1 {
            let x = ta.data()[0];
            tb.map(|y| f(x, y))
        } else {
            same_shape(op_name, ta, tb)?;
            unreachable!()
        };
        Ok(self.push(value, op, vec![a, b]))
    }

    /// Elementwise sum; operands must share a shape or one must be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    /// Concatenates `[N,Ca,H,W]` and `[N,Cb,H,W]` along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let (n, ca, h, w) = self.value(a).dims4(OP)?;
        let (nb, cb, hb, wb) = self.value(b).dims4(OP)?;
        if nb != n {
            return Err(Error::shape(OP, "batch", n, nb));
        }
        if (hb, wb) != (h, w) {
            return Err(Error::shape(OP, "spatial extent", format!("{h}x{w}"), format!("{hb}x{wb}")));
        }
        let hw = h * w;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for ni in 0..n {
            data.extend_from_slice(&da[ni * ca * hw..(ni + 1) * ca * hw]);
            data.extend_from_slice(&db[ni * cb * hw..(ni + 1) * cb * hw]);
        }
        let value = Tensor { shape: vec![n, ca + cb, h, w], data };
        Ok(self.push(value, Op::ConcatChannels { ca }, vec![a, b]))
    }

    /// Repeats a single-channel map `[N,1,H,W]` into `[N,c,H,W]`.
    pub fn broadcast_channels(&mut self, a: Var, c: usize) -> Result<Var> {
        const OP: &str = "broadcast_channels";
        let (n, ca, h, w) = self.value(a).dims4(OP)?;
        if ca != 1 {
            return Err(Error::shape(OP, "channels", 1, ca));
        }
        let hw = h * w;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(n * c * hw);
        for ni in 0..n {
            for _ in 0..c {
                data.extend_from_slice(&src[ni * hw..(ni + 1) * hw]);
            }
        }
        let value = Tensor { shape: vec![n, c, h, w], data };
        Ok(self.push(value, Op::BroadcastChannels, vec![a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum, vec![a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(value, Op::Mean, vec![a])
    }

    // ---- reverse pass -----------------------------------------------------

    /// Back-propagates from a one-element `root`, storing a gradient on every
    /// node that requires one and is reachable from `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape("backward", "root size", 1, self.value(root).numel()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let contributions = self.local_grads(node, &dy)?;
            for (input, g) in node.inputs.iter().zip(contributions) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor { shape, data: dy });
        }
        Ok(())
    }

    /// Gradient contribution for each input of `node` given upstream `dy`.
    fn local_grads(&self, node: &Node, dy: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let val = |k: usize| self.nodes[node.inputs[k].0].value.data();
        let needs = |k: usize| node.inputs.get(k).is_some_and(|v| self.nodes[v.0].requires_grad);
        let y = node.value.data();
        let grads = match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { stride, pad } => {
                let xt = &self.nodes[node.inputs[0].0].value;
                let wt = &self.nodes[node.inputs[1].0].value;
                let (n, cin, h, w) = xt.dims4("conv2d")?;
                let (cout, _, kh, kw) = wt.dims4("conv2d")?;
                let (_, _, ho, wo) = node.value.dims4("conv2d")?;
                let g = ConvGeom { n, cin, h, w, cout, kh, kw, stride: *stride, pad: *pad, ho, wo };
                let r = kernels::conv2d_backward(xt.data(), wt.data(), dy, &g, (needs(0), needs(1), needs(2)));
                vec![r.dx, r.dw, r.db]
            }
            Op::ConvTranspose2x2 => {
                let xt = &self.nodes[node.inputs[0].0].value;
                let wt = &self.nodes[node.inputs[1].0].value;
                let (n, cin, h, w) = xt.dims4("conv_transpose2d")?;
                let cout = wt.shape()[1];
                let g = UpGeom { n, cin, cout, h, w };
                let r =
                    kernels::conv_transpose2x2_backward(xt.data(), wt.data(), dy, &g, (needs(0), needs(1), needs(2)));
                vec![r.dx, r.dw, r.db]
            }
            Op::MaxPool2d { argmax } => {
                let mut dx = vec![0.0; val(0).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += dy[o];
                }
                vec![Some(dx)]
            }
            Op::BatchNorm { xhat, inv_std, train } => {
                let (n, c, h, w) = node.value.dims4("batch_norm")?;
                let hw = h * w;
                let gamma = val(1);
                let m = (n * hw) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; dy.len()];
                for ch in 0..c {
                    let idx = (0..n).flat_map(|ni| {
                        let off = (ni * c + ch) * hw;
                        off..off + hw
                    });
                    let (mut sdy, mut sdyx) = (0.0, 0.0);
                    for i in idx.clone() {
                        sdy += dy[i];
                        sdyx += dy[i] * xhat[i];
                    }
                    dbeta[ch] = sdy;
                    dgamma[ch] = sdyx;
                    let k = gamma[ch] * inv_std[ch];
                    if *train {
                        for i in idx {
                            dx[i] = k * (dy[i] - sdy / m - xhat[i] * sdyx / m);
                        }
                    } else {
                        for i in idx {
                            dx[i] = k * dy[i];
                        }
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }
            Op::Relu => vec![Some(val(0).iter().zip(dy).map(|(&x, &d)| if x > 0.0 { d } else { 0.0 }).collect())],
            Op::Sigmoid => vec![Some(y.iter().zip(dy).map(|(&s, &d)| d * s * (1.0 - s)).collect())],
            Op::Exp => vec![Some(y.iter().zip(dy).map(|(&e, &d)| d * e).collect())],
            Op::Log => vec![Some(val(0).iter().zip(dy).map(|(&x, &d)| d / x).collect())],
            Op::Powf(p) => vec![Some(
                val(0)
                    .iter()
                    .zip(dy)
                    .map(|(&x, &d)| {
                        if x == 0.0 {
                            if *p == 1.0 {
                                d
                            } else {
                                0.0
                            }
                        } else {
                            d * p * x.powf(p - 1.0)
                        }
                    })
                    .collect(),
            )],
            Op::Clamp { lo, hi } => {
                vec![Some(val(0).iter().zip(dy).map(|(&x, &d)| if x > *lo && x < *hi { d } else { 0.0 }).collect())]
            }
            Op::Scale(s) => vec![Some(dy.iter().map(|d| d * s).collect())],
            Op::AddScalar => vec![Some(dy.to_vec())],
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (val(0), val(1));
                let (da, db): (Vec<f64>, Vec<f64>) = match node.op {
                    Op::Add => (dy.to_vec(), dy.to_vec()),
                    Op::Sub => (dy.to_vec(), dy.iter().map(|d| -d).collect()),
                    _ => {
                        let bv = |i: usize| if b.len() == 1 { b[0] } else { b[i] };
                        let av = |i: usize| if a.len() == 1 { a[0] } else { a[i] };
                        (
                            dy.iter().enumerate().map(|(i, d)| d * bv(i)).collect(),
                            dy.iter().enumerate().map(|(i, d)| d * av(i)).collect(),
                        )
                    }
                };
                let reduce = |g: Vec<f64>, len: usize| if len == 1 && g.len() != 1 { vec![g.iter().sum()] } else { g };
                vec![Some(reduce(da, a.len())), Some(reduce(db, b.len()))]
            }
            Op::ConcatChannels { ca } => {
                let (n, c, h, w) = node.value.dims4("concat_channels")?;
                let hw = h * w;
                let cb = c - ca;
                let mut da = Vec::with_capacity(n * ca * hw);
                let mut db = Vec::with_capacity(n * cb * hw);
                for ni in 0..n {
                    let base = ni * c * hw;
                    da.extend_from_slice(&dy[base..base + ca * hw]);
                    db.extend_from_slice(&dy[base + ca * hw..base + c * hw]);
                }
                vec![Some(da), Some(db)]
            }
            Op::BroadcastChannels => {
                let (n, c, h, w) = node.value.dims4("broadcast_channels")?;
                let hw = h * w;
                let mut da = vec![0.0; n * hw];
                for ni in 0..n {
                    for ch in 0..c {
                        let src = &dy[(ni * c + ch) * hw..][..hw];
                        da[ni * hw..(ni + 1) * hw].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
                vec![Some(da)]
            }
            Op::Sum => vec![Some(vec![dy[0]; val(0).len()])],
            Op::Mean => {
                let n = val(0).len();
                vec![Some(vec![dy[0] / n as f64; n])]
            }
        };
        Ok(grads)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
