#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use csau::loss::{cs_loss_grad_check, rel_err};
use csau::model::{LinkMode, Network, NetworkSpec, StandaloneGate};
use csau::seed;
use csau::tensor::{BnMode, Graph, RunningStats, Tensor, Var};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
pub const INSTANCES: usize = 100;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

#[derive(Default, Debug)]
pub struct Tally {
    pub name: String,
    pub checked: usize,
    pub excluded: usize,
    pub worst: f64,
    pub worst_at: String,
    /// Whether the kink-exclusion share is bounded (5%).
    pub bound_exclusions: bool,
}

impl Tally {
    fn named(name: &str) -> Self {
        Tally { name: name.to_string(), bound_exclusions: true, ..Tally::default() }
    }

    pub fn verdict(&self) -> Result<(), String> {
        if self.checked == 0 {
            return Err(format!("{}: nothing checked", self.name));
        }
        if self.bound_exclusions && self.excluded * 20 > self.checked {
            return Err(format!("{}: {} of {} coordinates excluded", self.name, self.excluded, self.checked));
        }
        if self.worst > TOL {
            return Err(format!("{}: rel err {:.2e} at {}", self.name, self.worst, self.worst_at));
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: {} coordinates, {} kink exclusions, max rel err {:.2e}",
            self.name, self.checked, self.excluded, self.worst
        )
    }
}

type Build<'a> = &'a dyn Fn(&mut Graph, &[Var]) -> csau::Result<Var>;

/// Objective: the op's output contracted with a fixed random tensor (or the
/// output itself when scalar). Coordinates whose one-sided differences
/// disagree sit on a kink of a piecewise-smooth op and are skipped. A kink
/// moves the central difference by at most half that disagreement, so
/// anything kept is still held to the full tolerance.
fn check(name: &str, inputs: &[Tensor], build: Build, rng: &mut ChaCha8Rng, tally: &mut Tally) {
    let weights = {
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vs).unwrap();
        let shape = g.value(out).shape().to_vec();
        uniform(rng, &shape, -1.0, 1.0)
    };
    let objective = |ins: &[Tensor], grads: bool| -> (f64, Vec<Tensor>) {
        let mut g = Graph::new();
        let vs: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vs).unwrap();
        let root = if g.value(out).numel() == 1 {
            out
        } else {
            let w = g.input(weights.clone());
            let p = g.mul(out, w).unwrap();
            g.sum(p)
        };
        let value = g.value(root).item();
        if !grads {
            return (value, vec![]);
        }
        g.backward(root).unwrap();
        let gs = vs.iter().zip(ins).map(|(&v, t)| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();
        (value, gs)
    };
    let (f0, analytic) = objective(inputs, true);
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let at = |d: f64| {
                let mut ins = inputs.to_vec();
                ins[k].data_mut()[i] += d;
                objective(&ins, false).0
            };
            let (fp, fm) = (at(STEP), at(-STEP));
            let fwd = (fp - f0) / STEP;
            let bwd = (f0 - fm) / STEP;
            if rel_err(fwd, bwd) > 2.0 * TOL {
                tally.excluded += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * STEP);
            let e = rel_err(analytic[k].data()[i], numeric);
            tally.checked += 1;
            if e > tally.worst {
                tally.worst = e;
                tally.worst_at =
                    format!("{name}: input {k} element {i}: analytic {} numeric {numeric}", analytic[k].data()[i]);
            }
        }
    }
}

fn run(name: &str, mut case: impl FnMut(&mut ChaCha8Rng, &mut Tally)) -> Tally {
    let mut tally = Tally::named(name);
    for t in 0..INSTANCES {
        let mut rng = seed::rng(11, name, t as u64);
        case(&mut rng, &mut tally);
    }
    tally
}

fn dims(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(2..=5), rng.gen_range(2..=5)]
}

pub fn conv2d() -> Tally {
    run("conv2d", |rng, t| {
        let [n, cin, _, _] = dims(rng);
        let cout = rng.gen_range(1..=3);
        let k = [1, 3][rng.gen_range(0..2)];
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=k / 2);
        let out = rng.gen_range(1..=4);
        let hw = (out - 1) * stride + k - 2 * pad;
        let x = uniform(rng, &[n, cin, hw, hw], -1.0, 1.0);
        let w = uniform(rng, &[cout, cin, k, k], -1.0, 1.0);
        let b = uniform(rng, &[cout], -1.0, 1.0);
        check("conv2d", &[x, w, b], &|g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad), rng, t);
    })
}

pub fn conv_transpose2d() -> Tally {
    run("conv_transpose2d", |rng, t| {
        let [n, cin, h, w] = dims(rng);
        let cout = rng.gen_range(1..=3);
        let x = uniform(rng, &[n, cin, h, w], -1.0, 1.0);
        let wt = uniform(rng, &[cin, cout, 2, 2], -1.0, 1.0);
        let b = uniform(rng, &[cout], -1.0, 1.0);
        check("conv_transpose2d", &[x, wt, b], &|g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 2), rng, t);
    })
}

pub fn max_pool2d() -> Tally {
    run("max_pool2d", |rng, t| {
        let [n, c, _, _] = dims(rng);
        let (k, s, p) = [(2, 2, 0), (3, 1, 1), (7, 1, 3)][rng.gen_range(0..3)];
        let hw = 2 * rng.gen_range(1..=4);
        let x = uniform(rng, &[n, c, hw, hw], -1.0, 1.0);
        check("max_pool2d", &[x], &|g, v| g.max_pool2d(v[0], k, s, p), rng, t);
    })
}

pub fn batch_norm_train() -> Tally {
    run("batch_norm_train", |rng, t| {
        let [n, c, h, w] = dims(rng);
        let x = uniform(rng, &[n, c, h, w], -2.0, 2.0);
        let gamma = uniform(rng, &[c], 0.5, 1.5);
        let beta = uniform(rng, &[c], -0.5, 0.5);
        check("batch_norm_train", &[x, gamma, beta], &|g, v| Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0), rng, t);
    })
}

pub fn batch_norm_eval() -> Tally {
    run("batch_norm_eval", |rng, t| {
        let [n, c, h, w] = dims(rng);
        let x = uniform(rng, &[n, c, h, w], -2.0, 2.0);
        let gamma = uniform(rng, &[c], 0.5, 1.5);
        let beta = uniform(rng, &[c], -0.5, 0.5);
        let stats = RunningStats {
            mean: (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            var: (0..c).map(|_| rng.gen_range(0.5..2.0)).collect(),
            updates: 1,
        };
        check("batch_norm_eval", &[x, gamma, beta], &|g, v| g.batch_norm_eval(v[0], v[1], v[2], &stats, 1e-5), rng, t);
    })
}

fn unary(name: &str, lo: f64, hi: f64, f: &dyn Fn(&mut Graph, Var) -> csau::Result<Var>) -> Tally {
    run(name, |rng, t| {
        let d = dims(rng);
        let x = uniform(rng, &d, lo, hi);
        check(name, &[x], &|g, v| f(g, v[0]), rng, t);
    })
}

pub fn elementwise_unary() -> Vec<Tally> {
    vec![
        unary("relu", -1.0, 1.0, &|g, x| Ok(g.relu(x))),
        unary("sigmoid", -4.0, 4.0, &|g, x| Ok(g.sigmoid(x))),
        unary("exp", -2.0, 2.0, &|g, x| Ok(g.exp(x))),
        unary("log", 0.1, 3.0, &|g, x| g.log(x)),
        unary("powf", 0.1, 2.0, &|g, x| g.powf(x, 1.9808)),
        unary("powf_sqrt", 0.1, 2.0, &|g, x| g.powf(x, 0.5)),
        unary("clamp", -1.0, 1.0, &|g, x| Ok(g.clamp(x, -0.4, 0.6))),
        unary("scale", -1.0, 1.0, &|g, x| Ok(g.scale(x, -2.5))),
        unary("add_scalar", -1.0, 1.0, &|g, x| Ok(g.add_scalar(x, 0.3))),
        unary("one_minus", -1.0, 1.0, &|g, x| Ok(g.one_minus(x))),
        unary("sum", -1.0, 1.0, &|g, x| Ok(g.sum(x))),
        unary("mean", -1.0, 1.0, &|g, x| Ok(g.mean(x))),
    ]
}

pub fn elementwise_binary() -> Vec<Tally> {
    type Bin = fn(&mut Graph, Var, Var) -> csau::Result<Var>;
    let ops: [(&str, Bin); 3] = [("add", Graph::add), ("sub", Graph::sub), ("mul", Graph::mul)];
    ops.into_iter()
        .map(|(name, op)| {
            run(name, |rng, t| {
                let d = dims(rng);
                let a = uniform(rng, &d, -1.0, 1.0);
                let b = if rng.gen_bool(0.3) { uniform(rng, &[1], -1.0, 1.0) } else { uniform(rng, &d, -1.0, 1.0) };
                check(name, &[a, b], &|g, v| op(g, v[0], v[1]), rng, t);
            })
        })
        .collect()
}

pub fn channel_ops() -> Vec<Tally> {
    let concat = run("concat_channels", |rng, t| {
        let [n, ca, h, w] = dims(rng);
        let cb = rng.gen_range(1..=3);
        let a = uniform(rng, &[n, ca, h, w], -1.0, 1.0);
        let b = uniform(rng, &[n, cb, h, w], -1.0, 1.0);
        check("concat_channels", &[a, b], &|g, v| g.concat_channels(v[0], v[1]), rng, t);
    });
    let broadcast = run("broadcast_channels", |rng, t| {
        let [n, c, h, w] = dims(rng);
        let a = uniform(rng, &[n, 1, h, w], -1.0, 1.0);
        check("broadcast_channels", &[a], &|g, v| g.broadcast_channels(v[0], c + 1), rng, t);
    });
    vec![concat, broadcast]
}

/// The gate as a whole, in both link modes, with respect to its skip input
/// and gating signal.
pub fn attention_gate() -> Vec<Tally> {
    [LinkMode::Up, LinkMode::Down]
        .into_iter()
        .map(|link| {
            let name = format!("gate_{link:?}");
            run(&name, |rng, t| {
                let (cx, cg) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
                let n = rng.gen_range(1..=2);
                let gate = StandaloneGate::new(cx, cg, rng.gen());
                let x = uniform(rng, &[n, cx, 4, 4], -1.0, 1.0);
                let gs = uniform(rng, &[n, cg, 2, 2], -1.0, 1.0);
                check(&name, &[x, gs], &|g, v| Ok(gate.apply(g, v[0], v[1], link)?.0), rng, t);
            })
        })
        .collect()
}

/// Parameter gradients through a whole small network in train mode, on
/// randomly sampled coordinates.
pub fn network_parameters() -> Tally {
    let spec = NetworkSpec { base_channels: 2, depth: 2, ..NetworkSpec::attention(2) };
    let mut tally = Tally { bound_exclusions: false, ..Tally::named("network") };
    for inst in 0..4u64 {
        let mut rng = seed::rng(5, "net-grad", inst);
        let net = Network::build(&spec, inst).unwrap();
        let x = uniform(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
        let loss_of = |params: &[Tensor], grads: bool| {
            let mut probe = Network::build(&spec, inst).unwrap();
            probe.params_mut().clone_from_slice(params);
            let mut g = Graph::new();
            let f = probe.forward(&mut g, &x, BnMode::Train).unwrap();
            let l = g.mean(f.pred);
            let v = g.value(l).item();
            if !grads {
                return (v, vec![]);
            }
            g.backward(l).unwrap();
            (v, f.params.iter().map(|&p| g.take_grad(p).unwrap()).collect::<Vec<_>>())
        };
        let base = net.params().to_vec();
        let (f0, analytic) = loss_of(&base, true);
        for _ in 0..40 {
            let k = rng.gen_range(0..base.len());
            let i = rng.gen_range(0..base[k].numel());
            let at = |d: f64| {
                let mut p = base.clone();
                p[k].data_mut()[i] += d;
                loss_of(&p, false).0
            };
            let (fp, fm) = (at(STEP), at(-STEP));
            if rel_err((fp - f0) / STEP, (f0 - fm) / STEP) > 2.0 * TOL {
                tally.excluded += 1;
                continue;
            }
            let e = rel_err(analytic[k].data()[i], (fp - fm) / (2.0 * STEP));
            tally.checked += 1;
            if e > tally.worst {
                tally.worst = e;
                tally.worst_at = format!("{}[{i}]", net.param_names()[k]);
            }
        }
    }
    tally
}

pub fn cs_loss_end_to_end() -> Tally {
    let r = cs_loss_grad_check(8, 8, INSTANCES, 3).unwrap();
    let mut tally = Tally { bound_exclusions: false, ..Tally::named("cs_loss") };
    tally.checked = r.checked;
    tally.excluded = r.excluded;
    tally.worst = r.max_rel_err;
    tally.worst_at = format!("{:?}", r.worst);
    if r.checked < 50 * INSTANCES {
        tally.worst_at = format!("only {} coordinates", r.checked);
        tally.worst = f64::INFINITY;
    }
    tally
}

pub fn all() -> Vec<Tally> {
    let mut out = vec![conv2d(), conv_transpose2d(), max_pool2d(), batch_norm_train(), batch_norm_eval()];
    out.extend(elementwise_unary());
    out.extend(elementwise_binary());
    out.extend(channel_ops());
    out.extend(attention_gate());
    out.push(network_parameters());
    out.push(cs_loss_end_to_end());
    out
}
