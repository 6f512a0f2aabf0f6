use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Parser;
use serde::Serialize;

use csau::archive::{write_atomic, Archive};
use csau::connectivity::{connectivity_curve, fit_model, ConnectedRule, ConnectivityModel, CurvePoint};
use csau::data::{
    load_color, load_dataset, load_gray, load_label, make_tile_plan, pad_image, pad_to, predict_tiled, save_gray,
    synth_range, write_dataset, SamplePair, StrokeParams,
};
use csau::loss::{ce_loss, cs_loss, CsLossConfig, LossKind, Reduction};
use csau::map::Map2;
use csau::metrics::{evaluate, AccCsMode, DogParams, MetricsConfig, MetricsReport};
use csau::model::{AttentionMode, Network, NetworkSpec};
use csau::train::{
    history_csv, mean_by_variant, run_ablation, table_csv, AblationData, AdamWConfig, ScheduleConfig, TrainConfig,
    Trainer,
};

use crate::args::*;
use crate::manifest::{hash_file, hash_inputs, now_unix, RunManifest};
use crate::viz;

/// Failures raised by the front end itself, classified for the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

/// Files written by a command, relative to its output directory.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Outputs { dir: dir.to_path_buf(), files: vec![] })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        write_atomic(&self.path(name), body.as_bytes())?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn gray(&mut self, name: &str, m: &Map2) -> Result<()> {
        save_gray(&self.path(name), m)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn color(&mut self, name: &str, im: &csau::data::ColorImage) -> Result<()> {
        csau::data::save_color(&self.path(name), im)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn archive(&mut self, name: &str, a: &Archive) -> Result<()> {
        a.save(&self.path(name))?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Records files another routine already wrote under the output directory.
    fn adopt(&mut self, paths: &[PathBuf]) {
        for p in paths {
            if let Ok(rel) = p.strip_prefix(&self.dir) {
                self.files.push(rel.to_string_lossy().into_owned());
            }
        }
    }
}

struct Run<'a> {
    argv: &'a [OsString],
    started: f64,
}

impl Run<'_> {
    fn finish(
        &self,
        name: &str,
        common: &Common,
        config: &impl Serialize,
        inputs: &[PathBuf],
        out: Outputs,
    ) -> Result<()> {
        let mut outputs = BTreeMap::new();
        for f in &out.files {
            outputs.insert(f.clone(), hash_file(&out.dir.join(f))?);
        }
        let m = RunManifest {
            command: name.to_string(),
            argv: self.argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect(),
            config: serde_json::to_value(config)?,
            seed: common.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: hash_inputs(inputs)?,
            outputs,
            started_unix: self.started,
            finished_unix: now_unix(),
        };
        let p = m.write(&out.dir)?;
        log::info!("{name}: {} outputs, manifest {}", out.files.len(), p.display());
        Ok(())
    }
}

pub fn dispatch(cli: Cli, argv: &[OsString]) -> Result<()> {
    let run = Run { argv, started: now_unix() };
    match cli.command {
        Command::FitConnectivity(a) => fit_connectivity(&run, a),
        Command::Synth(a) => synth(&run, a),
        Command::Train(a) => train(&run, a),
        Command::Predict(a) => predict(&run, a),
        Command::Evaluate(a) => evaluate_cmd(&run, a),
        Command::LossInspect(a) => loss_inspect(&run, a),
        Command::Ablation(a) => ablation(&run, a),
        Command::Replay(a) => replay(a),
    }
}

pub fn model_text(m: &ConnectivityModel) -> String {
    format!("alpha = {}\nbeta = {}\ngamma = {}\nr = {}\n", m.alpha, m.beta, m.gamma, m.r)
}

pub fn read_model(path: &Path) -> Result<ConnectivityModel> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let pairs: BTreeMap<String, String> = crate::config::parse_pairs(&text, path)?.into_iter().collect();
    let get = |k: &str| -> Result<f64> {
        let v = pairs.get(k).ok_or_else(|| Failure::Data(format!("{}: missing key {k}", path.display())))?;
        v.parse::<f64>().map_err(|_| Failure::Data(format!("{}: bad value for {k}: {v}", path.display())).into())
    };
    Ok(ConnectivityModel::new(get("alpha")?, get("beta")?, get("gamma")?, get("r")? as usize)?)
}

fn model_of(a: &ModelArgs) -> Result<ConnectivityModel> {
    match &a.connectivity {
        Some(p) => read_model(p),
        None => Ok(ConnectivityModel::default()),
    }
}

fn model_inputs(a: &ModelArgs) -> Vec<PathBuf> {
    a.connectivity.iter().cloned().collect()
}

fn fit_connectivity(run: &Run, a: FitConnectivityArgs) -> Result<()> {
    let mut out = Outputs::new(&a.common.out)?;
    let rule = match a.rule {
        RuleArg::NonAdjacent => ConnectedRule::NonAdjacentContacts,
        RuleArg::Any => ConnectedRule::AnyContact,
    };
    let stats = connectivity_curve(a.r, a.trials, a.common.seed, rule)?;
    let points: Vec<CurvePoint> = stats
        .iter()
        .map(|s| CurvePoint { density: s.density, probability: s.probability(), trials: s.trials })
        .collect();
    let report = fit_model(&points, a.r)?;
    let m = &report.model;
    let mut body = model_text(m);
    body.push_str(&format!(
        "residual_norm = {}\niterations = {}\nconverged = {}\npoints_used = {}\n",
        report.residual_norm, report.iterations, report.converged, report.points_used
    ));
    out.text("connectivity_model.txt", &body)?;
    let mut csv = String::from("k,density,trials,connected,empirical_p,fitted_c\n");
    for s in &stats {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.k,
            s.density,
            s.trials,
            s.connected,
            s.probability(),
            m.eval(s.density)
        ));
    }
    out.text("connectivity_curve.csv", &csv)?;
    log::info!("fit: alpha {:.4} beta {:.4} gamma {:.4}", m.alpha, m.beta, m.gamma);
    run.finish("fit-connectivity", &a.common, &a, &[], out)
}

fn synth(run: &Run, a: SynthArgs) -> Result<()> {
    let mut out = Outputs::new(&a.common.out)?;
    let pairs = synth_range(a.first..a.first + a.count, a.size, a.common.seed, &StrokeParams::default())?;
    let written = write_dataset(&out.dir, &pairs)?;
    out.adopt(&written);
    run.finish("synth", &a.common, &a, &[], out)
}

fn network_spec(n: &NetArgs) -> Result<NetworkSpec> {
    let attention = match n.attention {
        AttentionArg::None => AttentionMode::None,
        AttentionArg::UpLink => AttentionMode::UpLink,
        AttentionArg::DownLink => AttentionMode::DownLink,
    };
    let spec = NetworkSpec {
        base_channels: n.base_channels,
        depth: n.depth,
        attention,
        concat_attention_head: attention != AttentionMode::None && !n.no_concat_head,
        ..NetworkSpec::default()
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(spec)
}

fn train_config(o: &OptimArgs, model: ConnectivityModel, seed: u64) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        adam: AdamWConfig { beta1: o.beta1, beta2: o.beta2, eps: o.adam_eps, weight_decay: o.weight_decay },
        schedule: ScheduleConfig {
            lr0: o.lr0,
            lr_floor: o.lr_floor,
            decay_factor: o.decay_factor,
            decay_patience: o.decay_patience,
            reset_patience: o.reset_patience,
        },
        batch_size: o.batch_size,
        max_epochs: o.max_epochs,
        validate_every: o.validate_every,
        loss_kind: match o.loss {
            LossArg::Ce => LossKind::Ce,
            LossArg::Cs => LossKind::Cs,
        },
        loss: CsLossConfig { model, lambda: o.lambda, ..CsLossConfig::default() },
        augment: o.augment,
        record_wall_time: o.record_wall_time,
        seed,
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

/// Zero-pads every sample up to the network's size multiple.
fn pad_samples(set: Vec<SamplePair>, multiple: usize) -> Result<Vec<SamplePair>> {
    set.into_iter()
        .map(|s| {
            let (h, w) = s.label.dims();
            let (th, tw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
            if (th, tw) == (h, w) {
                return Ok(s);
            }
            Ok(SamplePair::new(s.id, pad_image(&s.image, th, tw)?, pad_to(&s.label, th, tw)?)?)
        })
        .collect()
}

fn load_split(dir: &Path, multiple: usize) -> Result<Vec<SamplePair>> {
    let set = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if set.is_empty() {
        return Err(Failure::Data(format!("dataset {} is empty", dir.display())).into());
    }
    pad_samples(set, multiple)
}

fn train(run: &Run, a: TrainArgs) -> Result<()> {
    let mut out = Outputs::new(&a.common.out)?;
    let spec = network_spec(&a.net)?;
    let cfg = train_config(&a.optim, model_of(&a.model)?, a.common.seed)?;
    let train = load_split(&a.train, spec.spatial_multiple())?;
    let val = load_split(&a.val, spec.spatial_multiple())?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::restore(&Archive::load(p)?, cfg.clone(), &train, &val)?,
        None => {
            let net = Network::build(&spec, csau::seed::derive(a.common.seed, "init", 0))?;
            Trainer::new(net, cfg.clone(), &train, &val)?
        }
    };
    log::info!(
        "train: {} parameters, {} batches per epoch",
        trainer.network().num_parameters(),
        trainer.batches_per_epoch()
    );
    loop {
        if a.stop_after.is_some_and(|n| trainer.step_count() >= n) {
            break;
        }
        match trainer.step_batch() {
            Ok(true) => {}
            Ok(false) => break,
            Err(e) => {
                if let Some(good) = trainer.last_good_checkpoint() {
                    out.archive("last_good.ckpt", good)?;
                }
                out.text("history.csv", &history_csv(trainer.history(), cfg.adam.weight_decay))?;
                return Err(e.into());
            }
        }
    }
    out.text("history.csv", &history_csv(trainer.history(), cfg.adam.weight_decay))?;
    out.archive("trainer.ckpt", &trainer.checkpoint())?;
    match trainer.best_checkpoint() {
        Some(best) => out.archive("best.ckpt", best)?,
        None => log::warn!("train: stopped before the first validation; no best checkpoint yet"),
    }
    let mut inputs = vec![a.train.clone(), a.val.clone()];
    inputs.extend(a.resume.clone());
    inputs.extend(model_inputs(&a.model));
    run.finish("train", &a.common, &a, &inputs, out)
}

fn load_network(path: &Path) -> Result<Network> {
    let a = Archive::load(path)?;
    if a.kind == "trainer" {
        let best: Archive = {
            let mut s = Archive::new("network");
            for (k, v) in &a.text {
                if let Some(r) = k.strip_prefix("best.") {
                    s.text.insert(r.to_string(), v.clone());
                }
            }
            for (k, v) in &a.arrays {
                if let Some(r) = k.strip_prefix("best.") {
                    s.arrays.insert(r.to_string(), v.clone());
                }
            }
            s
        };
        return Ok(Network::from_archive(&best)?);
    }
    Ok(Network::from_archive(&a)?)
}

fn predict(run: &Run, a: PredictArgs) -> Result<()> {
    let mut out = Outputs::new(&a.common.out)?;
    let net = load_network(&a.checkpoint)?;
    let image = load_color(&a.image)?;
    let (h, w) = image.dims();
    let m = net.spec().spatial_multiple();
    let window = a.tile + 2 * a.context;
    if window % m != 0 {
        return Err(Failure::Usage(format!("tile + 2*context = {window} must be a multiple of {m}")).into());
    }
    let plan = make_tile_plan(h, w, a.tile, a.overlap)?.with_context(a.context);
    log::info!("predict: {}x{} image, {} tiles of {}", h, w, plan.offsets.len(), a.tile);
    let prob = predict_tiled(&net, &image, &plan)?;
    out.gray("prediction.png", &prob)?;
    if a.visualize {
        let alphas = viz::attention_maps(&net, &image, &plan)?;
        if alphas.is_empty() {
            log::warn!("predict: network has no attention gates; no attention maps written");
        }
        for (l, m) in alphas.iter().enumerate() {
            out.gray(&format!("attention_{l}.png"), m)?;
        }
    }
    run.finish("predict", &a.common, &a, &[a.checkpoint.clone(), a.image.clone()], out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "map".into())
}

fn evaluate_cmd(run: &Run, a: EvaluateArgs) -> Result<()> {
    if a.pred.len() != a.label.len() {
        return Err(Failure::Usage(format!("{} --pred maps but {} --label maps", a.pred.len(), a.label.len())).into());
    }
    let mut out = Outputs::new(&a.common.out)?;
    let cfg = MetricsConfig {
        threshold: a.threshold,
        thin_threshold: a.thin_threshold,
        dog: DogParams { sigma1: a.dog_sigma1, sigma2: a.dog_sigma2, tau: a.dog_tau },
        model: model_of(&a.model)?,
        acc_mode: match a.acc_mode {
            AccModeArg::Agreement => AccCsMode::Agreement,
            AccModeArg::PredictedForeground => AccCsMode::PredictedForeground,
        },
    };
    let mut csv = format!("id,threshold,{}\n", MetricsReport::COLUMNS.join(","));
    let row = |id: &str, r: &MetricsReport| {
        let vals: Vec<String> = r.values().iter().map(|v| v.to_string()).collect();
        format!("{id},{},{}\n", r.threshold, vals.join(","))
    };
    let mut reports = Vec::new();
    let mut names = BTreeMap::<String, usize>::new();
    for (pp, lp) in a.pred.iter().zip(&a.label) {
        let pred = load_gray(pp)?;
        let y = load_label(lp)?;
        let base = stem(pp);
        let n = names.entry(base.clone()).or_insert(0);
        let id = if *n == 0 { base } else { format!("{base}_{n}") };
        *n += 1;
        let e = evaluate(&pred, &y, &cfg)?;
        csv.push_str(&row(&id, &e.report));
        if a.emit_curves {
            let mut pr = String::from("threshold,recall,precision\n");
            for (t, (r, p)) in e.curves.pr.thresholds.iter().zip(&e.curves.pr.points) {
                pr.push_str(&format!("{t},{r},{p}\n"));
            }
            out.text(&format!("pr_{id}.csv"), &pr)?;
            let mut roc = String::from("threshold,fpr,tpr\n");
            for (t, (f, tp)) in e.curves.roc.thresholds.iter().zip(&e.curves.roc.points) {
                roc.push_str(&format!("{t},{f},{tp}\n"));
            }
            out.text(&format!("roc_{id}.csv"), &roc)?;
        }
        if a.emit_mask {
            out.gray(&format!("mask_{id}.png"), &e.mask.mask)?;
        }
        if a.visualize {
            out.gray(&format!("connectivity_{id}.png"), &viz::feature_map(&y, &cfg.model)?)?;
            out.color(&format!("fn_overlay_{id}.png"), &viz::fn_overlay(&pred, &y, cfg.threshold)?)?;
        }
        reports.push(e.report);
    }
    if reports.len() > 1 {
        csv.push_str(&row("mean", &MetricsReport::mean(&reports)?));
    }
    out.text("metrics.csv", &csv)?;
    let mut inputs = a.pred.clone();
    inputs.extend(a.label.iter().cloned());
    inputs.extend(model_inputs(&a.model));
    run.finish("evaluate", &a.common, &a, &inputs, out)
}

/// Scales a non-negative map by its maximum for display.
fn normalized(m: &Map2) -> Map2 {
    let max = m.data().iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        m.map(|v| v / max)
    } else {
        m.clone()
    }
}

fn loss_inspect(run: &Run, a: LossInspectArgs) -> Result<()> {
    let mut out = Outputs::new(&a.common.out)?;
    let pred = load_gray(&a.pred)?;
    let y = load_label(&a.label)?;
    let reduction = match a.reduction {
        ReductionArg::Mean => Reduction::Mean,
        ReductionArg::Sum => Reduction::Sum,
    };
    let cfg = CsLossConfig { model: model_of(&a.model)?, lambda: a.lambda, eps: a.eps, reduction };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let b = cs_loss(&pred, &y, &cfg)?;
    let ce = ce_loss(&pred, &y, reduction, a.eps)?;
    let thin = b.c_gt.data().iter().zip(y.data()).filter(|(&c, &yi)| yi == 1.0 && c < 1.0).count();
    let mut csv = String::from("quantity,value\n");
    for (k, v) in [
        ("cs_loss", b.total),
        ("ce_loss", ce),
        ("foreground_pixels", y.count_nonzero() as f64),
        ("foreground_below_full_connectivity", thin as f64),
        ("max_weight", b.weight.data().iter().cloned().fold(f64::MIN, f64::max)),
        ("max_theta2", b.theta2.data().iter().cloned().fold(f64::MIN, f64::max)),
    ] {
        csv.push_str(&format!("{k},{v}\n"));
    }
    out.text("loss.csv", &csv)?;
    out.gray("c_gt.png", &b.c_gt)?;
    out.gray("c_pred.png", &b.c_pred)?;
    out.gray("theta1.png", &normalized(&b.theta1))?;
    out.gray("theta2.png", &normalized(&b.theta2))?;
    out.gray("weight.png", &normalized(&b.weight))?;
    out.gray("per_pixel.png", &normalized(&b.per_pixel))?;
    out.gray("connectivity_feature.png", &viz::feature_map(&y, &cfg.model)?)?;
    let mut inputs = vec![a.pred.clone(), a.label.clone()];
    inputs.extend(model_inputs(&a.model));
    run.finish("loss-inspect", &a.common, &a, &inputs, out)
}

fn ablation(run: &Run, a: AblationArgs) -> Result<()> {
    let mut out = Outputs::new(&a.common.out)?;
    let multiple = NetworkSpec::plain(a.base_channels).spatial_multiple();
    let (train, val, test, inputs) = match (&a.train, &a.val, &a.test) {
        (Some(tr), Some(va), Some(te)) => (
            load_split(tr, multiple)?,
            load_split(va, multiple)?,
            load_split(te, multiple)?,
            vec![tr.clone(), va.clone(), te.clone()],
        ),
        _ => {
            let p = StrokeParams::default();
            let (n1, n2) = (a.train_count, a.train_count + a.val_count);
            let n3 = n2 + a.test_count;
            let seed = a.common.seed;
            (
                synth_range(0..n1, a.size, seed, &p)?,
                synth_range(n1..n2, a.size, seed, &p)?,
                synth_range(n2..n3, a.size, seed, &p)?,
                vec![],
            )
        }
    };
    if a.seeds.is_empty() {
        return Err(Failure::Usage("--seeds must list at least one seed".into()).into());
    }
    let model = model_of(&a.model)?;
    let cfg = train_config(&a.optim, model.clone(), a.common.seed)?;
    let metrics = MetricsConfig { model, ..MetricsConfig::default() };
    let data = AblationData { train: &train, val: &val, test: &test };
    let rows = run_ablation(&data, a.base_channels, &cfg, &a.seeds, &metrics)?;
    out.text("ablation_runs.csv", &table_csv(&rows))?;
    let table = mean_by_variant(&rows)?;
    out.text("ablation_table.csv", &table_csv(&table))?;
    for r in &table {
        log::info!(
            "{:>5}: f1 {:.4} acc_cs {:.4} breaks {:.2}",
            r.variant,
            r.report.f1,
            r.report.acc_cs,
            r.report.breaks
        );
    }
    let mut inputs = inputs;
    inputs.extend(model_inputs(&a.model));
    run.finish("ablation", &a.common, &a, &inputs, out)
}

fn replay(a: ReplayArgs) -> Result<()> {
    let m = RunManifest::read(&a.manifest)?;
    if m.command == "replay" {
        return Err(Failure::Usage("cannot replay a replay".into()).into());
    }
    for (path, hash) in &m.inputs {
        let now = hash_file(Path::new(path)).map_err(|e| Failure::Data(format!("{e:#}")))?;
        if &now != hash {
            return Err(Failure::Data(format!("input {path} changed since the recorded run")).into());
        }
    }
    let mut argv: Vec<OsString> = vec!["csau".into()];
    argv.extend(m.argv.iter().map(OsString::from));
    argv.push("--out".into());
    argv.push(a.common.out.clone().into_os_string());
    let cli =
        Cli::try_parse_from(&argv).map_err(|e| Failure::Usage(format!("recorded arguments no longer parse: {e}")))?;
    dispatch(cli, &argv)?;
    let fresh = RunManifest::read(&a.common.out.join(crate::manifest::MANIFEST_NAME))?;
    let mut diffs = Vec::new();
    for (f, h) in &m.outputs {
        match fresh.outputs.get(f) {
            Some(g) if g == h => {}
            Some(_) => diffs.push(format!("{f}: content differs")),
            None => diffs.push(format!("{f}: not produced")),
        }
    }
    for f in fresh.outputs.keys().filter(|f| !m.outputs.contains_key(*f)) {
        diffs.push(format!("{f}: unexpected extra output"));
    }
    if !diffs.is_empty() {
        return Err(Failure::Data(format!("replay differs from the recorded run:\n  {}", diffs.join("\n  "))).into());
    }
    println!("replay: {} outputs identical to the recorded run", m.outputs.len());
    Ok(())
}
