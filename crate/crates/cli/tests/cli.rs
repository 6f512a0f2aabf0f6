use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csau::data::{load_gray, save_gray};
use csau::map::Map2;

fn csau(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csau")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) {
    let out = csau(args);
    assert!(out.status.success(), "csau {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

/// Six training and two validation samples of 32x32 synthetic strokes.
fn datasets(dir: &Path) -> (PathBuf, PathBuf) {
    let (train, val) = (dir.join("train"), dir.join("val"));
    ok(&["synth", "--count", "6", "--size", "32", "--out", s(&train)]);
    ok(&["synth", "--count", "2", "--first", "6", "--size", "32", "--out", s(&val)]);
    (train, val)
}

fn first_pair(dataset: &Path) -> (PathBuf, PathBuf) {
    let mut names: Vec<_> =
        std::fs::read_dir(dataset.join("images")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    (dataset.join("images").join(&names[0]), dataset.join("labels").join(&names[0]))
}

fn train(train: &Path, val: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec![
        "train",
        "--train",
        s(train),
        "--val",
        s(val),
        "--base-channels",
        "4",
        "--depth",
        "2",
        "--max-epochs",
        "2",
        "--validate-every",
        "2",
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = csau(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out =
        csau(&["evaluate", "--pred", "/nonexistent/p.png", "--label", "/nonexistent/y.png", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_values_apply_and_flags_override_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.cfg");
    std::fs::write(&cfg, "# small set\ncount = 3\nsize = 48\n").unwrap();
    let out = dir.path().join("a");
    ok(&["synth", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(std::fs::read_dir(out.join("images")).unwrap().count(), 3);
    let (img, _) = first_pair(&out);
    assert_eq!(load_gray(&img).unwrap().dims(), (48, 48));

    let out = dir.path().join("b");
    ok(&["synth", "--config", s(&cfg), "--count", "2", "--out", s(&out)]);
    assert_eq!(std::fs::read_dir(out.join("images")).unwrap().count(), 2);
}

#[test]
fn evaluate_perfect_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let (_, val) = datasets(dir.path());
    let (_, label) = first_pair(&val);
    let out = dir.path().join("eval");
    ok(&["evaluate", "--pred", s(&label), "--label", s(&label), "--out", s(&out)]);
    let rows = csv(&out.join("metrics.csv"));
    let col = |name: &str| rows[0].iter().position(|c| c == name).unwrap();
    assert_eq!(rows[1][col("f1")].parse::<f64>().unwrap(), 1.0);
    assert_eq!(rows[1][col("acc_cs")].parse::<f64>().unwrap(), 1.0);
    assert_eq!(rows[1][col("breaks")].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn empty_label_has_black_feature_map() {
    let dir = tempfile::tempdir().unwrap();
    let (label, pred) = (dir.path().join("y.png"), dir.path().join("p.png"));
    save_gray(&label, &Map2::zeros(20, 20)).unwrap();
    save_gray(&pred, &Map2::filled(20, 20, 0.2)).unwrap();
    let out = dir.path().join("loss");
    ok(&["loss-inspect", "--pred", s(&pred), "--label", s(&label), "--out", s(&out)]);
    let feature = load_gray(&out.join("connectivity_feature.png")).unwrap();
    assert!(feature.data().iter().all(|&v| v == 0.0));
    for name in ["c_gt", "c_pred", "theta1", "theta2", "weight", "per_pixel"] {
        assert!(out.join(format!("{name}.png")).exists(), "{name}");
    }
    assert!(out.join("loss.csv").exists());
}

#[test]
fn fit_connectivity_writes_model_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["fit-connectivity", "--trials", "1000", "--out", s(dir.path())]);
    let model = std::fs::read_to_string(dir.path().join("connectivity_model.txt")).unwrap();
    for key in ["alpha", "beta", "gamma", "r", "residual_norm", "converged"] {
        assert!(model.lines().any(|l| l.split('=').next().unwrap().trim() == key), "{key} missing:\n{model}");
    }
    let curve = csv(&dir.path().join("connectivity_curve.csv"));
    assert_eq!(curve.len(), 26);
    assert!(dir.path().join("run.json").exists());
}

#[test]
fn train_then_predict_with_attention_maps() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, val) = datasets(dir.path());
    let run = dir.path().join("run");
    train(&tr, &val, &run, &[]);
    let history = csv(&run.join("history.csv"));
    assert_eq!(history[0].join(","), "step,epoch,train_loss,val_loss,lr,wall_time,weight_decay");
    // 3 batches per epoch validated at batch 2 and at the epoch's end.
    assert_eq!(history.len() - 1, 4);
    assert!(history[1..].iter().all(|r| r[5] == "0"));

    let (image, _) = first_pair(&val);
    let out = dir.path().join("pred");
    ok(&[
        "predict",
        "--checkpoint",
        s(&run.join("best.ckpt")),
        "--image",
        s(&image),
        "--tile",
        "16",
        "--visualize",
        "--out",
        s(&out),
    ]);
    let pred = load_gray(&out.join("prediction.png")).unwrap();
    assert_eq!(pred.dims(), (32, 32));
    for l in 0..2 {
        assert!(out.join(format!("attention_{l}.png")).exists());
    }
    assert!(!out.join("attention_2.png").exists());
}

#[test]
fn identical_seeds_give_identical_histories_and_losses_diverge() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, val) = datasets(dir.path());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    train(&tr, &val, &a, &["--seed", "7"]);
    train(&tr, &val, &b, &["--seed", "7"]);
    train(&tr, &val, &c, &["--seed", "7", "--loss", "ce"]);
    let read = |d: &Path| std::fs::read(d.join("history.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(std::fs::read(a.join("best.ckpt")).unwrap(), std::fs::read(b.join("best.ckpt")).unwrap());
    let (cs, ce) = (csv(&a.join("history.csv")), csv(&c.join("history.csv")));
    assert_ne!(cs[1][2], ce[1][2]);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, val) = datasets(dir.path());
    let (full, part, rest) = (dir.path().join("full"), dir.path().join("part"), dir.path().join("rest"));
    train(&tr, &val, &full, &[]);
    train(&tr, &val, &part, &["--stop-after", "4"]);
    train(&tr, &val, &rest, &["--resume", s(&part.join("trainer.ckpt"))]);
    for f in ["history.csv", "best.ckpt"] {
        assert_eq!(std::fs::read(full.join(f)).unwrap(), std::fs::read(rest.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn replay_detects_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let (_, val) = datasets(dir.path());
    let (_, label) = first_pair(&val);
    let pred = dir.path().join("p.png");
    std::fs::copy(&label, &pred).unwrap();
    let out = dir.path().join("eval");
    ok(&["evaluate", "--pred", s(&pred), "--label", s(&label), "--out", s(&out)]);
    ok(&["replay", "--manifest", s(&out.join("run.json")), "--out", s(&dir.path().join("again"))]);
    save_gray(&pred, &Map2::filled(32, 32, 0.5)).unwrap();
    let res = csau(&["replay", "--manifest", s(&out.join("run.json")), "--out", s(&dir.path().join("third"))]);
    assert_eq!(res.status.code(), Some(2));
}
