use std::path::Path;
use std::process::{Command, Output};

use lficam::checkpoint::load_checkpoint;
use lficam::data::load_packed;
use lficam::training::evaluate_top1;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lficam")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &[&str] = &["--set", "widths=4,8", "--set", "stage_strides=2,2", "--set", "fin_depth=2"];

fn train_args<'a>(data: &'a str, out: &'a str, epochs: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec!["train", "--data", data, "--out", out, "--epochs", epochs, "--batch-size", "16"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    args
}

#[test]
fn synth_is_deterministic_and_validates_size() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.lfid"), dir.path().join("b.lfid"));
    assert_eq!(ok(&["synth", "--out", p(&a), "--n", "10", "--size", "16", "--seed", "3"]), "items,10\n");
    ok(&["synth", "--out", p(&b), "--n", "10", "--size", "16", "--seed", "3"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(dir.path().join("a.lfid.boxes").exists());

    let empty = dir.path().join("empty.lfid");
    ok(&["synth", "--out", p(&empty), "--n", "0", "--size", "16"]);
    assert!(load_packed(&empty).unwrap().is_empty());

    let out = run(&["synth", "--out", p(&dir.path().join("c.lfid")), "--n", "4", "--size", "8"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn train_eval_and_cam() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.lfid");
    ok(&["synth", "--out", p(&data), "--n", "40", "--size", "16", "--seed", "1"]);
    let ckpt = dir.path().join("m.lfck");
    let log = dir.path().join("m.csv");
    let stdout = ok(&train_args(p(&data), p(&ckpt), "1", &["--test", p(&data), "--log", p(&log)]));
    assert!(stdout.starts_with("epoch,lr,train_loss,train_err,test_err\n0,"));
    assert_eq!(std::fs::read_to_string(&log).unwrap(), stdout);

    let again = dir.path().join("again.csv");
    ok(&train_args(p(&data), p(&dir.path().join("m2.lfck")), "1", &["--test", p(&data), "--log", p(&again)]));
    assert_eq!(std::fs::read(&log).unwrap(), std::fs::read(&again).unwrap());

    let line = ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&data)]);
    let model = load_checkpoint(&ckpt).unwrap();
    let direct = evaluate_top1(&model, &load_packed(&data).unwrap()).unwrap();
    assert_eq!(line, format!("top1_error,{direct:.2}\n"));

    let heat = dir.path().join("h.pgm");
    let listing = ok(&["cam", "--ckpt", p(&ckpt), "--data", p(&data), "--index", "0", "--out", p(&heat)]);
    assert!(listing.starts_with("method,target,path\nlfi,"));
    let pgm = lficam::heatmap::Pnm::read(&heat).unwrap();
    assert_eq!((pgm.width, pgm.height, pgm.channels), (16, 16, 1));

    let base = dir.path().join("all.ppm");
    let listing = ok(&[
        "cam", "--ckpt", p(&ckpt), "--data", p(&data), "--index", "1", "--method", "all", "--overlay", "--target-class", "1",
        "--out", p(&base),
    ]);
    assert!(listing.contains("\nscore,1,") && listing.contains("\ncam,1,"));
    for name in ["all_lfi.ppm", "all_score.ppm", "all_cam.ppm", "all_side.ppm"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let side = lficam::heatmap::Pnm::read(dir.path().join("all_side.ppm")).unwrap();
    assert_eq!((side.width, side.height), (48, 16));

    let ppm = dir.path().join("all_lfi.ppm");
    ok(&["cam", "--ckpt", p(&ckpt), "--image", p(&ppm), "--out", p(&dir.path().join("from_image.pgm"))]);
}

#[test]
fn no_fin_checkpoint_is_a_plain_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.lfid");
    ok(&["synth", "--out", p(&data), "--n", "20", "--size", "16", "--seed", "2"]);
    let ckpt = dir.path().join("plain.lfck");
    ok(&train_args(p(&data), p(&ckpt), "1", &["--no-fin"]));
    let model = load_checkpoint(&ckpt).unwrap();
    assert!(!model.config().use_fin);
    let set = load_packed(&data).unwrap();
    for item in &set.items {
        let logits = model.logits(&item.pixels.clone().unsqueeze0()).unwrap();
        assert_eq!(logits.data(), model.plain_logits(&item.pixels).unwrap().data());
    }
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.lfid");
    ok(&["synth", "--out", p(&data), "--n", "10", "--size", "16"]);
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "epochs = 3\nwidths = [4, 8]\nstage_strides = [2, 2]\nfin_depth = 1\n").unwrap();
    let ckpt = dir.path().join("m.lfck");
    let stdout = ok(&["train", "--data", p(&data), "--out", p(&ckpt), "--config", p(&cfg), "--epochs", "1"]);
    assert_eq!(stdout.lines().count(), 2);
    assert_eq!(load_checkpoint(&ckpt).unwrap().config().fin_depth, 1);

    std::fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let out = run(&["train", "--data", p(&data), "--out", p(&ckpt), "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn stability_and_eval_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.lfid");
    ok(&["synth", "--out", p(&data), "--n", "10", "--size", "16"]);
    let ckpt = dir.path().join("m.lfck");
    ok(&train_args(p(&data), p(&ckpt), "0", &["--seed", "5"]));
    let initial = load_checkpoint(&ckpt).unwrap();
    assert_eq!(initial, lficam::LfiCamModel::new(initial.config().clone(), 5).unwrap());
    let c = p(&ckpt);
    let report = ok(&["stability", "--ckpts", &[c; 6].join(","), "--data", p(&data)]);
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 8);
    assert!(lines[1..7].iter().all(|l| l.ends_with(",1.000000")));
    assert_eq!(lines[7], "average,1.000000");

    assert_eq!(run(&["stability", "--ckpts", c, "--data", p(&data)]).status.code(), Some(1));
    let missing = dir.path().join("nope.lfck");
    assert_eq!(run(&["eval", "--ckpt", p(&missing), "--data", p(&data)]).status.code(), Some(1));
}
