use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TOY: &str = "\
seed = 1
[model]
family = resmlp
depth = 1
channels = 16
channel_hidden = 32
groups = 1
[train]
epochs = 2
[data]
train_size = 200
test_size = 100
[output]
dir = out
";

fn qmlp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qmlp"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("toy.cfg"), TOY).unwrap();
    dir
}

#[test]
fn train_then_quantize_w4a8() {
    let dir = setup();
    let d = dir.path();
    ok(&qmlp(d, &["train", "--config", "toy.cfg"]));
    assert!(d.join("out/model.qmck").is_file());
    let curve = fs::read_to_string(d.join("out/loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3, "{curve}");

    let out = qmlp(d, &["quantize", "--config", "toy.cfg", "--set", "quant.weight_bits=4"]);
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("weight_bits = 4"), "config echo missing");
    let metrics = fs::read_to_string(d.join("out/metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "model,precision,size_mb,bops_g,top1");
    assert!(lines[1].contains(",W32A32,"));
    assert!(lines[2].contains(",W4A8,"));
}

#[test]
fn reruns_write_identical_reports() {
    let dir = setup();
    let d = dir.path();
    ok(&qmlp(d, &["train", "--config", "toy.cfg"]));
    ok(&qmlp(d, &["quantize", "--config", "toy.cfg"]));
    let first = fs::read(d.join("out/metrics.csv")).unwrap();
    let model = fs::read(d.join("out/model.qmck")).unwrap();
    ok(&qmlp(d, &["train", "--config", "toy.cfg"]));
    ok(&qmlp(d, &["quantize", "--config", "toy.cfg"]));
    assert_eq!(fs::read(d.join("out/model.qmck")).unwrap(), model);
    assert_eq!(fs::read(d.join("out/metrics.csv")).unwrap(), first);
}

#[test]
fn remaining_verbs_produce_reports() {
    let dir = setup();
    let d = dir.path();
    ok(&qmlp(d, &["train", "--config", "toy.cfg"]));
    ok(&qmlp(d, &["calibrate", "--config", "toy.cfg"]));
    let qp = fs::read_to_string(d.join("out/qparams.csv")).unwrap();
    assert!(qp.starts_with("edge,layer,site,r_min,r_max,scale,zero_point,bits,scheme"));
    ok(&qmlp(d, &["eval", "--config", "toy.cfg"]));
    ok(&qmlp(d, &["sensitivity", "--config", "toy.cfg", "--probes", "2"]));
    let sens = fs::read_to_string(d.join("out/sensitivity.csv")).unwrap();
    assert_eq!(sens.lines().count(), 3);
    assert!(sens.contains("token_mixing") && sens.contains("channel_mixing"));
    ok(&qmlp(d, &["profile", "--config", "toy.cfg"]));
    assert!(d.join("out/profile.csv").is_file());
}

#[test]
fn report_merges_inputs_and_json_output() {
    let dir = setup();
    let d = dir.path();
    ok(&qmlp(d, &["train", "--config", "toy.cfg"]));
    ok(&qmlp(d, &["quantize", "--config", "toy.cfg", "--set", "output.format=json"]));
    ok(&qmlp(d, &["eval", "--config", "toy.cfg"]));
    ok(&qmlp(d, &["report", "out/metrics.json", "out/eval.csv", "--out", "merged"]));
    let merged = fs::read_to_string(d.join("merged/report.csv")).unwrap();
    assert_eq!(merged.lines().count(), 4, "{merged}");
    assert!(merged.lines().next().unwrap().ends_with(",source"));
}

#[test]
fn qat_finetune_writes_both_stages() {
    let dir = setup();
    let d = dir.path();
    ok(&qmlp(d, &["train", "--config", "toy.cfg"]));
    let out = qmlp(
        d,
        &["train", "--config", "toy.cfg", "--set", "train.mode=qat_finetune", "--set", "quant.weight_bits=4", "--set", "train.qat_epochs=1"],
    );
    ok(&out);
    let m = fs::read_to_string(d.join("out/qat_metrics.csv")).unwrap();
    assert!(m.contains(",ptq") && m.contains(",qat"), "{m}");
    assert!(d.join("out/model_qat.qmck").is_file());
}

#[test]
fn exit_codes() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(qmlp(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(qmlp(d, &["train", "--config", "missing.cfg"]).status.code(), Some(2));
    assert_eq!(qmlp(d, &["train", "--config", "toy.cfg", "--set", "model.depth=lots"]).status.code(), Some(1));
    assert_eq!(qmlp(d, &["train", "--config", "toy.cfg", "--set", "model.groups=3"]).status.code(), Some(1));
    // no checkpoint yet
    let out = qmlp(d, &["eval", "--config", "toy.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}
