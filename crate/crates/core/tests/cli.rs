use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[group]
g = 16
k = 8

[net]
c1 = 8
c2 = 8
c3 = 8
depth = 1
heads = 2
hidden = 8
ffn = 16

[up]
gamma = 2
sa_k = 4
sa_width = 8
conv_width = 8
head_hidden = 16

[train]
epochs = 3
up_epochs = 3

[synth]
categories = ["sphere", "box"]
n = 128
train = 2
test_normal = 2
test_anomalous = 2

[eval]
sweep_subsample = [1, 2]
sweep_noise_std = [0.0, 0.005]
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("tiny.toml");
    if !cfg.exists() {
        fs::write(&cfg, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_duscloud"))
        .arg("--out")
        .arg(dir.join("run"))
        .arg("--config")
        .arg(&cfg)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let o = run(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn trained(dir: &Path) {
    for step in ["synth", "train-down", "train-up"] {
        ok(dir, &[step]);
    }
}

#[test]
fn synth_writes_manifest_and_clouds() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["synth"]);
    let corpus = d.path().join("run/corpus");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(corpus.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["samples"].as_array().unwrap().len(), 12);
    assert!(corpus.join("box/train").read_dir().unwrap().count() == 2);
}

#[test]
fn train_up_requires_down_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["synth"]);
    let o = run(d.path(), &["train-up"]);
    assert!(!o.status.success());
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn unknown_override_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    assert!(!run(d.path(), &["--set", "group.gg=3", "show-config"]).status.success());
    assert!(run(d.path(), &["--set", "group.g=32", "show-config"]).status.success());
}

#[test]
fn same_seed_checkpoints_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    trained(a.path());
    trained(b.path());
    for cat in ["sphere", "box"] {
        for f in ["down.ckpt", "up.ckpt", "down_loss.csv", "up_loss.csv"] {
            let rel = format!("run/models/{cat}/{f}");
            assert_eq!(fs::read(a.path().join(&rel)).unwrap(), fs::read(b.path().join(&rel)).unwrap(), "{rel}");
        }
    }
}

#[test]
fn eval_and_sweep_outputs() {
    let d = tempfile::tempdir().unwrap();
    trained(d.path());
    ok(d.path(), &["eval"]);
    let eval = d.path().join("run/eval");
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("metrics.json")).unwrap()).unwrap();
    for key in ["o_auroc", "p_auroc"] {
        let v = m[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key}");
    }
    let scores = fs::read_to_string(eval.join("scores/sphere/sphere_good_000.csv")).unwrap();
    assert!(scores.starts_with("point_index,s,s_tilde,label\n"));
    assert_eq!(scores.lines().count(), 129);

    ok(d.path(), &["eval", "--sweep"]);
    let sweep = fs::read_to_string(eval.join("robustness.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 2 + 2);

    let cloud = d.path().join("run/corpus/sphere/test/sphere_bulge_000.xyz");
    ok(d.path(), &["infer", "--input", cloud.to_str().unwrap(), "--category", "sphere"]);
    let out = fs::read_to_string(d.path().join("run/infer/sphere_bulge_000.csv")).unwrap();
    assert_eq!(out.lines().count(), 129);
}

#[test]
fn unlabeled_test_clouds_omit_point_metrics() {
    let d = tempfile::tempdir().unwrap();
    trained(d.path());
    for cat in ["sphere", "box"] {
        let test = d.path().join(format!("run/corpus/{cat}/test"));
        for e in test.read_dir().unwrap() {
            let p = e.unwrap().path();
            let stripped: String = fs::read_to_string(&p)
                .unwrap()
                .lines()
                .map(|l| l.split_whitespace().take(3).collect::<Vec<_>>().join(" ") + "\n")
                .collect();
            fs::write(&p, stripped).unwrap();
        }
    }
    ok(d.path(), &["eval"]);
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("run/eval/metrics.json")).unwrap()).unwrap();
    assert!(m["o_auroc"].as_f64().is_some());
    assert!(m["p_auroc"].is_null());
    assert!(m["p_aupr"].is_null());
}
