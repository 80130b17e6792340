use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
name = "tiny"
seed = 3
seeds = [0]
fractions = [0.5, 1.0]
verify_cases = 20

[world]
train = 64
val = 24

[grounder]
epochs = 1

[pretrain]
epochs = 1
batch_size = 16

[finetune]
epochs = 1
batch_size = 16
"#;

fn gap(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("tiny.toml");
    if !cfg.exists() {
        std::fs::write(&cfg, TINY).unwrap();
    }
    let runs = dir.join("runs");
    Command::new(env!("CARGO_BIN_EXE_gap"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--runs-dir")
        .arg(&runs)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = gap(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn full_pipeline(dir: &Path) {
    for cmd in ["gen", "train-ground", "export-priors", "pretrain", "finetune", "eval"] {
        ok(dir, &[cmd]);
    }
}

#[test]
fn pipeline_produces_run_layout() {
    let tmp = tempfile::tempdir().unwrap();
    full_pipeline(tmp.path());
    let run = tmp.path().join("runs/tiny");
    for f in [
        "config.toml",
        "data/train.jsonl",
        "data/val.jsonl",
        "checkpoints/grounder.json",
        "checkpoints/pretrained.json",
        "checkpoints/model.json",
        "priors.jsonl",
        "metrics.json",
        "log.jsonl",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["instances"], 24);
    let acc = metrics["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    for key in ["per_type_accuracy", "recall", "grounding_score", "metadata"] {
        assert!(metrics[key].is_object(), "{key}");
    }
    assert_eq!(metrics["metadata"]["seed"], 3);
    assert!(metrics["recall"]["1"].is_number());

    let out = ok(tmp.path(), &["sweep"]);
    assert!(out.starts_with("variant,fraction,accuracy\n"));
    assert_eq!(out.lines().count(), 5);
    ok(tmp.path(), &["plot"]);
    let svg = std::fs::read_to_string(run.join("sweep.svg")).unwrap();
    assert!(svg.contains("<svg"));

    let out = ok(tmp.path(), &["eval", "--no-prior"]);
    assert!(out.starts_with("accuracy"));
}

#[test]
fn outputs_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    full_pipeline(a.path());
    full_pipeline(b.path());
    for f in ["data/train.jsonl", "data/val.jsonl", "priors.jsonl", "checkpoints/model.json", "metrics.json", "log.jsonl"] {
        let x = std::fs::read(a.path().join("runs/tiny").join(f)).unwrap();
        let y = std::fs::read(b.path().join("runs/tiny").join(f)).unwrap();
        assert!(x == y, "{f} differs between identical runs");
    }
}

#[test]
fn missing_upstream_artifacts_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gap(tmp.path(), &["train-ground"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[missing_artifact]"), "{err}");
    assert_eq!(err.lines().count(), 1);

    ok(tmp.path(), &["gen"]);
    let out = gap(tmp.path(), &["pretrain"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("priors.jsonl"));
    let out = gap(tmp.path(), &["eval"]);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[missing_artifact]"));
}

#[test]
fn bad_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    for set in ["finetune.epoch=2", "ablation.uniform_prior=true,", "dim=16"] {
        let out = gap(tmp.path(), &["gen", "--set", set]);
        assert!(!out.status.success(), "{set}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[config]"), "{set}");
    }
    let out = gap(
        tmp.path(),
        &["gen", "--set", "ablation.uniform_prior=true", "--set", "ablation.no_prior=true"],
    );
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[config]"));
}

#[test]
fn verify_reports_pass() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["verify"]);
    assert!(out.starts_with("oracle equivalence PASS, max L∞"), "{out}");
    assert!(out.contains("over 20 cases"));
}

#[test]
fn ablations_run_through_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gen"]);
    let uniform = ["--set", "ablation.uniform_prior=true", "--set", "ablation.no_pretrain_stage=true"];
    for cmd in ["export-priors", "finetune", "eval"] {
        let mut args = vec![cmd];
        args.extend(uniform);
        ok(tmp.path(), &args);
    }
    let out = ok(tmp.path(), &["finetune", "--set", "ablation.no_prior=true"]);
    assert!(out.starts_with("fine-tuned"));
    let out = gap(tmp.path(), &["pretrain", "--set", "ablation.no_prior=true"]);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[config]"));
}
