use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
task = "fact-check"
folds = 2
memory_size = [300]

[scale]
raw_size = 3000
test_size = 200
d_tr_size = 100
d_model = 32
d_ffn = 64
epochs = 15
accuracy_floor = 0.5
random_queries = 50
kl_pool = 100
"#;

fn smelab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smelab"))
        .args(args)
        .arg("--config")
        .arg(dir.join("run.toml"))
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup_dir(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

fn pipeline(dir: &Path, edit_args: &[&str]) {
    ok(smelab(dir, &["gen"]));
    ok(smelab(dir, &["train"]));
    let mut args = vec!["edit"];
    args.extend_from_slice(edit_args);
    ok(smelab(dir, &args));
    ok(smelab(dir, &["report"]));
}

fn read(dir: &Path, rel: &str) -> String {
    fs::read_to_string(dir.join("out").join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn full_pipeline_reports_all_metrics_and_is_reproducible() {
    let a = setup_dir(SMALL);
    let b = setup_dir(SMALL);
    pipeline(a.path(), &[]);
    pipeline(b.path(), &[]);

    let summary = read(a.path(), "report/summary-t-patcher-m300.csv");
    let header: Vec<&str> = summary.lines().next().unwrap().split(',').collect();
    for m in ["sr", "gr", "er", "train_r", "test_r"] {
        assert!(header.contains(&m), "{m} missing from {header:?}");
    }
    assert!(summary.lines().any(|l| l.starts_with("t-patcher,mean,")));
    assert!(summary.lines().any(|l| l.starts_with("t-patcher,std,")));
    assert_eq!(summary.lines().count(), 1 + 2 + 2);

    let manifest: serde_json::Value = serde_json::from_str(&read(a.path(), "runs/t-patcher-m300/manifest.json")).unwrap();
    assert_eq!(manifest["folds_completed"], 2);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    let model: serde_json::Value = serde_json::from_str(&read(a.path(), "model/manifest.json")).unwrap();
    assert!(model["train_accuracy"].as_f64().unwrap() > 0.5);

    for rel in [
        "report/summary-t-patcher-m300.csv",
        "report/steps-t-patcher-m300.csv",
        "report/activation-t-patcher-m300-fold0.csv",
        "runs/t-patcher-m300/fold-1/steps.csv",
    ] {
        assert_eq!(read(a.path(), rel), read(b.path(), rel), "{rel}");
    }
    // Fold-private staging directories never survive.
    let runs = fs::read_dir(a.path().join("out/runs/t-patcher-m300")).unwrap();
    assert!(runs.map(|e| e.unwrap().file_name()).all(|n| !n.to_string_lossy().contains("tmp")));
}

#[test]
fn ablation_flag_selects_the_variant_and_sweeps_memory() {
    let d = setup_dir(SMALL);
    pipeline(
        d.path(),
        &["--editor", "t-patcher", "--ablation", "no-lm", "--folds", "1", "--memory-size", "100,200"],
    );
    for cap in [100, 200] {
        let m: serde_json::Value =
            serde_json::from_str(&read(d.path(), &format!("runs/t-patcher-no-lm-m{cap}/manifest.json"))).unwrap();
        assert_eq!((&m["editor"]["kind"], &m["editor"]["variant"]), (&"patcher".into(), &"no_lm".into()));
        assert_eq!(m["config"]["folds"], 1);
    }
    let sweep = read(d.path(), "report/memory_sweep-t-patcher-no-lm.csv");
    let caps: Vec<&str> = sweep.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(caps, ["100", "200"]);
}

#[test]
fn missing_inputs_have_their_own_exit_code() {
    let d = setup_dir(SMALL);
    assert_eq!(smelab(d.path(), &["train"]).status.code(), Some(3));
    assert_eq!(smelab(d.path(), &["edit"]).status.code(), Some(3));
    assert_eq!(smelab(d.path(), &["report"]).status.code(), Some(3));
}

#[test]
fn changed_config_between_stages_is_a_hash_mismatch() {
    let d = setup_dir(SMALL);
    ok(smelab(d.path(), &["gen"]));
    let out = smelab(d.path(), &["train", "--seed", "9"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn foreign_checkpoint_version_is_rejected() {
    let d = setup_dir(SMALL);
    ok(smelab(d.path(), &["gen"]));
    ok(smelab(d.path(), &["train"]));
    let ck = d.path().join("out/model/f0.ckpt");
    let mut bytes = fs::read(&ck).unwrap();
    bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
    fs::write(&ck, bytes).unwrap();
    assert_eq!(smelab(d.path(), &["edit"]).status.code(), Some(5));
}

#[test]
fn invalid_editor_combinations_fail_cleanly() {
    let d = setup_dir(SMALL);
    ok(smelab(d.path(), &["gen"]));
    ok(smelab(d.path(), &["train"]));
    let out = smelab(d.path(), &["edit", "--editor", "ft-last", "--ablation", "no-lm"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ablation"));
    let out = smelab(d.path(), &["edit", "--patched-layer", "7"]);
    assert_eq!(out.status.code(), Some(1));
}
