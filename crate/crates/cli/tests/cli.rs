use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::Value;

fn ica_lab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ica-lab"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    std::fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

#[test]
fn gen_writes_dataset_and_passing_audit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "g.json", r#"{"generate": {"mode": "UCSS", "n": 4, "m": 8, "samples": 300}}"#);
    let out = ica_lab(&["gen", "--config", &cfg, "--seed", "7", "--out", "g"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let g = dir.path().join("g");
    for f in ["data.csv", "data.csv.meta.json", "audit.json", "manifest.json"] {
        assert!(g.join(f).exists(), "{f}");
    }
    let audit = read_json(&g.join("audit.json"));
    assert_eq!(audit["sparsity"]["all_hold"], true);
    assert_eq!(audit["generic_rank"], 4);
    assert_eq!(audit["seed"], 7);
    let manifest = read_json(&g.join("manifest.json"));
    assert_eq!(manifest["config_hash"], audit["config_hash"]);
    assert_eq!(std::fs::read_to_string(g.join("data.csv")).unwrap().lines().count(), 301);
}

#[test]
fn base_generation_proceeds_without_sparsity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "b.json", r#"{"generate": {"mode": "Base", "samples": 100}}"#);
    let out = ica_lab(&["gen", "--config", &cfg, "--out", "b"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let audit = read_json(&dir.path().join("b/audit.json"));
    assert_eq!(audit["sparsity"]["all_hold"], false);
    assert_eq!(audit["sparsity_required"], false);
}

#[test]
fn mixed_generation_audits_variability() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "m.json", r#"{"generate": {"mode": "Mixed", "samples": 100}}"#);
    let out = ica_lab(&["gen", "--config", &cfg, "--out", "m"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let audit = read_json(&dir.path().join("m/audit.json"));
    assert_eq!(audit["variability"]["full_rank"], true);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ica_lab(&["gen", "--config", "missing.json"], dir.path()).status.code(), Some(4));
    let bad = write(dir.path(), "bad.json", r#"{"generate": {"n": 0}}"#);
    assert_eq!(ica_lab(&["gen", "--config", &bad, "--out", "x"], dir.path()).status.code(), Some(2));
    let typo = write(dir.path(), "typo.json", r#"{"sed": 1}"#);
    assert_eq!(ica_lab(&["gen", "--config", &typo], dir.path()).status.code(), Some(2));
    let grouped = write(dir.path(), "grp.json", r#"{"generate": {"mode": "Grouped"}}"#);
    assert_eq!(ica_lab(&["gen", "--config", &grouped, "--out", "x"], dir.path()).status.code(), Some(2));
    let diverge = write(
        dir.path(),
        "div.json",
        r#"{"generate": {"samples": 100}, "dataset": "d/data.csv", "train": {"epochs": 3, "learning_rate": 1e30}}"#,
    );
    assert!(ica_lab(&["gen", "--config", &diverge, "--out", "d"], dir.path()).status.success());
    assert_eq!(ica_lab(&["train", "--config", &diverge, "--out", "t"], dir.path()).status.code(), Some(3));
}

#[test]
fn check_support_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = ica_lab(&["check-support", "--matrix", "1,0,0;0,1,0;0,0,1"], dir.path());
    assert!(out.status.success());
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["all_hold"], true);

    let out = ica_lab(&["check-support", "--matrix", "1,1;1,1;1,1"], dir.path());
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["fraction"], 0.0);

    let cfg = write(dir.path(), "s.json", r#"{"support": [[1, 0], [1, 1], [0, 1]]}"#);
    let out = ica_lab(&["check-support", "--config", &cfg, "--out", "s"], dir.path());
    assert!(out.status.success());
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(printed, read_json(&dir.path().join("s/ss_report.json")));
    assert_eq!(printed["all_hold"], true);

    assert_eq!(ica_lab(&["check-support", "--matrix", "1,2"], dir.path()).status.code(), Some(2));
}

#[test]
fn train_then_eval_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "run.json",
        r#"{"seed": 2, "generate": {"n": 2, "m": 4, "samples": 200},
            "dataset": "data/data.csv", "checkpoint": "model/checkpoint.json",
            "train": {"epochs": 3}}"#,
    );
    assert!(ica_lab(&["gen", "--config", &cfg, "--out", "data"], dir.path()).status.success());
    let mut reports = Vec::new();
    for _ in 0..2 {
        let t = ica_lab(&["train", "--config", &cfg, "--out", "model"], dir.path());
        assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
        let e = ica_lab(&["eval", "--config", &cfg, "--out", "eval"], dir.path());
        assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
        reports.push(read_json(&dir.path().join("eval/eval_report.json")));
    }
    assert_eq!(reports[0], reports[1]);
    let mcc = reports[0]["mcc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mcc));
    let history = std::fs::read_to_string(dir.path().join("model/history.csv")).unwrap();
    assert!(history.starts_with("epoch,nll,penalty,loss"));
    assert_eq!(history.lines().count(), 4);
}

#[test]
fn eval_with_mismatched_dataset_is_a_shape_error() {
    let dir = tempfile::tempdir().unwrap();
    let small = write(
        dir.path(),
        "small.json",
        r#"{"generate": {"n": 2, "m": 4, "samples": 100}, "dataset": "a/data.csv", "train": {"epochs": 1}}"#,
    );
    assert!(ica_lab(&["gen", "--config", &small, "--out", "a"], dir.path()).status.success());
    assert!(ica_lab(&["train", "--config", &small, "--out", "ma"], dir.path()).status.success());
    let other = write(
        dir.path(),
        "other.json",
        r#"{"generate": {"n": 3, "m": 4, "samples": 100}, "dataset": "b/data.csv", "checkpoint": "ma/checkpoint.json"}"#,
    );
    assert!(ica_lab(&["gen", "--config", &other, "--out", "b"], dir.path()).status.success());
    let out = ica_lab(&["eval", "--config", &other], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("shape"));
}

#[test]
fn oracle_default_scan_has_no_violations() {
    let dir = tempfile::tempdir().unwrap();
    let out = ica_lab(&["oracle", "--out", "o"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["violations"], 0);
    assert_eq!(summary["scan"].as_array().unwrap().len(), 3);
    let csv = std::fs::read_to_string(dir.path().join("o/lemma_scan.csv")).unwrap();
    assert!(csv.starts_with("n,m,total,rank_deficient,ss_hold,violations\n"));
}

#[test]
fn oracle_quick_scan_and_report_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "o.json",
        r#"{"oracle": {"n": 2, "m_min": 2, "m_max": 4, "supports": [[[1, 1], [1, 1]], [[1, 0], [1, 1], [0, 1]]]}}"#,
    );
    let t = Instant::now();
    let out = ica_lab(&["oracle", "--config", &cfg, "--out", "o"], dir.path());
    assert!(t.elapsed().as_secs_f64() < 5.0);
    assert!(out.status.success());
    let reports = read_json(&dir.path().join("o/lemma_reports.json"));
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    for r in reports {
        for key in ["f", "ss_holds", "admissible", "all_permutation_scalings"] {
            assert!(r.get(key).is_some(), "{key}");
        }
    }
    assert_eq!(reports[0]["all_permutation_scalings"], false);
    assert!(reports[0]["counterexample"].is_object());
    assert_eq!(reports[1]["all_permutation_scalings"], true);
}

#[test]
fn reproduce_fast_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = ica_lab(&["reproduce", "fig3", "--fast", "--out", "r"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fig3 = std::fs::read_to_string(dir.path().join("r/fig3.csv")).unwrap();
    assert_eq!(fig3.lines().count(), 17);
    assert!(fig3.starts_with("m,n,ratio,p,trials,rate,ci_low,ci_high\n"));

    assert!(ica_lab(&["reproduce", "fig4", "--fast", "--out", "r"], dir.path()).status.success());
    let fig4 = std::fs::read_to_string(dir.path().join("r/fig4.csv")).unwrap();
    assert_eq!(fig4.lines().count(), 5);

    let cfg = write(
        dir.path(),
        "abl.json",
        r#"{"reproduce": {"figure": "ablation", "study": {"ns": [2], "samples": 200},
            "budget": {"trials": 10, "seeds": 1, "epochs": 1}}}"#,
    );
    let out = ica_lab(&["reproduce", "--config", &cfg, "--out", "a"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(dir.path().join("a/ablation_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    let manifest = read_json(&dir.path().join("a/manifest.json"));
    assert_eq!(manifest["files"].as_array().unwrap().len(), 2);
}

#[test]
fn seed_override_changes_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    ica_lab(&["check-support", "--matrix", "1", "--seed", "1", "--out", "a"], dir.path());
    ica_lab(&["check-support", "--matrix", "1", "--seed", "2", "--out", "b"], dir.path());
    let a = read_json(&dir.path().join("a/manifest.json"));
    let b = read_json(&dir.path().join("b/manifest.json"));
    assert_ne!(a["config_hash"], b["config_hash"]);
    assert_eq!(a["seed"], 1);
}
