use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn ghvae(out: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ghvae"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("run ghvae")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn phase_two_needs_phase_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = ghvae(dir.path(), &smoke(), &["train", "--phase", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("phase 1 checkpoint not found"), "{}", stderr(&o));
}

#[test]
fn unknown_config_keys_are_validation_failures() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(smoke()).unwrap()).unwrap();
    v["learning_rate"] = serde_json::json!(0.1);
    let path = dir.path().join("bad.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let o = ghvae(dir.path(), &path, &["gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn bad_flags_and_missing_inputs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ghvae(dir.path(), &smoke(), &["train"]).status.code(), Some(1));
    assert_eq!(ghvae(dir.path(), &smoke(), &["train", "--phase", "9"]).status.code(), Some(1));
    let o = ghvae(dir.path(), &smoke(), &["train", "--phase", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("run gen-data first"), "{}", stderr(&o));
    let o = ghvae(dir.path(), &smoke(), &["eval"]);
    assert_eq!(o.status.code(), Some(1));
    let o = ghvae(dir.path(), Path::new("/nonexistent/config.json"), &["gen-data"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn phases_run_one_at_a_time_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert!(ghvae(out, &smoke(), &["gen-data"]).status.success());
    for k in ["1", "2"] {
        let o = ghvae(out, &smoke(), &["train", "--phase", k]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let log = std::fs::read_to_string(out.join("logs/train_phase2.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,recon,kl,elbo"));
    assert_eq!(lines.count(), 4);

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("reports/train_phase2.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["steps_per_phase"], 4);
    assert_eq!(report["result"]["modules"][0]["frozen"], true);
    assert_eq!(report["result"]["frozen_unchanged"], true);
    assert!(out.join("reports/train_phase2.meta.json").is_file());

    // Evaluating the two-level checkpoint explicitly, before phase 3 exists.
    let ck = out.join("checkpoints/phase2");
    let o = ghvae(out, &smoke(), &["eval", "--checkpoint", ck.to_str().unwrap(), "--prior", "uniform"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("mean ± standard error"), "{table}");
    assert!(out.join("reports/eval_uniform_prior.json").is_file());
}

#[test]
fn memory_report_reads_ladders_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let ladder = dir.path().join("ladder.json");
    std::fs::write(
        &ladder,
        r#"{"image": {"height": 64, "width": 64, "channels": 3},
            "levels": [{"hidden": 4, "latent": 1}, {"hidden": 8, "latent": 2}]}"#,
    )
    .unwrap();
    let o = ghvae(dir.path(), &smoke(), &["memory-report", "--input", ladder.to_str().unwrap(), "--curve"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("reports/memory.json")).unwrap()).unwrap();
    assert_eq!(v["result"]["greedy"].as_array().unwrap().len(), 2);
    assert_eq!(v["result"]["curve"].as_array().unwrap().len(), 6);
    assert_eq!(v["result"]["curve"][0]["savings"], 0.0);

    let junk = dir.path().join("junk.json");
    std::fs::write(&junk, "{\"nothing\": 1}").unwrap();
    let o = ghvae(dir.path(), &smoke(), &["memory-report", "--input", junk.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn oracle_planning_writes_report_and_media() {
    let dir = tempfile::tempdir().unwrap();
    let o = ghvae(dir.path(), &smoke(), &["plan", "--dynamics", "oracle", "--trials", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("reports/plan.json")).unwrap()).unwrap();
    assert_eq!(v["result"]["trials"].as_array().unwrap().len(), 2);
    assert!(dir.path().join("media/plan_trial1.png").is_file());
}

#[test]
fn thread_count_must_be_positive() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ghvae"))
        .env("GHVAE_THREADS", "zero")
        .args(["--out", dir.path().to_str().unwrap(), "memory-report"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("GHVAE_THREADS"));
}
