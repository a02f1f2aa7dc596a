use std::path::Path;
use std::process::{Command, Output};

use wni_trajgen::harness::RunConfig;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wni-trajgen"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn smoke_config(dir: &Path) -> String {
    let path = dir.join("smoke.json");
    std::fs::write(&path, serde_json::to_string_pretty(&RunConfig::smoke()).unwrap()).unwrap();
    path.display().to_string()
}

#[test]
fn pipeline_verb_writes_metrics_for_one_cell() {
    let dir = tempfile::tempdir().unwrap();
    let config = smoke_config(dir.path());
    let out = dir.path().join("out");
    let o = run(&[
        "pipeline",
        "--config",
        &config,
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
        "--intent",
        "3",
        "--power",
        "12",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("evaluate/metrics.csv")).unwrap();
    assert!(csv.starts_with("# config_hash="));
    assert!(csv.contains(" seed=5\n"));
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 4 * RunConfig::smoke().eval.steps);
    assert!(rows
        .iter()
        .all(|r| r.split(',').nth(1) == Some("3") && r.split(',').nth(2) == Some("12.0")));
}

#[test]
fn single_verbs_chain_through_the_artifact_directory() {
    let dir = tempfile::tempdir().unwrap();
    let config = smoke_config(dir.path());
    let out = dir.path().join("out");
    let base = [
        "--config",
        config.as_str(),
        "--out",
        out.to_str().unwrap(),
        "--intent",
        "1",
        "--power",
        "6",
    ];
    for verb in [
        "expert-collect",
        "train-gdm",
        "generate",
        "train-offline",
        "train-baseline",
        "evaluate",
    ] {
        let mut args = vec![verb];
        args.extend_from_slice(&base);
        let o = run(&args);
        assert!(o.status.success(), "{verb}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(out.join("evaluate/summary.json").exists());
}

#[test]
fn missing_upstream_artifact_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let config = smoke_config(dir.path());
    let out = dir.path().join("out");
    let o = run(&["generate", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("models.json"));
}

#[test]
fn bad_configuration_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"gdm": {"hiden": 3}}"#).unwrap();
    let out = dir.path().join("out");
    let o = run(&[
        "pipeline",
        "--config",
        path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["pipeline", "--stages", "expert,nope", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["evaluate", "--intent", "9", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
