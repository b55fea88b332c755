//! End-to-end behaviour of the `eitmon` binary on a very small configuration.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
    "splits": {"train": 3, "val": 2, "test": 2},
    "moCases": 1,
    "train": {"maxEpochs": 2},
    "growthSuite": [{"d1Mm": 20, "d2Mm": 25}, {"d1Mm": 20, "d2Mm": 20}]
}"#;

fn eitmon(args: &[&str], envs: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_eitmon"));
    cmd.args(args).env_remove("EITMON_OUT");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn malformed_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"splits": {"train": 1, "val": 1, "test": 1}, "nonsense": 3}"#);
    let out = dir.path().join("out");
    let o = eitmon(&["gen-mesh", "--config", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.starts_with("error: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn invalid_values_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"moCases": 5, "splits": {"train": 1, "val": 1, "test": 2}}"#);
    let o = eitmon(&["gen-mesh", "--config", &cfg, "--out", dir.path().to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_inputs_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = eitmon(&["train", "--out", dir.path().to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(dir.path().join("run_log.jsonl")).unwrap();
    let line: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(line["status"], "error");
    assert_eq!(line["subcommand"], "train");
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from-env");
    let o = eitmon(&["gen-mesh"], &[("EITMON_OUT", &target)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(target.join("meshes/2d-dense.json").exists());
    assert!(target.join("meshes/3d-coarse.json").exists());
}

#[test]
fn tiny_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let o = eitmon(&["run-all", "--config", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let log = std::fs::read_to_string(out.join("run_log.jsonl")).unwrap();
    let line: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(line["status"], "ok");
    let hash = line["configHash"].as_str().unwrap().to_owned();

    // every JSON artifact carries the configuration hash
    for rel in ["meshes/2d-dense.json", "model/model.json", "suite3d/3d-20-25/ld.json", "post/3d-20-25.json"] {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join(rel)).unwrap()).unwrap();
        assert_eq!(v["configHash"], hash.as_str(), "{rel}");
    }

    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("caseId,method,mse,psnr,comError,volumeError"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(rows.iter().all(|r| r.len() == 6));
    assert!(rows.iter().any(|r| r[1] == "mo"));
    assert!(rows.iter().any(|r| r[0] == "3d-20-25" && r[1] == "gunet"));
    // no change at all: localization is undefined
    let still = rows.iter().find(|r| r[0] == "3d-20-20" && r[1] == "ld").unwrap();
    assert_eq!(still[4], "n/a");
    assert_eq!(csv, std::fs::read_to_string(out.join("report/metrics.csv")).unwrap());

    let ppm = std::fs::read(out.join("report/3d-20-25_truth.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n"));

    // single-file mode reproduces the batch result
    let single = dir.path().join("single.json");
    let o = eitmon(
        &[
            "postprocess",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
            "--input",
            out.join("suite3d/3d-20-25/ld.json").to_str().unwrap(),
            "--mesh",
            out.join("meshes/3d-coarse.json").to_str().unwrap(),
            "--output",
            single.to_str().unwrap(),
        ],
        &[],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&single).unwrap()).unwrap();
    let b: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("post/3d-20-25.json")).unwrap()).unwrap();
    assert_eq!(a["delta"], b["delta"]);
}

#[test]
fn seed_flag_changes_the_hash() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str, sub: &str| {
        let out = dir.path().join(sub);
        let o = eitmon(&["gen-mesh", "--seed", seed, "--out", out.to_str().unwrap()], &[]);
        assert!(o.status.success());
        let log = std::fs::read_to_string(out.join("run_log.jsonl")).unwrap();
        let v: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        v["configHash"].as_str().unwrap().to_owned()
    };
    assert_ne!(run("1", "a"), run("2", "b"));
    assert_eq!(run("1", "a"), run("1", "c"));
}
