//! Exit codes and on-disk layout of the `qae` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qae_lab::metrics::read_metrics;
use qae_lab::runner::read_sweep_summary;

const SMALL: &str = r#"{"K": 0.4, "eta": 0.5, "num_steps": 10, "seed": 3,
    "task": {"mode": "flat_bandit", "num_queries": 8, "responses_per_query": 8}}"#;

fn qae(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qae"))
        .args(args)
        .current_dir(dir)
        .env_remove("QAE_SEED")
        .env_remove("QAE_K")
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn only_subdir(dir: &Path) -> PathBuf {
    let entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(entries.len(), 1, "{entries:?}");
    entries.into_iter().next().unwrap()
}

#[test]
fn run_writes_manifest_metrics_and_policy() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "c.json", SMALL);
    let out = qae(&["run", "--config", "c.json", "--out", "out"], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let run = only_subdir(&tmp.path().join("out"));
    let rows = read_metrics(std::fs::File::open(run.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 10);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["K"], 0.4);
    assert!(run.join("policy_final.json").exists());
}

#[test]
fn boundary_k_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "c.json", &SMALL.replace("0.4", "1.0"));
    let out = qae(&["run", "--config", "c.json"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("K must lie strictly inside (0,1)"));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn missing_seed_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "c.json", &SMALL.replace(r#""seed": 3,"#, ""));
    let out = qae(&["run", "--config", "c.json"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("seed"));
}

#[test]
fn unknown_field_and_unreadable_file_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    write(
        tmp.path(),
        "c.json",
        &SMALL.replace(r#""eta""#, r#""etaa""#),
    );
    assert_eq!(
        qae(&["run", "--config", "c.json"], tmp.path())
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        qae(&["run", "--config", "nope.json"], tmp.path())
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn environment_fills_gaps_and_file_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "c.json", &SMALL.replace(r#""seed": 3,"#, ""));
    let run = |extra: &[&str], env: &[(&str, &str)]| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_qae"));
        cmd.args(["run", "--config", "c.json", "--out", "out"])
            .args(extra)
            .current_dir(tmp.path());
        for (k, v) in env {
            cmd.env(k, v);
        }
        cmd.output().unwrap()
    };
    // env supplies the seed; the file's K beats the env's
    assert!(run(&[], &[("QAE_SEED", "11"), ("QAE_K", "0.7")])
        .status
        .success());
    assert!(tmp
        .path()
        .join("out/quantile_std_K0.4_eh0.28_seed11")
        .is_dir());
    // the flag beats the env
    assert!(run(&["--seed", "12"], &[("QAE_SEED", "11")])
        .status
        .success());
    assert!(tmp
        .path()
        .join("out/quantile_std_K0.4_eh0.28_seed12")
        .is_dir());
}

#[test]
fn report_renders_run_and_rejects_empty_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "c.json", SMALL);
    assert!(
        qae(&["run", "--config", "c.json", "--out", "out"], tmp.path())
            .status
            .success()
    );
    let run = only_subdir(&tmp.path().join("out"));
    let out = qae(&["report", run.to_str().unwrap()], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["entropy.svg", "pass_at_1.svg", "zero_adv_fraction.svg"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    std::fs::write(empty.join("metrics.csv"), "").unwrap();
    assert_eq!(qae(&["report", "empty"], tmp.path()).status.code(), Some(2));
    std::fs::write(empty.join("metrics.csv"), "step,entropy\n0,abc\n").unwrap();
    assert_eq!(qae(&["report", "empty"], tmp.path()).status.code(), Some(2));
}

#[test]
fn sweep_writes_one_dir_per_cell_and_overlays() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "c.json", &SMALL.replace("10", "4"));
    let out = qae(
        &[
            "sweep",
            "--config",
            "c.json",
            "--out",
            "sw",
            "--axis",
            "K",
            "--values",
            "0.2,0.4,0.8",
            "--seeds",
            "1,2",
            "--jobs",
            "2",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let sw = tmp.path().join("sw");
    let rows = read_sweep_summary(&sw.join("sweep_summary.csv")).unwrap();
    let cells: Vec<(f64, u64)> = rows.iter().map(|r| (r.value, r.seed)).collect();
    assert_eq!(
        cells,
        [(0.2, 1), (0.2, 2), (0.4, 1), (0.4, 2), (0.8, 1), (0.8, 2)]
    );
    for r in &rows {
        assert!(r.is_ok() && sw.join(&r.run_dir).join("metrics.csv").exists());
    }
    let out = qae(&["report", "sw"], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let overlay = std::fs::read_to_string(sw.join("entropy_overlay.svg")).unwrap();
    // one legend entry per axis value
    for v in ["0.2", "0.4", "0.8"] {
        assert_eq!(overlay.matches(&format!("\nK={v}\n")).count(), 1, "{v}");
    }
}

#[test]
fn sweep_rejects_unknown_axis() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "c.json", SMALL);
    let out = qae(
        &[
            "sweep", "--config", "c.json", "--axis", "eta", "--values", "0.1", "--seeds", "1",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_reports_and_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = qae(
        &[
            "verify", "--suite", "prop2", "--trials", "50", "--seed", "4",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("prop2") && text.contains("50/50") && text.contains("min_margin"));
    let out = qae(&["verify", "--suite", "all", "--trials", "10"], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 4);
    assert_eq!(
        qae(&["verify", "--trials", "0"], tmp.path()).status.code(),
        Some(2)
    );
}
