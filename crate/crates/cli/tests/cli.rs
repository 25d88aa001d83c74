use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use deepo_cli::experiments::summarize;
use tempfile::TempDir;

fn deepo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.toml");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

/// Every deterministic output file of a run, by name.
fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "metadata.json")
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn list_names_every_subcommand() {
    let out = deepo(&["list"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in [
        "offline",
        "adaptive",
        "compare-indirect",
        "finite-cost",
        "timing",
        "zo-complexity",
    ] {
        assert!(text.lines().any(|l| l.starts_with(sub)), "{sub} missing");
    }
}

#[test]
fn unknown_config_key_exits_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "etaa = 0.1\n");
    let out_dir = tmp.path().join("run");
    let out = deepo(&[
        "offline",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
}

#[test]
fn invalid_values_exit_2() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("run");
    let o = out_dir.to_str().unwrap();
    let cfg = write_config(tmp.path(), "t0 = 2\n");
    assert_eq!(
        deepo(&["compare-indirect", "--config", &cfg, "--out", o])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        deepo(&["adaptive", "--seed", "3..3", "--out", o])
            .status
            .code(),
        Some(2)
    );
    let cfg = write_config(tmp.path(), "experiment = \"timing\"\n");
    assert_eq!(
        deepo(&["offline", "--config", &cfg, "--out", o])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn numerical_failure_exits_3_with_diagnostics() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "targets = [0.01]\n[zo]\neta = 5.0\nmax-iters = 20\n",
    );
    let out_dir = tmp.path().join("run");
    let out = deepo(&[
        "zo-complexity",
        "--seed",
        "0",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let diag: serde_json::Value =
        serde_json::from_slice(&fs::read(out_dir.join("diagnostics.json")).unwrap()).unwrap();
    assert_eq!(diag["seed"], 0);
    assert!(diag["error"].as_str().unwrap().contains("destabilizing"));
}

#[test]
fn offline_run_passes_and_writes_artifacts() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("run");
    let out = deepo(&["offline", "--out", out_dir.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    for f in [
        "seed0_trace.csv",
        "summary.csv",
        "summary.json",
        "metadata.json",
    ] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 2);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "horizon = 60\nsigmas = [0.1, 0.01]\n");
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        let out = deepo(&[
            "adaptive",
            "--seed",
            "0,1,2",
            "--config",
            &cfg,
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert!(out.status.code().is_some_and(|c| c <= 1));
        outputs(&dir)
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a.len(), 2 * 3 + 2);
    assert_eq!(a, b);
}

#[test]
fn noise_free_sweep_checks_slope() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "horizon = 400\nsigmas = [0.0]\ninitial-gain = \"zero\"\n",
    );
    let dir = tmp.path().join("run");
    let out = deepo(&[
        "adaptive",
        "--seed",
        "0..3",
        "--config",
        &cfg,
        "--out",
        dir.to_str().unwrap(),
    ]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("PASS noise-free regret slope"), "{stdout}");
}

#[test]
fn summarize_reads_traces_back() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "horizon = 50\nsigmas = [0.01]\n");
    let dir = tmp.path().join("run");
    deepo(&[
        "adaptive",
        "--seed",
        "4",
        "--config",
        &cfg,
        "--out",
        dir.to_str().unwrap(),
    ]);
    let one = dir.join("sigma0.01_seed4.csv");
    let (single, _) = summarize(std::slice::from_ref(&one)).unwrap();
    let (twice, _) = summarize(&[one.clone(), one.clone()]).unwrap();
    assert_eq!(single.mean, single.median);
    assert!(twice.iqr.iter().all(|&v| v == 0.0));

    let broken = tmp.path().join("broken.csv");
    let text = fs::read_to_string(&one)
        .unwrap()
        .replacen("regret_avg", "regret", 1);
    fs::write(&broken, text).unwrap();
    assert!(summarize(&[one, broken]).is_err());
}

#[test]
fn shipped_configs_resolve() {
    use deepo_cli::config::{FileConfig, Settings};
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let file = FileConfig::load(&path).unwrap();
        let experiment = file
            .experiment
            .expect("shipped configs name their experiment");
        Settings::resolve(experiment, file, None, None)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert!(seen >= 5);
}
