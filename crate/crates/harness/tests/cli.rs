use std::path::Path;
use std::process::{Command, Output};

use noisecurve_core::data::Dataset;

const TINY: &str = "seed = 4\ndata.generator = textures\ndata.classes = 3\ndata.per_class = 20\n\
                    data.height = 8\ndata.width = 8\ntrain.method = ours\ntrain.noise = gaussian:0.2\n\
                    train.epochs = 3\neval.repeats = 2\nperturb.0 = gaussian:0.3\n\
                    curvature.draws = 20\ncurvature.k = 5\ncurvature.noise_repeats = 3\ncurvature.max_samples = 6\n";

fn noisecurve(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noisecurve"))
        .args(args)
        .current_dir(dir)
        .env_remove("NOISECURVE_SEED")
        .output()
        .unwrap()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.cfg"), config).unwrap();
    dir
}

#[test]
fn full_run_writes_every_artifact() {
    let dir = setup(TINY);
    for cmd in ["train", "eval", "curvature"] {
        let out = noisecurve(&[cmd, "--config", "exp.cfg", "--run-dir", "run"], dir.path());
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = noisecurve(&["transform", "--config", "exp.cfg", "--run-dir", "run", "--nu", "5"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    for f in ["checkpoint.json", "metrics.csv", "curvature.csv", "report.json", "config.txt", "checkpoint_nu5.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    for section in ["train", "eval", "curvature", "transform"] {
        assert!(report.get(section).is_some(), "{section}");
    }
    assert_eq!(report["transform"]["agreement"], 1.0);
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 1 + 2);
    assert!(metrics.starts_with("run_id,method,seed,perturbation,repeat,accuracy,"));
}

#[test]
fn environment_seed_overrides_the_config() {
    let dir = setup(TINY);
    let out = Command::new(env!("CARGO_BIN_EXE_noisecurve"))
        .args(["train", "--config", "exp.cfg", "--run-dir", "run"])
        .current_dir(dir.path())
        .env("NOISECURVE_SEED", "99")
        .output()
        .unwrap();
    assert!(out.status.success());
    let saved = std::fs::read_to_string(dir.path().join("run/config.txt")).unwrap();
    assert!(saved.lines().any(|l| l == "seed = 99"), "{saved}");
}

#[test]
fn config_errors_exit_with_two_and_name_the_line() {
    let dir = setup("seed = 1\ntrain.metod = ours\n");
    let out = noisecurve(&["train", "--config", "exp.cfg", "--run-dir", "run"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2") && err.contains("train.metod"), "{err}");
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = setup(TINY);
    assert_eq!(noisecurve(&["train"], dir.path()).status.code(), Some(2));
    assert_eq!(noisecurve(&["verify", "--suite", "everything"], dir.path()).status.code(), Some(2));
    let out = noisecurve(&["transform", "--config", "exp.cfg", "--run-dir", "missing", "--nu", "2"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_reports_each_check() {
    let dir = setup(TINY);
    let out = noisecurve(&["verify", "--suite", "jsd", "--json", "v.json"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("PASS ")));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("v.json")).unwrap()).unwrap();
    assert_eq!(v[0]["suite"], "jsd");
    assert!(v[0]["checks"].as_array().unwrap().iter().all(|c| c["bound"].is_number()));
}

#[test]
fn gen_data_writes_a_loadable_file() {
    let dir = setup(TINY);
    let out = noisecurve(&["gen-data", "--config", "exp.cfg", "--out", "d.bin"], dir.path());
    assert!(out.status.success());
    let d = Dataset::load(dir.path().join("d.bin")).unwrap();
    assert_eq!(d.len(), 60);
    assert_eq!(d.class_count(), 3);
}
