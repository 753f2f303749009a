use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dnqs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dnqs"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn only_run_dir(out: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

#[test]
fn missing_config_exits_2_naming_the_path() {
    let o = dnqs(&["train", "--config", "/no/such/config.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/config.toml"));
}

#[test]
fn dry_run_prints_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "benchmark = \"cluster\"\n").unwrap();
    let o = dnqs(&["train", "--config", cfg.to_str().unwrap(), "--dry-run", "--seed", "9"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for key in ["hidden = 256", "learning_rate = 0.001", "seed = 9", "n_sites = 64", "complex = true"] {
        assert!(text.contains(key), "{key} missing from\n{text}");
    }
}

#[test]
fn config_errors_report_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "n_sites = 8\nhidden = -3\n").unwrap();
    let o = dnqs(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn exact_examples() {
    let o = dnqs(&["exact", "--benchmark", "cluster", "--sites", "8"]);
    assert_eq!(o.status.code(), Some(0));
    let e: f64 = stdout(&o).trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!((e + 8.0).abs() < 1e-9);

    let o = dnqs(&["exact", "--benchmark", "tfim", "--sites", "3", "--field", "0"]);
    let e: f64 = stdout(&o).trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!((e + 3.0).abs() < 1e-12);

    let o = dnqs(&["exact", "--benchmark", "tfim", "--sites", "20"]);
    assert_eq!(o.status.code(), Some(4));
}

fn train_once(threads: &str, cfg: &Path, out: &Path) -> PathBuf {
    let o = dnqs(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--threads",
        threads,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("final energy"));
    only_run_dir(out)
}

#[test]
fn train_is_deterministic_and_measurable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(
        &cfg,
        "benchmark = \"tfim\"\nn_sites = 8\nfield = 1.0\nhidden = 8\nn_samples = 64\nn_samples_eval = 4000\n\
         learning_rate = 0.01\nn_iterations = 200\ncheckpoint_every = 100\nseed = 5\n",
    )
    .unwrap();
    let a = train_once("1", &cfg, &dir.path().join("a"));
    let b = train_once("2", &cfg, &dir.path().join("b"));
    assert!(a.file_name().unwrap().to_str().unwrap().starts_with("tfim-5-"));
    for f in ["metrics.csv", "final.bin", "summary.json", "checkpoints/checkpoint-00000100.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 201);
    assert!(metrics.starts_with("iter,energy_mean,energy_stderr,grad_norm,seconds\n"));

    let out = dir.path().join("m");
    let o = dnqs(&[
        "measure",
        "--checkpoint",
        a.join("final.bin").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "11",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = only_run_dir(&out);
    let csv = fs::read_to_string(m.join("correlations.csv")).unwrap();
    assert!(csv.starts_with("r,chord_length,C,stderr\n"));
    let fit: serde_json::Value = serde_json::from_str(&fs::read_to_string(m.join("fit.json")).unwrap()).unwrap();
    for key in ["eta", "eta_stderr", "R2", "window", "excluded_points"] {
        assert!(fit.get(key).is_some(), "{key}");
    }
    assert_eq!(fit["seed"], 11);
}

#[test]
fn checkpoint_version_mismatch_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "n_sites = 4\nhidden = 2\nn_iterations = 1\nn_samples_eval = 10\n").unwrap();
    let run = train_once("1", &cfg, &dir.path().join("a"));
    let mut bytes = fs::read(run.join("final.bin")).unwrap();
    bytes[4] = 7;
    let bad = dir.path().join("bad.bin");
    fs::write(&bad, bytes).unwrap();
    let o = dnqs(&["measure", "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let o = dnqs(&["measure", "--checkpoint", "/no/such.bin"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn theory_default_spec_emits_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = dnqs(&["theory", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let run = only_run_dir(dir.path());
    for f in ["kernel.csv", "capp.csv", "exact.csv", "report.json", "oracles.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(fs::read_to_string(run.join("kernel.csv")).unwrap().starts_with("index,value\n"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["classifier"]["kind"], "POWER_LAW");
    for key in ["z_star", "q", "rho", "alpha", "unit_disk_safe", "fit_r2_exp", "fit_r2_pow", "seed"] {
        assert!(report.get(key).is_some(), "{key}");
    }
    let oracles: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("oracles.json")).unwrap()).unwrap();
    assert_eq!(oracles["digit_sum_vs_bfs_mismatches"], 0);
}

#[test]
fn theory_rejects_unstable_modes_and_handles_zero_modes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("s.toml");
    fs::write(&spec, "mode = \"vanilla\"\nlambdas = [1.5]\ncouplings = [0.1]\nbias = 0.0\n").unwrap();
    let o = dnqs(&["theory", "--config", spec.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stable"));

    fs::write(&spec, "mode = \"vanilla\"\nlambdas = []\ncouplings = []\nbias = 0.0\nexact_sites = 6\n").unwrap();
    let out = dir.path().join("zero");
    let o = dnqs(&["theory", "--config", spec.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(only_run_dir(&out).join("report.json")).unwrap()).unwrap();
    assert!(report["z_star"].is_null());
    assert_eq!(report["classifier"]["kind"], "UNDETERMINED");
}
