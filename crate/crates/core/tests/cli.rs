use std::path::Path;
use std::process::{Command, Output};

use kinlearn::cli::{ExperimentConfig, CONFIG_KEYS};
use kinlearn::extract::implant_truth;
use kinlearn::symnet::{load_checkpoint, save_checkpoint, AnsatzConfig, EpsMode, ModelParams, PhysicsParams};

fn kinlearn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kinlearn")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn generate_small(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec!["generate", "--out", out, "--eps", "0.0625", "--nx", "20", "--nt", "8", "--set", "nv=8"];
    args.extend_from_slice(extra);
    kinlearn(&args)
}

#[test]
fn config_defaults_parse_and_unknown_keys_fail() {
    let cfg = ExperimentConfig::default();
    let again = ExperimentConfig::parse(&cfg.to_text()).unwrap();
    assert_eq!(again, cfg);
    assert!(cfg.ansatz().is_ok() && cfg.loss().is_ok() && cfg.train().is_ok() && cfg.scheme().is_ok());
    assert!(ExperimentConfig::parse("bogus = 1").is_err());
    assert!(ExperimentConfig::parse("eps 0.1").is_err());
    let c = ExperimentConfig::parse("# comment\nsigma_s = poly:4,0,100\n").unwrap();
    let grid = c.grid().unwrap();
    let spec = c.physics_spec(&grid).unwrap();
    let x = grid.x_centers[7];
    assert!((spec.sigma_s.data[7] - (4.0 + 100.0 * x * x)).abs() < 1e-12);
    assert!(ExperimentConfig::parse("sigma_s = cubic:1").unwrap().physics_spec(&grid).is_err());
}

#[test]
fn help_lists_every_config_key() {
    let o = kinlearn(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for (k, d, _) in CONFIG_KEYS {
        assert!(text.contains(k) && text.contains(d), "missing {k}");
    }
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&kinlearn(&[])), 2);
    assert_eq!(code(&kinlearn(&["train"])), 2);
    assert_eq!(code(&kinlearn(&["generate", "--nx", "many"])), 2);
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "learning_rate = 1\n").unwrap();
    assert_eq!(code(&kinlearn(&["generate", "--config", cfg.to_str().unwrap()])), 2);
    let missing = dir.path().join("none.cfg");
    assert_eq!(code(&kinlearn(&["generate", "--config", missing.to_str().unwrap()])), 2);
}

#[test]
fn generate_writes_dataset_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let o = generate_small(dir.path(), &["--sigma-s", "poly:4,0,100"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ds = kinlearn::solver::load_dataset(&dir.path().join("dataset.kds")).unwrap();
    assert_eq!((ds.nt(), ds.grid.nx, ds.grid.nv), (8, 20, 8));
    let meta = std::fs::read_to_string(dir.path().join("dataset.meta")).unwrap();
    assert!(meta.contains("sigma_s = poly:4,0,100") && meta.contains("eps = 0.0625"));
    assert_eq!(ExperimentConfig::parse(&meta).unwrap().get("nx"), "20");
}

#[test]
fn zero_epoch_training_writes_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&generate_small(dir.path(), &[])), 0);
    let data = dir.path().join("dataset.kds");
    let out = dir.path().join("run");
    let o = kinlearn(&[
        "train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--scheme", "bdf2", "--multiscale", "2", "--epochs", "0", "--seed", "9",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (cfg, params) = load_checkpoint(&out.join("checkpoint.txt")).unwrap();
    assert_eq!(cfg.scales, 2);
    assert_eq!(params, ModelParams::init(&cfg, EpsMode::Global, PhysicsParams::default(), 9));
    assert_eq!(std::fs::read_to_string(out.join("history.csv")).unwrap(), "iter,loss,eps_pred,grad_norm,seconds\n");
}

#[test]
fn training_flags_and_interval_sweep() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&generate_small(dir.path(), &[])), 0);
    let data = dir.path().join("dataset.kds");
    let out = dir.path().join("fe");
    let o = kinlearn(&[
        "train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--scheme", "fe", "--multiscale", "0", "--epochs", "3", "--interval-sweep",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let meta = std::fs::read_to_string(out.join("train.meta")).unwrap();
    assert!(meta.contains("eps_mode = interval:0,1,2") && meta.contains("scheme = fe") && meta.contains("scales = 0"));
    assert_eq!(std::fs::read_to_string(out.join("history.csv")).unwrap().lines().count(), 4);
    let bad = kinlearn(&["train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--scheme", "rk9"]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn divergence_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&generate_small(dir.path(), &[])), 0);
    let data = dir.path().join("dataset.kds");
    // ε_pred underflows on the first step.
    let o = kinlearn(&[
        "train", "--data", data.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--epochs", "2", "--scheme", "imex1", "--set", "eps_mode=interval:9",
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("checkpoint.txt").exists());
}

#[test]
fn extract_of_implanted_truth_has_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&generate_small(dir.path(), &[])), 0);
    let cfg = AnsatzConfig { scales: 2, ..Default::default() };
    let p = implant_truth(&cfg, 0.0625, EpsMode::Global, PhysicsParams::default(), 0.0).unwrap();
    let ck = dir.path().join("truth.txt");
    save_checkpoint(&cfg, &p, &ck).unwrap();
    let data = dir.path().join("dataset.kds");
    let o = kinlearn(&["extract", "--checkpoint", ck.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let pde = std::fs::read_to_string(dir.path().join("pde.txt")).unwrap();
    assert!(pde.starts_with("∂t g ="));
    let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let last = report.lines().last().unwrap();
    for v in last.split(',') {
        assert!(v.parse::<f64>().unwrap() < 1e-6, "{report}");
    }
    let missing = dir.path().join("nope.txt");
    let o = kinlearn(&["extract", "--checkpoint", missing.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn compare_methods() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&generate_small(dir.path(), &["--set", "init=zero_g", "--set", "dt=5e-5"])), 0);
    let data = dir.path().join("dataset.kds");
    let out = dir.path().to_str().unwrap();
    for m in ["lasso", "stridge"] {
        let o = kinlearn(&["compare", "--data", data.to_str().unwrap(), "--method", m, "--out", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).starts_with("∂t g ="));
        assert!(dir.path().join(format!("baseline_{m}.csv")).exists());
    }
    let o = kinlearn(&["compare", "--data", data.to_str().unwrap(), "--method", "ridge", "--out", out]);
    assert_eq!(code(&o), 2);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&generate_small(dir.path(), &[])), 0);
    let data = dir.path().join("dataset.kds");
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = kinlearn(&["train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--epochs", "5", "--set", "minibatch=3"]);
        assert_eq!(code(&o), 0);
        let ck = out.join("checkpoint.txt");
        let o = kinlearn(&["extract", "--checkpoint", ck.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
        files.push(["history.csv", "checkpoint.txt", "report.csv", "pde.txt"].map(|f| std::fs::read(out.join(f)).unwrap()));
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn unwritable_output_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let o = generate_small(&blocker.join("sub"), &[]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}
