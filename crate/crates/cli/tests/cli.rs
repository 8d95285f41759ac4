use std::path::Path;
use std::process::{Command, Output};

use unitfield::io::{read_dataset, read_fit, read_json, read_matrix_csv, ModelSpec};
use unitfield::optimizer::{pgd_fit, FitConfig};

fn unitfield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unitfield")).args(args).env_remove("UNITFIELD_SEED").output().unwrap()
}

fn ok(args: &[&str]) {
    let out = unitfield(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, p: usize, p_v: usize, n: usize, kappa: f64) -> Output {
    let cfg = format!(
        r#"{{"p": {p}, "p_v": {p_v}, "n": {n}, "bounds": {{"alpha": 6.0, "beta": 4.0, "x_max": 1.0}}, "target_kappa": {kappa}, "seed": 3}}"#
    );
    std::fs::write(dir.join("sim.json"), cfg).unwrap();
    unitfield(&["simulate", "--config", path(&dir.join("sim.json")), "--out-dir", path(&dir.join("sim"))])
}

#[test]
fn simulate_then_impute() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(simulate(d, 16, 4, 256, 0.15).status.success());
    let sim = d.join("sim");
    for f in ["data.csv", "mask.csv", "truth.json", "bounds.json", "provenance.json"] {
        assert!(sim.join(f).exists(), "{f}");
    }
    ok(&[
        "impute",
        "--data",
        path(&sim.join("data.csv")),
        "--mask",
        path(&sim.join("mask.csv")),
        "--bounds",
        path(&sim.join("bounds.json")),
        "--out-dir",
        path(&d.join("imp")),
        "--truth",
        path(&sim.join("truth.json")),
    ]);
    let dv = read_matrix_csv(&d.join("imp/delta_v.csv"), "dv").unwrap();
    assert_eq!(dv.dim(), (256, 4));
    let metrics: serde_json::Value = read_json(&d.join("imp/metrics.json")).unwrap();
    assert!(metrics["metrics"]["max_delta_v_sq"].as_f64().unwrap().is_finite());
}

#[test]
fn fit_output_reads_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(simulate(d, 6, 2, 40, 0.0).status.success());
    let sim = d.join("sim");
    std::fs::write(d.join("fit_cfg.json"), r#"{"max_iters": 150}"#).unwrap();
    ok(&[
        "fit",
        "--data",
        path(&sim.join("data.csv")),
        "--bounds",
        path(&sim.join("bounds.json")),
        "--out",
        path(&d.join("fit.json")),
        "--config",
        path(&d.join("fit_cfg.json")),
    ]);
    let spec: ModelSpec = read_json(&sim.join("bounds.json")).unwrap();
    let data = read_dataset(&sim.join("data.csv"), &spec).unwrap();
    let cfg = FitConfig { max_iters: 150, ..FitConfig::default() };
    let (expected, _) = pgd_fit(&data, &spec.bounds().unwrap(), &cfg).unwrap();
    assert_eq!(read_fit(&d.join("fit.json")).unwrap(), expected);
}

#[test]
fn exit_codes() {
    assert_eq!(unitfield(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(unitfield(&[]).status.code(), Some(1));
    assert_eq!(unitfield(&["--help"]).status.code(), Some(0));
    let missing = unitfield(&["fit", "--data", "/nonexistent/data.csv", "--bounds", "/nonexistent/b.json", "--out", "x"]);
    assert_eq!(missing.status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    // an unreachable conditioning target exhausts the generator
    assert_eq!(simulate(dir.path(), 8, 2, 16, 1e9).status.code(), Some(2));

    let bad_seed = Command::new(env!("CARGO_BIN_EXE_unitfield"))
        .args(["simulate", "--config", path(&dir.path().join("sim.json")), "--out-dir", path(&dir.path().join("s"))])
        .env("UNITFIELD_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(bad_seed.status.code(), Some(1));
    assert_eq!(unitfield(&["--workers", "0", "bench", "--config", "c.json", "--out", "r.csv"]).status.code(), Some(1));
}

#[test]
fn seed_override_changes_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(simulate(d, 6, 2, 16, 0.0).status.success());
    let run = |seed: &str, out: &str| {
        let status = Command::new(env!("CARGO_BIN_EXE_unitfield"))
            .args(["simulate", "--config", path(&d.join("sim.json")), "--out-dir", path(&d.join(out))])
            .env("UNITFIELD_SEED", seed)
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(d.join(out).join("data.csv")).unwrap()
    };
    let base = std::fs::read(d.join("sim/data.csv")).unwrap();
    assert_eq!(run("3", "a"), base);
    assert_ne!(run("4", "b"), base);
}
