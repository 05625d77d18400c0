use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_measpoly"))
}

fn write_config(dir: &Path, json: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, json).unwrap();
    path
}

fn run(sub: &str, json: &str, extra: &[&str]) -> (Output, TempDir) {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), json);
    let out = bin()
        .arg(sub)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .args(extra)
        .output()
        .unwrap();
    (out, dir)
}

fn read_csv(dir: &TempDir, name: &str) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(dir.path().join("out").join(name)).unwrap();
    text.lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

/// `base` with one more top-level field.
fn with(base: &str, extra: &str) -> String {
    let trimmed = base.trim_end().strip_suffix('}').unwrap();
    format!("{trimmed}, {extra}}}")
}

fn num(s: &str) -> f64 {
    s.parse().unwrap()
}

const CIR: &str = r#"{"version":1,"grid":{"labels":1},"initial":[1],"horizon":1,
  "operator":{"b":[0.1],"b1":[[-0.5]],"alpha":[1]}}"#;

const GBM: &str = r#"{"version":1,"grid":{"labels":2},"initial":[1,2],"horizon":1,
  "operator":{"loadings":[[0.2,0.2]]}}"#;

#[test]
fn validate_exit_codes() {
    let zero = r#"{"version":1,"grid":{"labels":2},"initial":[1,1],"horizon":1}"#;
    assert_eq!(run("validate", zero, &[]).0.status.code(), Some(0));

    let bad = r#"{"version":1,"grid":{"labels":2},"initial":[1,1],"horizon":1,
      "operator":{"b1":[[-1,-0.5],[0,-1]]}}"#;
    let (out, _) = run("validate", bad, &[]);
    assert_eq!(out.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let failed: Vec<&str> = report["conditions"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| !c["passed"].as_bool().unwrap())
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(failed, vec!["positive minimum principle"]);

    let coupling = r#"{"version":1,"grid":{"labels":3},"initial":[1,1,1],"horizon":1,
      "operator":{"pi":[[0,0.4,1.1],[0.4,0,0.3],[1.1,0.3,0]],
                  "beta":[[0,-0.4,-1.1],[-0.4,0,-0.3],[-1.1,-0.3,0]]}}"#;
    assert_eq!(run("validate", coupling, &[]).0.status.code(), Some(0));
}

#[test]
fn usage_and_schema_errors() {
    let out = bin().arg("validate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let (out, _) = run("validate", r#"{"version":1,"grid":{"labels":1},"horizon":1,"typo":1}"#, &[]);
    assert_eq!(out.status.code(), Some(2));
    let (out, _) = run("moments", r#"{"version":1,"grid":{"labels":1},"initial":[1],"horizon":1}"#, &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn schema_error_writes_nothing() {
    let json = r#"{"version":1,"grid":{"labels":2},"initial":[1,2],"horizon":1,
      "moments":{"polynomial":{"linear":[1,2,3]}}}"#;
    let (out, dir) = run("moments", json, &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn moments_gbm_column() {
    let json = with(GBM, r#""moments":{"polynomial":{"power":{"g":[1,1],"n":2}},"times":[0,0.5,1]}"#);
    let (out, dir) = run("moments", &json, &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_csv(&dir, "moments.csv");
    assert_eq!(rows[0], vec!["t", "value"]);
    for row in &rows[1..] {
        let (t, v) = (num(&row[0]), num(&row[1]));
        assert!((v - 9.0 * (0.04 * t).exp()).abs() <= 1e-9 * v);
    }
}

#[test]
fn moments_constant_and_cir() {
    let json = with(CIR, r#""moments":{"polynomial":{"constant":2.5},"times":[0.3,1]}"#);
    let (_, dir) = run("moments", &json, &[]);
    assert!(read_csv(&dir, "moments.csv")[1..].iter().all(|r| num(&r[1]) == 2.5));

    let json = with(CIR, r#""moments":{"polynomial":{"linear":[1]}}"#);
    let (_, dir) = run("moments", &json, &[]);
    assert!((num(&read_csv(&dir, "moments.csv")[1][1]) - 0.685225).abs() < 5e-7);
}

#[test]
fn laplace_feller() {
    let feller = |b: f64, g: f64| {
        format!(
            r#"{{"version":1,"grid":{{"labels":1}},"initial":[1],"horizon":1,
              "operator":{{"b":[{b}],"alpha":[2]}},"laplace":{{"g":[{g}]}}}}"#
        )
    };
    let last = |dir: &TempDir| {
        let rows = read_csv(dir, "laplace.csv");
        assert_eq!(rows[0], vec!["t", "psi_1", "phi", "laplace"]);
        num(rows.last().unwrap().last().unwrap())
    };
    let (out, dir) = run("laplace", &feller(0.0, -1.0), &[]);
    assert_eq!(out.status.code(), Some(0));
    assert!((last(&dir) - 0.606531).abs() < 1e-6);
    let (_, dir) = run("laplace", &feller(1.0, -1.0), &[]);
    assert!((last(&dir) - 0.303265).abs() < 1e-6);
    let (_, dir) = run("laplace", &feller(1.0, 0.0), &[]);
    assert_eq!(last(&dir), 1.0);

    let json = with(GBM, r#""laplace":{"g":[-1,-1]}"#);
    let (out, _) = run("laplace", &json, &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Q2"));
}

#[test]
fn simulate_is_deterministic() {
    let json = with(CIR, r#""simulate":{"binary":true}"#);
    let args = ["--paths", "500", "--steps", "100", "--seed", "7"];
    let (out, a) = run("simulate", &json, &args);
    assert_eq!(out.status.code(), Some(0));
    let (_, b) = run("simulate", &json, &args);
    for name in ["summary.csv", "paths.bin"] {
        let x = std::fs::read(a.path().join("out").join(name)).unwrap();
        let y = std::fs::read(b.path().join("out").join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
    let rows = read_csv(&a, "summary.csv");
    assert_eq!(rows[0], vec!["t", "mass_mean", "mass_se"]);
    assert_eq!(rows.len(), 102);
    let bin = std::fs::read(a.path().join("out").join("paths.bin")).unwrap();
    assert_eq!(bin.len(), 32 + 8 * 500 * 101);
}

#[test]
fn simulate_refuses_invalid_spec() {
    let json = r#"{"version":1,"grid":{"labels":1},"initial":[1],"horizon":1,"operator":{"alpha":[-1]}}"#;
    let (out, dir) = run("simulate", json, &["--paths", "10"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn futures_zero_cir_and_gbm() {
    let zero = r#"{"version":1,"grid":{"points":[0.5,1,1.5]},"initial":[1,2,3],"horizon":1,
      "futures":{"periods":[{"tau1":0.9,"tau2":1.6}],"bands":false}}"#;
    let (out, dir) = run("price-futures", zero, &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_csv(&dir, "futures.csv");
    assert_eq!(rows[0][..8], ["period", "tau1", "tau2", "mean", "std", "p05", "p50", "p95"]);
    assert!((num(&rows[1][3]) - 2.5).abs() < 1e-12);
    assert_eq!(num(&rows[1][4]), 0.0);

    let cir = r#"{"version":1,"grid":{"preset":{"name":"cir_field","nodes":3}},"horizon":1,
      "futures":{"periods":[{"tau1":0.4,"tau2":0.6,"weights":[2]}],"bands":false}}"#;
    let (_, dir) = run("price-futures", cir, &[]);
    assert!((num(&read_csv(&dir, "futures.csv")[1][3]) - 2.0 * 0.685225).abs() < 1e-6);

    let gbm = r#"{"version":1,"grid":{"points":[1,2]},"initial":[1,3],"horizon":1,
      "operator":{"loadings":[[0.2,0.2]]},
      "futures":{"periods":[{"tau1":1,"tau2":2}]}}"#;
    let args = ["--paths", "4000", "--steps", "50", "--seed", "3"];
    let (_, dir) = run("price-futures", gbm, &args);
    let row = &read_csv(&dir, "futures.csv")[1];
    let f0: f64 = 2.0;
    let var = f0 * f0 * ((0.04f64).exp() - 1.0);
    assert!((num(&row[4]).powi(2) - var).abs() <= 1e-6 * var);
    let (p05, p50, p95) = (num(&row[5]), num(&row[6]), num(&row[7]));
    assert!(p05 < p50 && p50 < p95);
    assert!((num(&row[8]) - num(&row[3])).abs() <= 3.0 * num(&row[9]));
    let (_, again) = run("price-futures", gbm, &args);
    assert_eq!(
        std::fs::read(dir.path().join("out/futures.csv")).unwrap(),
        std::fs::read(again.path().join("out/futures.csv")).unwrap()
    );
}

#[test]
fn futures_empty_period() {
    let json = r#"{"version":1,"grid":{"points":[0,1]},"initial":[1,1],"horizon":1,
      "futures":{"periods":[{"tau1":0.2,"tau2":0.8}]}}"#;
    let (out, dir) = run("price-futures", json, &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn probe_runs() {
    let json = r#"{"version":1,"grid":{"preset":{"name":"fisher_snedecor","nodes":3}},"horizon":1,
      "probe":{"functions":3,"restarts":4}}"#;
    let (out, dir) = run("probe", json, &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(read_csv(&dir, "probe.csv").len(), 4);
}

#[test]
fn out_dir_from_environment() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"version":1,"grid":{"labels":1},"initial":[1],"horizon":1,"moments":{"polynomial":{"linear":[1]}}}"#,
    );
    let target = dir.path().join("env-out");
    let out = bin()
        .args(["moments", "--config"])
        .arg(&cfg)
        .env(measpoly_cli::OUT_ENV, &target)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(target.join("moments.csv").exists());
}
