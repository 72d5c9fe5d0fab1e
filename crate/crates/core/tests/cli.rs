use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ceo_rate::solver::{check_kkt, recover_multipliers, BTSolution};
use ceo_rate::ProblemInstance;
use serde_json::Value;
use tempfile::TempDir;

const SCALAR: &str = r#"{"m":1,"L":1,"K":[[1.0]],"Sigma":[[[1.0]]],"mu":[1.0],"d":0.6}"#;
const TIED: &str = r#"{"m":1,"L":2,"K":[[1.0]],"Sigma":[[[1.0]],[[1.0]]],"mu":[1.0,1.0],"d":0.5}"#;
const PAIR: &str = r#"{"m":2,"L":2,"K":[[2.0,0.4],[0.4,1.0]],
  "Sigma":[[[0.5,0.1],[0.1,0.8]],[[1.5,-0.2],[-0.2,0.6]]],"mu":[1.5,1.0],"d":1.2}"#;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ceo-rate"));
    cmd.env_remove("CEO_RATE_SEED");
    cmd
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}", String::from_utf8_lossy(&out.stdout))
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn solve_scalar_reports_both_units() {
    let dir = TempDir::new().unwrap();
    let inst = write(&dir, "i.json", SCALAR);
    let out = run(&["solve", s(&inst)]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    let nats = v["rate_nats"].as_f64().unwrap();
    assert!((nats - 0.5 * 5f64.ln()).abs() < 1e-5);
    assert_eq!(v["rate_bits"].as_f64().unwrap(), nats / std::f64::consts::LN_2);
    assert_eq!(v["status"], "Converged");
}

#[test]
fn malformed_input_exits_2() {
    let dir = TempDir::new().unwrap();
    let inst = write(&dir, "bad.json", "{\"m\": 1,");
    let out = run(&["solve", s(&inst)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn d_outside_window_exits_2() {
    let dir = TempDir::new().unwrap();
    let inst = write(&dir, "i.json", &SCALAR.replace("0.6", "1.5"));
    let out = run(&["solve", s(&inst)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("d window"));
}

#[test]
fn kkt_round_trip_reproduces_residuals() {
    let dir = TempDir::new().unwrap();
    let inst_path = write(&dir, "i.json", PAIR);
    let sol_path = dir.path().join("sol.json");
    let out = run(&["solve", s(&inst_path), "--out", s(&sol_path)]);
    assert_eq!(out.status.code(), Some(0));
    let out = run(&["kkt", s(&inst_path), "--solution", s(&sol_path)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let cli_residual = json(&out)["max_residual"].as_f64().unwrap();

    let inst = ProblemInstance::from_json(PAIR).unwrap();
    let sol: BTSolution = serde_json::from_str(&std::fs::read_to_string(&sol_path).unwrap()).unwrap();
    let cert = recover_multipliers(&inst, &sol).unwrap();
    let local = check_kkt(&inst, &sol, &cert, 1e-6).unwrap().max_residual;
    assert!((cli_residual - local).abs() <= 1e-12);
}

#[test]
fn d_sweep_is_decreasing() {
    let dir = TempDir::new().unwrap();
    let inst = write(&dir, "i.json", SCALAR);
    let out = run(&["sweep", s(&inst), "--lo", "0.55", "--hi", "0.95", "--steps", "9", "--format", "csv"]);
    assert_eq!(out.status.code(), Some(0));
    let mut rdr = csv::Reader::from_reader(out.stdout.as_slice());
    let header = rdr.headers().unwrap().clone();
    assert_eq!(&header[0], "d");
    assert_eq!(&header[1], "rate_nats");
    let rates: Vec<f64> = rdr.records().map(|r| r.unwrap()[1].parse().unwrap()).collect();
    assert_eq!(rates.len(), 9);
    assert!(rates.windows(2).all(|w| w[1] < w[0]), "{rates:?}");
    // Closed form (1/2) ln(1 / (2d - 1)) for the unit scalar case.
    for (k, r) in rates.iter().enumerate() {
        let d = 0.55 + 0.05 * k as f64;
        assert!((r - 0.5 * (1.0 / (2.0 * d - 1.0)).ln()).abs() < 1e-6);
    }
}

#[test]
fn sweep_near_window_edges_is_finite() {
    let dir = TempDir::new().unwrap();
    let inst = write(&dir, "i.json", SCALAR);
    let out = run(&["sweep", s(&inst), "--lo", "0.501", "--hi", "0.999", "--steps", "2", "--format", "csv"]);
    assert_eq!(out.status.code(), Some(0));
    let mut rdr = csv::Reader::from_reader(out.stdout.as_slice());
    for r in rdr.records() {
        assert!(r.unwrap()[1].parse::<f64>().unwrap().is_finite());
    }
}

#[test]
fn sweep_rejects_bad_ranges() {
    let dir = TempDir::new().unwrap();
    let inst = write(&dir, "i.json", SCALAR);
    for args in [["--lo", "0.7", "--hi", "0.7", "--steps", "5"], ["--lo", "0.6", "--hi", "0.8", "--steps", "1"], ["--lo", "0.4", "--hi", "0.8", "--steps", "3"]] {
        let mut all = vec!["sweep", s(&inst)];
        all.extend(args);
        assert_eq!(run(&all).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn weight_ray_sweep_runs() {
    let dir = TempDir::new().unwrap();
    let inst = write(&dir, "i.json", PAIR);
    let out = run(&["sweep", s(&inst), "--var", "mu-ray", "--lo", "0", "--hi", "1", "--steps", "3", "--format", "csv"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("t,rate_nats"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn pipeline_scalar_passes() {
    let dir = TempDir::new().unwrap();
    let inst = write(&dir, "i.json", SCALAR);
    let out = run(&["pipeline", s(&inst), "--grid", "101"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["pass"], true);
    assert_eq!(v["stages"].as_array().unwrap().len(), 5);
}

#[test]
fn pipeline_with_tied_weights_notes_empty_w() {
    let dir = TempDir::new().unwrap();
    let inst = write(&dir, "i.json", TIED);
    let out = run(&["pipeline", s(&inst), "--grid", "101"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(json(&out)["empty_w"], serde_json::json!([1]));
}

#[test]
fn loose_solver_fails_at_kkt_stage() {
    let dir = TempDir::new().unwrap();
    let inst = write(&dir, "i.json", PAIR);
    let out = run(&["pipeline", s(&inst), "--tol", "1e-2", "--grid", "101"]);
    assert_eq!(out.status.code(), Some(3));
    let v = json(&out);
    assert_eq!(v["failed_stage"], "kkt");
    assert!(v["kkt"]["max_residual"].as_f64().unwrap() > 1e-6);
    assert!(v["decomposition"].is_null());
}

#[test]
fn verify_extremal_writes_path_csv() {
    let dir = TempDir::new().unwrap();
    let inst = write(&dir, "i.json", SCALAR);
    let csv_path = dir.path().join("path.csv");
    let out = run(&["verify-extremal", s(&inst), "--grid", "21", "--path-csv", s(&csv_path)]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert!(v["extremal"]["gap"].as_f64().unwrap().abs() < 1e-8);
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert!(text.starts_with("gamma,g_nats\n"));
    assert_eq!(text.lines().count(), 22);
}

#[test]
fn verify_extremal_rejects_infeasible_channel() {
    let dir = TempDir::new().unwrap();
    let inst = write(&dir, "i.json", SCALAR);
    let ch = write(&dir, "c.json", r#"{"gains":[[[0.0]]],"noises":[[[1.0]]]}"#);
    let out = run(&["verify-extremal", s(&inst), "--channel", s(&ch), "--grid", "11"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trace constraint"));
}

#[test]
fn lemmas_pass_and_seed_env_is_honoured() {
    let a = bin().args(["lemmas", "--draws", "12"]).env("CEO_RATE_SEED", "7").output().unwrap();
    let b = run(&["lemmas", "--draws", "12", "--seed", "7"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(json(&a)["seed"], 7);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn solve_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let inst = write(&dir, "i.json", PAIR);
    let a = run(&["solve", s(&inst), "--seed", "11"]);
    let b = run(&["solve", s(&inst), "--seed", "11"]);
    assert_eq!(a.stdout, b.stdout);
}
