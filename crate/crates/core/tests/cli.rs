use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SINK: &str = r#"{
    "schema_version": 1,
    "network": {
        "generator": [[-1, 1], [1, -1]],
        "queues": 2,
        "lambda": [[2, 4], [0, 0]],
        "mu": [[[0, 0], [1, 1]], [[0, 0], [0, 0]]],
        "sinks": [2]
    },
    "scaling": { "alpha": 1.0, "n": 100, "n_list": [20, 400], "rho0": [0, 0] },
    "run": { "horizon": 1.0, "grid_step": 0.1, "reps": 400, "seed": 7 },
    "tolerances": { "checks": { "fluid_cap": 1.0 } }
}"#;

const MODEL3: &str = r#"{
    "schema_version": 1,
    "model3": {
        "generator": [[-1, 1], [1, -1]],
        "lambda_star": [1, 2],
        "kappa_star": [3, 4],
        "mu_star": [5, 6]
    },
    "scaling": { "alpha": 1.0 },
    "run": { "horizon": 1.0, "grid_step": 0.5, "reps": 500, "seed": 3 }
}"#;

fn mmq(dir: &Path, command: &str, config: &str, extra: &[&str]) -> Output {
    let path = dir.join("config.json");
    fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_mmq"))
        .arg(command)
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .args(extra)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn validate_reports_dimensions() {
    let dir = TempDir::new().unwrap();
    let o = mmq(dir.path(), "validate", SINK, &[]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for line in ["L = 2", "d = 2", "alpha = 1", "beta = 0.5"] {
        assert!(text.contains(line), "{text}");
    }
}

#[test]
fn chain_summary_values() {
    let dir = TempDir::new().unwrap();
    let o = mmq(dir.path(), "chain-summary", SINK, &[]);
    assert_eq!(o.status.code(), Some(0));
    let body: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/chain_summary.json")).unwrap()).unwrap();
    let close = |v: &serde_json::Value, x: f64| (v.as_f64().unwrap() - x).abs() < 1e-12;
    assert!(close(&body["pi"][0], 0.5));
    assert!(close(&body["deviation"][0][0], 0.25));
    assert!(close(&body["sigma"][0][1], -0.25));
}

#[test]
fn fluid_and_moments_csv_layout() {
    let dir = TempDir::new().unwrap();
    assert_eq!(mmq(dir.path(), "fluid", SINK, &[]).status.code(), Some(0));
    assert_eq!(mmq(dir.path(), "ou-moments", SINK, &[]).status.code(), Some(0));
    let fluid = fs::read_to_string(dir.path().join("out/fluid.csv")).unwrap();
    let lines: Vec<&str> = fluid.lines().collect();
    assert_eq!(lines[0], "t,rho_1,rho_2");
    assert_eq!(lines.len(), 12);
    let last: Vec<f64> = lines[11].split(',').map(|c| c.parse().unwrap()).collect();
    assert!((last[0] - 1.0).abs() < 1e-12);
    assert!((last[1] - 3.0 * (1.0 - (-1.0f64).exp())).abs() < 1e-6);
    let moments = fs::read_to_string(dir.path().join("out/moments.csv")).unwrap();
    assert_eq!(moments.lines().next().unwrap(), "t,m_1,m_2,V_11,V_12,V_22");
}

#[test]
fn simulate_writes_one_file_per_replication() {
    let dir = TempDir::new().unwrap();
    let o = mmq(dir.path(), "simulate", SINK, &["--reps", "3", "--n", "10"]);
    assert_eq!(o.status.code(), Some(0));
    for rep in 0..3 {
        let text = fs::read_to_string(dir.path().join(format!("out/trajectory_{rep:04}.csv"))).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,j_state,q_1,q_2");
        assert_eq!(text.lines().count(), 12);
    }
    assert!(!dir.path().join("out/trajectory_0003.csv").exists());
}

#[test]
fn verification_exit_codes_and_report() {
    let dir = TempDir::new().unwrap();
    let o = mmq(dir.path(), "verify-occupation", SINK, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["check"], "occupation");
    for key in ["params", "stats", "verdicts"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert!(report["verdicts"].as_array().unwrap().iter().all(|v| v["passed"] == true));
    assert!(dir.path().join("out/report.txt").exists());

    let doubled = SINK.replace("\"tolerances\"", "\"checks\": { \"reference_scale\": 2.0 },\n    \"tolerances\"");
    let o = mmq(dir.path(), "verify-occupation", &doubled, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn model3_commands() {
    let dir = TempDir::new().unwrap();
    let o = mmq(dir.path(), "reduce-model3", MODEL3, &[]);
    assert_eq!(o.status.code(), Some(0));
    let net: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/reduced_network.json")).unwrap()).unwrap();
    assert_eq!(net["queues"], 3);
    let o = mmq(dir.path(), "verify-model3", MODEL3, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert_eq!(mmq(dir.path(), "reduce-model3", SINK, &[]).status.code(), Some(2));
}

#[test]
fn input_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let o = mmq(dir.path(), "validate", &SINK.replace("\"lambda\"", "\"lamda\""), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lamda"));
    let o = mmq(dir.path(), "validate", &SINK.replace("[[2, 4], [0, 0]]", "[[2, 4]]"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = mmq(dir.path(), "validate", "{ not json", &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = mmq(dir.path(), "no-such-command", SINK, &[]);
    assert_eq!(o.status.code(), Some(2));
    let missing = Command::new(env!("CARGO_BIN_EXE_mmq")).args(["validate", "--config", "/nonexistent/x.json"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn overrides_change_the_run() {
    let dir = TempDir::new().unwrap();
    mmq(dir.path(), "simulate", SINK, &["--reps", "1", "--seed", "1"]);
    let a = fs::read_to_string(dir.path().join("out/trajectory_0000.csv")).unwrap();
    mmq(dir.path(), "simulate", SINK, &["--reps", "1", "--seed", "1"]);
    let b = fs::read_to_string(dir.path().join("out/trajectory_0000.csv")).unwrap();
    mmq(dir.path(), "simulate", SINK, &["--reps", "1", "--seed", "2"]);
    let c = fs::read_to_string(dir.path().join("out/trajectory_0000.csv")).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
