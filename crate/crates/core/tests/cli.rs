use std::path::Path;
use std::process::{Command, Output};

fn qstab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qstab")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let paths = [dir.path().join("a.csv"), dir.path().join("b.csv")];
    for p in &paths {
        let out = qstab(&[
            "simulate",
            "--rho",
            "0.6",
            "--horizon",
            "20000",
            "--seeds",
            "2",
            "--seed",
            "5",
            "--out",
            p.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read(&paths[0]).unwrap();
    assert_eq!(a, std::fs::read(&paths[1]).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("# qstab"));
    // header plus five schemes
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 6);
}

#[test]
fn solve_prints_json_summary() {
    let out = qstab(&["solve", "--scheme", "output", "--rho", "0.6", "--rho2", "0.5", "--cells", "100"]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let mu = v["mu_star"].as_f64().unwrap();
    assert!((mu - 0.5496).abs() < 0.005, "{mu}");
}

#[test]
fn closed_form_schemes_are_rejected_by_solve() {
    assert_eq!(code(&qstab(&["solve", "--scheme", "full"])), 2);
}

#[test]
fn bad_arguments_exit_with_usage_code() {
    assert_eq!(code(&qstab(&["simulate", "--scheme", "telepathy", "--horizon", "10"])), 2);
    assert_eq!(code(&qstab(&["qbd", "--lambda", "1.5"])), 2);
    assert_eq!(code(&qstab(&["frobnicate"])), 2);
}

#[test]
fn iteration_budget_exhaustion_exits_with_three() {
    let out = qstab(&["solve", "--scheme", "state", "--cells", "50", "--tol", "1e-14", "--max-iters", "3"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn unordered_config_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    write_unordered(&path);
    let out = qstab(&["validate", "--quick", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn quick_validation_passes_on_benchmark() {
    let out = qstab(&["validate", "--quick", "--rho", "0.6"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn qbd_sweep_rows_follow_resolution() {
    let out = qstab(&["qbd", "--rho", "0.6", "--M-sweep", "4:8:2"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("4,"));
}

fn write_unordered(path: &Path) {
    // server 2 has the better bad state but the worse good state
    let doc = serde_json::json!({
        "lambda": 0.5,
        "server1": {"p": 0.25, "q": 0.25, "mu0": 0.2, "mu1": 0.8},
        "server2": {"p": 0.25, "q": 0.25, "mu0": 0.3, "mu1": 0.7},
        "allow_unordered": true
    });
    std::fs::write(path, doc.to_string()).unwrap();
}
