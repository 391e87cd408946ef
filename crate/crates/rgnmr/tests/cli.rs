//! Integration tests for the command-line interface, exercised through the
//! compiled binary.

#![allow(clippy::needless_range_loop)]

use std::path::Path;
use std::process::Command;

use rgnmr::io;
use rgnmr::obs_model::ObservationSet;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rgnmr"))
}

/// Rank-1 ground truth u v^T on a full 3x3 mask.
fn rank1_obs(outlier: Option<(usize, usize, f64)>) -> ObservationSet {
    let u = [1.0, -2.0, 0.5];
    let v = [3.0, 1.0, -1.5];
    let mut triplets = Vec::new();
    for i in 0..3 {
        for j in 0..3 {
            let mut val = u[i] * v[j];
            if let Some((oi, oj, ov)) = outlier {
                if (i, j) == (oi, oj) {
                    val += ov;
                }
            }
            triplets.push((i, j, val));
        }
    }
    ObservationSet::from_triplets(3, 3, triplets).unwrap()
}

fn dense_from_factors(dir: &Path, prefix: &str) -> nalgebra::DMatrix<f64> {
    let u = io::read_dense(dir.join(format!("{prefix}.U.mtx"))).unwrap();
    let v = io::read_dense(dir.join(format!("{prefix}.V.mtx"))).unwrap();
    u * v.transpose()
}

#[test]
fn complete_recovers_exact_rank1_input() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("exact.mtx");
    let obs = rank1_obs(None);
    io::write_observations(&input, &obs).unwrap();
    let out = dir.path().join("fit");
    let status = bin()
        .args(["complete"])
        .arg(&input)
        .args(["--rank", "1", "--k", "0", "--seed", "1", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let recon = dense_from_factors(dir.path(), "fit");
    let mut err: f64 = 0.0;
    let mut norm: f64 = 0.0;
    for (i, j, x) in obs.iter() {
        err += (recon[(i, j)] - x).powi(2);
        norm += x * x;
    }
    assert!(
        err.sqrt() <= 1e-9 * norm.sqrt(),
        "reconstruction residual {}",
        err.sqrt() / norm.sqrt()
    );
    let diag = std::fs::read_to_string(dir.path().join("fit.jsonl")).unwrap();
    let record: serde_json::Value = serde_json::from_str(diag.lines().next().unwrap()).unwrap();
    assert_eq!(record["status"], "converged");
    assert_eq!(record["k_used"], 0);
}

#[test]
fn complete_removes_planted_outlier() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("spiked.mtx");
    let clean = rank1_obs(None);
    let spiked = rank1_obs(Some((1, 2, 40.0)));
    io::write_observations(&input, &spiked).unwrap();
    let out = dir.path().join("fit");
    let status = bin()
        .args(["complete"])
        .arg(&input)
        .args(["--rank", "1", "--k", "1", "--seed", "3", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let recon = dense_from_factors(dir.path(), "fit");
    for (i, j, x) in clean.iter() {
        assert!(
            (recon[(i, j)] - x).abs() <= 1e-6,
            "entry ({i}, {j}): {} vs truth {x}",
            recon[(i, j)]
        );
    }
}

#[test]
fn estimate_k_reports_the_budget() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("spiked.mtx");
    io::write_observations(&input, &rank1_obs(Some((0, 1, 25.0)))).unwrap();
    let out = dir.path().join("fit");
    let status = bin()
        .args(["complete"])
        .arg(&input)
        .args(["--rank", "1", "--estimate-k", "--kmin", "0", "--kmax", "3", "--seed", "5", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let diag = std::fs::read_to_string(dir.path().join("fit.jsonl")).unwrap();
    let record: serde_json::Value = serde_json::from_str(diag.lines().next().unwrap()).unwrap();
    assert!(record["k_hat"].is_u64(), "k_hat missing: {record}");
}

#[test]
fn usage_errors_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("exact.mtx");
    io::write_observations(&input, &rank1_obs(None)).unwrap();
    // Rank zero is a usage error.
    let out = bin()
        .args(["complete"])
        .arg(&input)
        .args(["--rank", "0", "--out"])
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    // Unreadable file.
    let out = bin()
        .args(["complete"])
        .arg(dir.path().join("missing.mtx"))
        .args(["--rank", "1", "--out"])
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    // Malformed header.
    let bad = dir.path().join("bad.mtx");
    std::fs::write(&bad, "%%MatrixMarket matrix coordinate complex general\n1 1 1\n1 1 2\n").unwrap();
    let out = bin()
        .args(["complete"])
        .arg(&bad)
        .args(["--rank", "1", "--out"])
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn seed_env_fallback_matches_explicit_flag() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("spiked.mtx");
    io::write_observations(&input, &rank1_obs(Some((2, 0, 30.0)))).unwrap();
    let run_with = |name: &str, extra: &dyn Fn(&mut Command)| {
        let out = dir.path().join(name);
        let mut cmd = bin();
        cmd.args(["complete"])
            .arg(&input)
            .args(["--rank", "1", "--k", "1", "--out"])
            .arg(&out);
        extra(&mut cmd);
        assert_eq!(cmd.status().unwrap().code(), Some(0));
        std::fs::read_to_string(dir.path().join(format!("{name}.U.mtx"))).unwrap()
    };
    let explicit = run_with("a", &|cmd| {
        cmd.args(["--seed", "77"]);
    });
    let via_env = run_with("b", &|cmd| {
        cmd.env("RGNMR_SEED", "77");
    });
    assert_eq!(explicit, via_env);
}

const SWEEP_CONFIG: &str = r#"
[grid]
n1 = 40
n2 = 30
r_true = 2
rho = [6.0, 8.0]
alpha = 0.05

[run]
seeds = 2
base_seed = 5
threads = 1
"#;

#[test]
fn simulate_writes_deterministic_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sweep.toml");
    std::fs::write(&config, SWEEP_CONFIG).unwrap();
    let csv_a = dir.path().join("a.csv");
    let csv_b = dir.path().join("b.csv");
    for (out, threads) in [(&csv_a, "1"), (&csv_b, "2")] {
        let status = bin()
            .args(["simulate"])
            .arg(&config)
            .args(["--threads", threads, "--out"])
            .arg(out)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
    }
    let mask_runtime = |text: &str| -> Vec<String> {
        text.lines()
            .map(|line| {
                let mut fields: Vec<&str> = line.split(',').collect();
                if fields.len() > 12 && fields[12] != "runtime_seconds" {
                    fields[12] = "";
                }
                fields.join(",")
            })
            .collect()
    };
    let a = std::fs::read_to_string(&csv_a).unwrap();
    let b = std::fs::read_to_string(&csv_b).unwrap();
    // Identical apart from wall-clock timings, regardless of thread count.
    assert_eq!(mask_runtime(&a), mask_runtime(&b));
    assert_eq!(a.lines().count(), 5); // header + 2 rho * 2 seeds
    let header = a.lines().next().unwrap();
    assert_eq!(header, rgnmr::simgen::TrialRecord::CSV_HEADER);
    // Failure flag consistency with the threshold.
    for line in a.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let rmse: f64 = fields[10].parse().unwrap();
        let failed: bool = fields[11].parse().unwrap();
        assert_eq!(failed, rmse > 1e-3);
    }
}

#[test]
fn simulate_dump_config_and_invalid_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sweep.toml");
    std::fs::write(&config, SWEEP_CONFIG).unwrap();
    let out = bin()
        .args(["simulate"])
        .arg(&config)
        .args(["--dump-config"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["grid"]["n1"], 40);
    // Unknown keys are rejected.
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, SWEEP_CONFIG.replace("alpha = 0.05", "alpha = 0.05\nmystery = 1")).unwrap();
    let out = bin().args(["simulate"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn chart_renders_simulate_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sweep.toml");
    std::fs::write(&config, SWEEP_CONFIG).unwrap();
    let csv = dir.path().join("rows.csv");
    assert_eq!(
        bin().args(["simulate"]).arg(&config).args(["--out"]).arg(&csv).status().unwrap().code(),
        Some(0)
    );
    let svg = dir.path().join("plot.svg");
    let status = bin()
        .args(["chart"])
        .arg(&csv)
        .args(["--x", "rho", "--out"])
        .arg(&svg)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let text = std::fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg"));
    assert!(text.contains("polyline"));
}

#[test]
fn bench_writes_csv_and_slope() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let out = bin()
        .args(["bench", "--sizes", "30,40,50", "--rank", "2", "--rho", "6.0"])
        .args(["--trials", "2", "--seed", "4", "--out"])
        .arg(&csv)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("log-log runtime slope"), "stdout: {stdout}");
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("n,trial,runtime_seconds"));
    assert_eq!(text.lines().count(), 7); // header + 3 sizes * 2 trials
}
