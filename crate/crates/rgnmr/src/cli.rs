//! Command-line front end: file-based completion, corruption-budget
//! estimation, Monte-Carlo sweeps, runtime benchmarks and chart output.
//!
//! Exit codes: 0 on success/convergence, 1 on usage or IO errors, 2 when the
//! iteration cap was reached without convergence, 3 when the problem turned
//! ill-posed mid-run.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::error::{Error, Result};
use crate::harness;
use crate::io;
use crate::ksearch;
use crate::solver::{run, SolveOptions, SolveStatus};
use crate::theory::{self, TheoryParams};

/// Environment variable consulted when `--seed` is absent.
pub const SEED_ENV: &str = "RGNMR_SEED";

#[derive(Parser)]
#[command(
    name = "rgnmr",
    version,
    about = "Robust low-rank matrix completion with iterative outlier removal"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Complete a partially observed matrix from a MatrixMarket file.
    Complete(CompleteArgs),
    /// Run a config-driven Monte-Carlo sweep; one CSV row per trial.
    Simulate(SimulateArgs),
    /// Time square instances of growing size and fit the runtime slope.
    Bench(BenchArgs),
    /// Render median-error and failure-rate charts from a sweep CSV.
    Chart(ChartArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Variant {
    Plain,
    Modified,
}

#[derive(Args)]
struct CompleteArgs {
    /// Observed entries, MatrixMarket coordinate format (1-based indices).
    input: PathBuf,
    /// Target rank of the completion.
    #[arg(long)]
    rank: usize,
    /// Upper bound on the number of corrupted entries.
    #[arg(long, default_value_t = 0)]
    k: usize,
    /// Estimate the corruption budget by binary search before solving.
    #[arg(long, default_value_t = false)]
    estimate_k: bool,
    /// Lower end of the binary-search interval (default 0).
    #[arg(long)]
    kmin: Option<usize>,
    /// Upper end of the binary-search interval (default |observed| / 2).
    #[arg(long)]
    kmax: Option<usize>,
    /// Outer iteration cap.
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    /// Relative residual tolerance for declaring convergence.
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
    /// RNG seed; falls back to RGNMR_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Known additive-noise standard deviation (enables the sqrt-sigma
    /// stopping rule).
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    /// Solver variant: the plain top-k loop or the constrained one.
    #[arg(long, value_enum, default_value_t = Variant::Plain)]
    variant: Variant,
    /// Incoherence bound (modified variant; measured from the spectral
    /// factors when omitted).
    #[arg(long)]
    mu: Option<f64>,
    /// Per-row/column corruption fraction bound (required by the modified
    /// variant).
    #[arg(long)]
    alpha: Option<f64>,
    /// Over-removal factor of the modified variant.
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    /// Initial squared neighborhood radius of the modified variant
    /// (spectrum-derived default when omitted).
    #[arg(long)]
    delta: Option<f64>,
    /// Accepted for interface symmetry; single completions run sequentially.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Output prefix: writes <out>.U.mtx, <out>.V.mtx and <out>.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Sweep configuration (TOML; see the README for the schema).
    config: PathBuf,
    /// Output CSV path.
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
    /// Worker threads (overrides the config; 0 keeps the runtime default).
    #[arg(long)]
    threads: Option<usize>,
    /// Print the parsed config as JSON and exit.
    #[arg(long, default_value_t = false)]
    dump_config: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Square sizes to time, e.g. --sizes 200,400,800.
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    rank: usize,
    #[arg(long, default_value_t = 6.0)]
    rho: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Repetitions per size (medians are reported).
    #[arg(long, default_value_t = 5)]
    trials: u64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct ChartArgs {
    /// Sweep CSV produced by the simulate subcommand.
    input: PathBuf,
    /// Grid column for the x axis (rho, kappa, r_input, alpha, noise_sigma).
    #[arg(long, default_value = "rho")]
    x: String,
    #[arg(long, default_value = "chart.svg")]
    out: PathBuf,
}

/// Entry point used by the binary; returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Complete(args) => cmd_complete(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Bench(args) => cmd_bench(&args),
        Command::Chart(args) => cmd_chart(&args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn resolve_seed(explicit: Option<u64>) -> u64 {
    explicit
        .or_else(|| std::env::var(SEED_ENV).ok()?.parse().ok())
        .unwrap_or(0)
}

fn cmd_complete(args: &CompleteArgs) -> Result<i32> {
    if args.rank == 0 {
        return Err(Error::invalid("--rank must be at least 1"));
    }
    let obs = io::read_observations(&args.input)?;
    let seed = resolve_seed(args.seed);
    let base_opts = SolveOptions {
        k: args.k,
        max_outer_iterations: args.max_iters,
        outer_tolerance: args.tol,
        seed,
        noise_sigma: args.noise_sigma,
        ..SolveOptions::default()
    };

    let started = std::time::Instant::now();
    let (result, k_used, k_hat) = match args.variant {
        Variant::Plain => {
            let mut opts = base_opts;
            let mut k_hat = None;
            if args.estimate_k {
                let kmin = args.kmin.unwrap_or(0);
                let kmax = args.kmax.unwrap_or(obs.len() / 2);
                let trace = ksearch::estimate_k_upper_bound(&obs, args.rank, kmin, kmax, &opts)?;
                if trace.no_probe_stabilized {
                    eprintln!(
                        "warning: no probe stabilized; using k = {} (interval upper end)",
                        trace.k_hat
                    );
                }
                k_hat = Some(trace.k_hat);
                opts.k = trace.k_hat;
            }
            let k_used = opts.k;
            (run(&obs, args.rank, &opts, None, None)?, k_used, k_hat)
        }
        Variant::Modified => {
            let alpha = args
                .alpha
                .ok_or_else(|| Error::invalid("--variant modified requires --alpha"))?;
            let init_probe = theory::spectral_init_auto(&obs, args.rank, args.k)?;
            let mu = args
                .mu
                .unwrap_or_else(|| theory::incoherence_of_factors(&init_probe, args.rank));
            let params = TheoryParams::new(mu, alpha, args.gamma, 0.0, obs.p_hat());
            let init = theory::spectral_init(&obs, args.rank, &params)?;
            let mut params = params.with_spectrum_from(&init);
            if let Some(delta) = args.delta {
                params.delta = delta;
            }
            let result = theory::run_modified(&obs, args.rank, &params, args.max_iters, &init)?;
            (result, args.k, None)
        }
    };
    let runtime = started.elapsed().as_secs_f64();

    let u_path = suffixed(&args.out, ".U.mtx");
    let v_path = suffixed(&args.out, ".V.mtx");
    let diag_path = suffixed(&args.out, ".jsonl");
    io::write_dense(&u_path, result.factors.u())?;
    io::write_dense(&v_path, result.factors.v())?;
    let record = json!({
        "command": "complete",
        "input": args.input.display().to_string(),
        "status": harness::status_str(result.status),
        "iterations": result.iterations_used,
        "rel_residual": result.residual_history.last().copied(),
        "k_used": k_used,
        "k_hat": k_hat,
        "lambda_stabilized": result.lambda_stabilized,
        "runtime_seconds": runtime,
        "factors": [u_path.display().to_string(), v_path.display().to_string()],
    });
    std::fs::write(&diag_path, format!("{record}\n"))?;
    println!(
        "{}: {} after {} iterations (rel residual {:.3e})",
        args.input.display(),
        harness::status_str(result.status),
        result.iterations_used,
        result.residual_history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(match result.status {
        SolveStatus::Converged => 0,
        SolveStatus::MaxIterations => 2,
        SolveStatus::IllPosed => 3,
    })
}

fn cmd_simulate(args: &SimulateArgs) -> Result<i32> {
    let text = std::fs::read_to_string(&args.config)?;
    let mut cfg = harness::SweepConfig::parse(&text)?;
    if let Some(threads) = args.threads {
        cfg.run.threads = threads;
    }
    if args.dump_config {
        println!("{}", cfg.to_json());
        return Ok(0);
    }
    let records = harness::run_sweep(&cfg)?;
    std::fs::write(&args.out, harness::records_to_csv(&records))?;
    let summary = crate::simgen::aggregate(&records)?;
    println!(
        "wrote {} records to {} (median rel-RMSE {:.3e}, failure rate {:.1}% +- {:.1}%)",
        records.len(),
        args.out.display(),
        summary.median_rel_rmse,
        100.0 * summary.failure_rate,
        100.0 * 1.96 * summary.failure_se,
    );
    Ok(0)
}

fn cmd_bench(args: &BenchArgs) -> Result<i32> {
    let seed = resolve_seed(args.seed);
    let (points, slope) = harness::run_bench(
        &args.sizes,
        args.rank,
        args.rho,
        args.alpha,
        args.trials,
        seed,
    )?;
    std::fs::write(&args.out, harness::bench_to_csv(&points, slope))?;
    for p in &points {
        println!(
            "n = {:5}: median runtime {:.3}s, median rel-RMSE {:.3e}",
            p.n, p.median_runtime, p.median_rel_rmse
        );
    }
    println!("log-log runtime slope: {slope:.3}");
    Ok(0)
}

fn cmd_chart(args: &ChartArgs) -> Result<i32> {
    let text = std::fs::read_to_string(&args.input)?;
    let rows = harness::read_sweep_csv(&text, &args.x)?;
    let svg = harness::chart_svg(&rows, &args.x)?;
    std::fs::write(&args.out, svg)?;
    println!("wrote {}", args.out.display());
    Ok(0)
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    prefix.with_file_name(name)
}
