//! Config-driven Monte-Carlo sweeps, runtime benchmarks and chart output.
//!
//! A sweep config is a TOML file with a `[grid]` table (axes may be scalars
//! or lists; the grid is their cartesian product) and a `[run]` table (seed
//! count, budget policy, solver knobs). Every (grid point, seed) pair
//! produces one CSV row. Records are computed in parallel but always written
//! in trial order, so outputs do not depend on the thread count.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ksearch;
use crate::simgen::{self, PlantedInstance, SamplingMode, SimConfig, TrialRecord};
use crate::solver::{run, SolveOptions, SolveStatus};

/// A scalar-or-list axis value in the TOML grid.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
pub enum Axis<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> Axis<T> {
    fn values(&self) -> Vec<T> {
        match self {
            Axis::One(x) => vec![x.clone()],
            Axis::Many(xs) => xs.clone(),
        }
    }
}

impl<T> Default for Axis<T>
where
    T: Default,
{
    fn default() -> Self {
        Axis::One(T::default())
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub n1: usize,
    pub n2: usize,
    pub r_true: usize,
    #[serde(default = "default_kappa")]
    pub kappa: Axis<f64>,
    #[serde(default = "default_rho")]
    pub rho: Axis<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: Axis<f64>,
    /// Input rank is `r_true + rank_offset`.
    #[serde(default)]
    pub rank_offset: Axis<i64>,
    #[serde(default)]
    pub noise_sigma: Axis<f64>,
    #[serde(default = "default_sampling")]
    pub sampling: String,
    /// Observation probability for `sampling = "bernoulli"`.
    #[serde(default)]
    pub bernoulli_p: Option<f64>,
}

fn default_kappa() -> Axis<f64> {
    Axis::One(2.0)
}

fn default_rho() -> Axis<f64> {
    Axis::One(12.0)
}

fn default_alpha() -> Axis<f64> {
    Axis::One(0.05)
}

fn default_sampling() -> String {
    "fixed-uniform".into()
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_seeds")]
    pub seeds: u64,
    #[serde(default)]
    pub base_seed: u64,
    /// "exact" uses the planted count, "estimate" runs the binary search,
    /// "fixed" uses `k_value`.
    #[serde(default = "default_k_policy")]
    pub k_policy: String,
    #[serde(default)]
    pub k_value: Option<usize>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// 0 lets the runtime pick.
    #[serde(default)]
    pub threads: usize,
}

fn default_seeds() -> u64 {
    50
}

fn default_k_policy() -> String {
    "exact".into()
}

fn default_max_iters() -> usize {
    100
}

fn default_tol() -> f64 {
    1e-12
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub grid: GridSection,
    pub run: RunSection,
}

impl SweepConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: SweepConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self.grid.sampling.as_str() {
            "fixed-uniform" | "power-law" => {}
            "bernoulli" => {
                let p = self.grid.bernoulli_p.ok_or_else(|| {
                    Error::InvalidConfig("bernoulli sampling requires bernoulli_p".into())
                })?;
                if !(p > 0.0 && p <= 1.0) {
                    return Err(Error::InvalidConfig("bernoulli_p must lie in (0, 1]".into()));
                }
            }
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown sampling mode: {other}"
                )))
            }
        }
        match self.run.k_policy.as_str() {
            "exact" | "estimate" => {}
            "fixed" => {
                if self.run.k_value.is_none() {
                    return Err(Error::InvalidConfig(
                        "k_policy = \"fixed\" requires k_value".into(),
                    ));
                }
            }
            other => {
                return Err(Error::InvalidConfig(format!("unknown k_policy: {other}")))
            }
        }
        if self.run.seeds == 0 {
            return Err(Error::InvalidConfig("seeds must be positive".into()));
        }
        for off in self.grid.rank_offset.values() {
            if self.grid.r_true as i64 + off < 1 {
                return Err(Error::InvalidConfig("rank_offset drops rank below 1".into()));
            }
        }
        Ok(())
    }

    /// JSON rendering of the parsed config, for tooling.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn sampling_mode(&self) -> SamplingMode {
        match self.grid.sampling.as_str() {
            "bernoulli" => SamplingMode::Bernoulli {
                p: self.grid.bernoulli_p.expect("validated"),
            },
            "power-law" => SamplingMode::PowerLaw,
            _ => SamplingMode::FixedUniform,
        }
    }

    /// The trial list in deterministic order: grid axes nested rho, kappa,
    /// rank_offset, alpha, noise_sigma, then seeds innermost.
    pub fn trials(&self) -> Vec<TrialSpec> {
        let mut out = Vec::new();
        for &rho in &self.grid.rho.values() {
            for &kappa in &self.grid.kappa.values() {
                for &off in &self.grid.rank_offset.values() {
                    for &alpha in &self.grid.alpha.values() {
                        for &noise in &self.grid.noise_sigma.values() {
                            for s in 0..self.run.seeds {
                                out.push(TrialSpec {
              sim: SimConfig {
                  n1: self.grid.n1,
                  n2: self.grid.n2,
                  r_true: self.grid.r_true,
                  kappa,
                  rho,
                  sampling: self.sampling_mode(),
                  alpha,
                  noise_sigma: noise,
                  seed: self.run.base_seed + s,
              },
              r_input: (self.grid.r_true as i64 + off) as usize,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// One trial to execute.
#[derive(Debug, Clone)]
pub struct TrialSpec {
    pub sim: SimConfig,
    pub r_input: usize,
}

pub fn status_str(status: SolveStatus) -> &'static str {
    match status {
        SolveStatus::Converged => "converged",
        SolveStatus::MaxIterations => "max-iterations",
        SolveStatus::IllPosed => "ill-posed",
    }
}

/// Executes one trial: generate the instance, pick the budget, solve, score.
pub fn run_trial(spec: &TrialSpec, runcfg: &RunSection) -> Result<TrialRecord> {
    let started = Instant::now();
    let inst = PlantedInstance::generate(&spec.sim)?;
    let mut opts = SolveOptions {
        max_outer_iterations: runcfg.max_iters,
        outer_tolerance: runcfg.tol,
        seed: spec.sim.seed,
        noise_sigma: spec.sim.noise_sigma,
        ..SolveOptions::default()
    };
    let mut k_hat = None;
    let k_used = match runcfg.k_policy.as_str() {
        "exact" => inst.k_star(),
        "fixed" => runcfg.k_value.expect("validated"),
        _ => {
            let trace = ksearch::estimate_k_upper_bound(
                &inst.observations,
                spec.r_input,
                0,
                inst.observations.len() / 2,
                &opts,
            )?;
            k_hat = Some(trace.k_hat);
            trace.k_hat
        }
    };
    opts.k = k_used.min(inst.observations.len());
    let result = run(&inst.observations, spec.r_input, &opts, None, None)?;
    let rel = simgen::rel_rmse(&result.factors, &inst.model);
    Ok(TrialRecord::new(
        &spec.sim,
        spec.r_input,
        rel,
        started.elapsed().as_secs_f64(),
        opts.k,
        k_hat,
        status_str(result.status).to_string(),
    ))
}

/// Runs every trial of the sweep, in parallel when `threads != 1`, returning
/// records in trial order.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<TrialRecord>> {
    let trials = cfg.trials();
    let execute = || -> Result<Vec<TrialRecord>> {
        use rayon::prelude::*;
        trials
            .par_iter()
            .map(|spec| run_trial(spec, &cfg.run))
            .collect()
    };
    if cfg.run.threads == 0 {
        execute()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.run.threads)
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        pool.install(execute)
    }
}

pub fn records_to_csv(records: &[TrialRecord]) -> String {
    let mut out = String::from(TrialRecord::CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Least-squares slope of `ln t` against `ln n`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::invalid("slope fit needs at least two points"));
    }
    if points.iter().any(|&(n, t)| n <= 0.0 || t <= 0.0) {
        return Err(Error::invalid("log-log fit needs positive coordinates"));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(n, t)| (n.ln(), t.ln())).collect();
    let n = logs.len() as f64;
    let sx: f64 = logs.iter().map(|p| p.0).sum();
    let sy: f64 = logs.iter().map(|p| p.1).sum();
    let sxx: f64 = logs.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = logs.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom == 0.0 {
        return Err(Error::invalid("degenerate abscissae"));
    }
    Ok((n * sxy - sx * sy) / denom)
}

/// Benchmark result for one size.
#[derive(Debug, Clone)]
pub struct BenchPoint {
    pub n: usize,
    pub runtimes: Vec<f64>,
    pub median_runtime: f64,
    pub median_rel_rmse: f64,
}

/// Times square completion runs of increasing size and fits the log-log
/// slope of the median runtime.
pub fn run_bench(
    sizes: &[usize],
    r: usize,
    rho: f64,
    alpha: f64,
    trials: u64,
    base_seed: u64,
) -> Result<(Vec<BenchPoint>, f64)> {
    if sizes.len() < 3 {
        return Err(Error::invalid("benchmark needs at least three sizes"));
    }
    let mut points = Vec::new();
    for &n in sizes {
        let mut runtimes = Vec::new();
        let mut errors = Vec::new();
        for t in 0..trials {
            let cfg = SimConfig {
                n1: n,
                n2: n,
                r_true: r,
                kappa: 2.0,
                rho,
                sampling: SamplingMode::FixedUniform,
                alpha,
                noise_sigma: 0.0,
                seed: base_seed + t,
            };
            let inst = PlantedInstance::generate(&cfg)?;
            let opts = SolveOptions {
                seed: cfg.seed,
                ..SolveOptions::with_k(inst.k_star())
            };
            let started = Instant::now();
            let result = run(&inst.observations, r, &opts, None, None)?;
            runtimes.push(started.elapsed().as_secs_f64());
            errors.push(simgen::rel_rmse(&result.factors, &inst.model));
        }
        points.push(BenchPoint {
            n,
            median_runtime: simgen::median(runtimes.clone()),
            median_rel_rmse: simgen::median(errors),
            runtimes,
        });
    }
    let slope = fit_loglog_slope(
        &points
            .iter()
            .map(|p| (p.n as f64, p.median_runtime))
            .collect::<Vec<_>>(),
    )?;
    Ok((points, slope))
}

pub fn bench_to_csv(points: &[BenchPoint], slope: f64) -> String {
    let mut out = String::from("n,trial,runtime_seconds,median_runtime_seconds,median_rel_rmse,loglog_slope\n");
    for p in points {
        for (t, rt) in p.runtimes.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                p.n, t, rt, p.median_runtime, p.median_rel_rmse, slope
            );
        }
    }
    out
}

/// Tidy-CSV reader for the chart subcommand: pulls one x column plus the
/// rel_rmse/failed columns out of a sweep CSV.
pub fn read_sweep_csv(text: &str, x_column: &str) -> Result<Vec<(f64, f64, bool)>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty csv".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let find = |name: &str| -> Result<usize> {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::Parse(format!("missing column {name}")))
    };
    let xi = find(x_column)?;
    let rmsei = find("rel_rmse")?;
    let failedi = find("failed")?;
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse(format!("ragged csv row: {line}")));
        }
        let x: f64 = fields[xi]
            .parse()
            .map_err(|_| Error::Parse(format!("bad {x_column} value: {}", fields[xi])))?;
        let rmse: f64 = fields[rmsei]
            .parse()
            .map_err(|_| Error::Parse("bad rel_rmse value".into()))?;
        let failed = fields[failedi] == "true";
        rows.push((x, rmse, failed));
    }
    Ok(rows)
}

/// Aggregates sweep rows into per-x medians and failure rates, and renders
/// two side-by-side SVG line charts (median error on a log scale, failure
/// probability linear).
pub fn chart_svg(rows: &[(f64, f64, bool)], x_label: &str) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::invalid("no rows to chart"));
    }
    let mut xs: Vec<f64> = rows.iter().map(|r| r.0).collect();
    xs.sort_by(|a, b| a.total_cmp(b));
    xs.dedup();
    let mut medians = Vec::new();
    let mut rates = Vec::new();
    for &x in &xs {
        let group: Vec<&(f64, f64, bool)> = rows.iter().filter(|r| r.0 == x).collect();
        medians.push(simgen::median(group.iter().map(|r| r.1).collect()));
        rates.push(group.iter().filter(|r| r.2).count() as f64 / group.len() as f64);
    }
    let panel_w = 360.0;
    let panel_h = 280.0;
    let margin = 50.0;
    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">",
        2.0 * (panel_w + margin) + margin,
        panel_h + 2.0 * margin
    );
    let log_medians: Vec<f64> = medians.iter().map(|m| m.max(1e-16).log10()).collect();
    draw_panel(
        &mut svg,
        margin,
        margin,
        panel_w,
        panel_h,
        &xs,
        &log_medians,
        x_label,
        "log10 median rel-RMSE",
    );
    draw_panel(
        &mut svg,
        margin * 2.0 + panel_w,
        margin,
        panel_w,
        panel_h,
        &xs,
        &rates,
        x_label,
        "failure rate",
    );
    svg.push_str("</svg>");
    Ok(svg)
}

#[allow(clippy::too_many_arguments)]
fn draw_panel(
    svg: &mut String,
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xs: &[f64],
    ys: &[f64],
    x_label: &str,
    y_label: &str,
) {
    let (xmin, xmax) = (xs[0], xs[xs.len() - 1]);
    let (mut ymin, mut ymax) = ys
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| {
            (lo.min(y), hi.max(y))
        });
    if (ymax - ymin).abs() < 1e-12 {
        ymin -= 1.0;
        ymax += 1.0;
    }
    let sx = |x: f64| {
        if (xmax - xmin).abs() < 1e-300 {
            x0 + w / 2.0
        } else {
            x0 + (x - xmin) / (xmax - xmin) * w
        }
    };
    let sy = |y: f64| y0 + h - (y - ymin) / (ymax - ymin) * h;
    let _ = write!(
        svg,
        "<rect x=\"{x0}\" y=\"{y0}\" width=\"{w}\" height=\"{h}\" fill=\"none\" stroke=\"black\"/>"
    );
    let pts: Vec<String> = xs
        .iter()
        .zip(ys.iter())
        .map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y)))
        .collect();
    let _ = write!(
        svg,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"1.5\"/>",
        pts.join(" ")
    );
    for (&x, &y) in xs.iter().zip(ys.iter()) {
        let _ = write!(
            svg,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"#1f6fb2\"/>",
            sx(x),
            sy(y)
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{x_label}</text>",
        x0 + w / 2.0,
        y0 + h + 32.0
    );
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 {:.1} {:.1})\">{y_label}</text>",
        x0 - 35.0,
        y0 + h / 2.0,
        x0 - 35.0,
        y0 + h / 2.0
    );
    // Extreme tick labels.
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{xmin}</text>",
        sx(xmin),
        y0 + h + 14.0
    );
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{xmax}</text>",
        sx(xmax),
        y0 + h + 14.0
    );
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.2}</text>",
        x0 - 4.0,
        sy(ymin) + 4.0,
        ymin
    );
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.2}</text>",
        x0 - 4.0,
        sy(ymax) + 4.0,
        ymax
    );
}
