//! Planted-instance generators and evaluation metrics.
//!
//! Ground-truth matrices are built from Gaussian factors with orthonormalized
//! columns and evenly spaced singular values between `1` and `1/kappa`.
//! Observation patterns come from fixed-size uniform sampling, Bernoulli
//! sampling, or a power-law scheme; corruption values are uniform in
//! `[-max|L*|, +max|L*|]` on a subset of the observed entries.
//!
//! All draws go through ChaCha8 with an explicit `(seed, stream)` split:
//! stream id `trial * 8 + purpose` gives every (trial, purpose) pair an
//! independent, platform-stable substream.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::gn_step::{leading_sign_negative, FactorPair};
use crate::obs_model::{EntrySet, ObservationSet};

/// A trial is a failure when its relative error exceeds this threshold.
pub const FAILURE_THRESHOLD: f64 = 1e-3;

/// Retry budget for the sampling verification steps.
const RESAMPLE_ATTEMPTS: usize = 100;

/// Purpose tag for RNG stream splitting.
#[derive(Debug, Clone, Copy)]
pub enum StreamPurpose {
    Model = 0,
    Omega = 1,
    Corruption = 2,
    Noise = 3,
    Init = 4,
}

/// Independent substream for a `(seed, trial, purpose)` triple.
pub fn substream(seed: u64, trial: u64, purpose: StreamPurpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial.wrapping_mul(8) + purpose as u64);
    rng
}

/// Ground-truth descriptor: a rank-`r` matrix with prescribed condition
/// number, held as a balanced factor pair (singular values absorbed).
#[derive(Debug, Clone)]
pub struct LowRankModel {
    n1: usize,
    n2: usize,
    r: usize,
    kappa: f64,
    singular_values: Vec<f64>,
    factors: FactorPair,
    max_abs_entry: f64,
}

impl LowRankModel {
    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n2(&self) -> usize {
        self.n2
    }

    pub fn rank(&self) -> usize {
        self.r
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// Balanced factors of the ground truth (`U V^T` is the dense matrix).
    pub fn factors(&self) -> &FactorPair {
        &self.factors
    }

    pub fn value_at(&self, i: usize, j: usize) -> f64 {
        self.factors.product_at(i, j)
    }

    pub fn dense(&self) -> DMatrix<f64> {
        self.factors.product_dense()
    }

    /// Frobenius norm, exact from the singular values.
    pub fn frobenius_norm(&self) -> f64 {
        self.singular_values.iter().map(|s| s * s).sum::<f64>().sqrt()
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.max_abs_entry
    }
}

/// Builds a random rank-`r` model: i.i.d. Gaussian factors with
/// orthonormalized columns and `r` evenly spaced singular values between `1`
/// and `1/kappa`. Deterministic per seed.
pub fn gen_low_rank(n1: usize, n2: usize, r: usize, kappa: f64, seed: u64) -> Result<LowRankModel> {
    if r == 0 || r > n1.min(n2) {
        return Err(Error::invalid(format!(
            "rank {r} invalid for a {n1}x{n2} matrix"
        )));
    }
    if !(kappa >= 1.0) {
        return Err(Error::invalid("kappa must be at least 1"));
    }
    if r == 1 && kappa != 1.0 {
        return Err(Error::invalid(
            "a rank-1 matrix cannot have condition number other than 1",
        ));
    }
    let mut rng = substream(seed, 0, StreamPurpose::Model);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let gu = DMatrix::from_fn(n1, r, |_, _| normal.sample(&mut rng));
    let gv = DMatrix::from_fn(n2, r, |_, _| normal.sample(&mut rng));
    let qu = orthonormalize(gu);
    let qv = orthonormalize(gv);

    let singular_values: Vec<f64> = if r == 1 {
        vec![1.0]
    } else {
        (0..r)
            .map(|i| 1.0 - (i as f64) * (1.0 - 1.0 / kappa) / ((r - 1) as f64))
            .collect()
    };

    let sqrt_sigma: Vec<f64> = singular_values.iter().map(|s| s.sqrt()).collect();
    let mut u = qu;
    let mut v = qv;
    for c in 0..r {
        u.column_mut(c).scale_mut(sqrt_sigma[c]);
        v.column_mut(c).scale_mut(sqrt_sigma[c]);
    }
    let factors = FactorPair::new(u, v)?;
    let mut max_abs = 0.0f64;
    for i in 0..n1 {
        for j in 0..n2 {
            max_abs = max_abs.max(factors.product_at(i, j).abs());
        }
    }
    Ok(LowRankModel {
        n1,
        n2,
        r,
        kappa,
        singular_values,
        factors,
        max_abs_entry: max_abs,
    })
}

/// Thin QR with columns sign-fixed so each leading nonzero entry is
/// nonnegative.
fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    let qr = m.qr();
    let mut q = qr.q();
    for c in 0..q.ncols() {
        if leading_sign_negative(q.column(c).as_slice()) {
            q.column_mut(c).neg_mut();
        }
    }
    q
}

/// Samples exactly `floor(rho * r * (n1 + n2 - r))` cells without
/// replacement, retrying until every row and column holds at least `r`
/// entries. Returned positions are sorted row-major.
pub fn sample_omega_fixed(
    n1: usize,
    n2: usize,
    r: usize,
    rho: f64,
    seed: u64,
) -> Result<Vec<(u32, u32)>> {
    if !(rho > 0.0) {
        return Err(Error::invalid("rho must be positive"));
    }
    let target = (rho * (r * (n1 + n2 - r)) as f64).floor() as usize;
    if target > n1 * n2 {
        return Err(Error::invalid(format!(
            "target |omega| = {target} exceeds the {n1}x{n2} cell count"
        )));
    }
    if target < r * n1.max(n2) {
        return Err(Error::InfeasibleSampling(format!(
            "{target} cells cannot give {r} entries to every row and column"
        )));
    }
    let mut rng = substream(seed, 0, StreamPurpose::Omega);
    for _ in 0..RESAMPLE_ATTEMPTS {
        let mut picks = rand::seq::index::sample(&mut rng, n1 * n2, target).into_vec();
        picks.sort_unstable();
        let pattern: Vec<(u32, u32)> = picks
            .iter()
            .map(|&p| ((p / n2) as u32, (p % n2) as u32))
            .collect();
        if pattern_counts_ok(n1, n2, &pattern, r) {
            return Ok(pattern);
        }
    }
    Err(Error::InfeasibleSampling(format!(
        "row/column verification failed {RESAMPLE_ATTEMPTS} times"
    )))
}

/// Includes every cell independently with probability `p`.
pub fn sample_omega_bernoulli(n1: usize, n2: usize, p: f64, seed: u64) -> Result<Vec<(u32, u32)>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid("p must lie in (0, 1]"));
    }
    let mut rng = substream(seed, 0, StreamPurpose::Omega);
    let mut pattern = Vec::new();
    for i in 0..n1 {
        for j in 0..n2 {
            if rng.random::<f64>() < p {
                pattern.push((i as u32, j as u32));
            }
        }
    }
    Ok(pattern)
}

/// Power-law sampling: row weights `i^{-2/3}` and column weights `j^{-2/3}`
/// (1-based), both normalized to sum to `w = rho * r * (n1 + n2 - r)`; cell
/// `(i, j)` is kept with probability `p_i q_j / w`, so `E|omega| = w`.
pub fn sample_omega_powerlaw(
    n1: usize,
    n2: usize,
    r: usize,
    rho: f64,
    seed: u64,
) -> Result<Vec<(u32, u32)>> {
    if !(rho > 0.0) {
        return Err(Error::invalid("rho must be positive"));
    }
    let w = rho * (r * (n1 + n2 - r)) as f64;
    let p = powerlaw_marginals(n1, w);
    let q = powerlaw_marginals(n2, w);
    // Largest cell probability is attained at (1, 1).
    if p[0] * q[0] / w > 1.0 {
        return Err(Error::InvalidConfig(format!(
            "cell probability {} exceeds 1; lower rho or grow the matrix",
            p[0] * q[0] / w
        )));
    }
    let mut rng = substream(seed, 0, StreamPurpose::Omega);
    let mut pattern = Vec::new();
    for i in 0..n1 {
        for j in 0..n2 {
            if rng.random::<f64>() < p[i] * q[j] / w {
                pattern.push((i as u32, j as u32));
            }
        }
    }
    Ok(pattern)
}

/// `w`-normalized power-law weights `(k+1)^{-2/3}`.
pub fn powerlaw_marginals(n: usize, w: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-2.0 / 3.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| w * x / total).collect()
}

fn pattern_counts_ok(n1: usize, n2: usize, pattern: &[(u32, u32)], r: usize) -> bool {
    let mut row_counts = vec![0usize; n1];
    let mut col_counts = vec![0usize; n2];
    for &(i, j) in pattern {
        row_counts[i as usize] += 1;
        col_counts[j as usize] += 1;
    }
    row_counts.iter().all(|&c| c >= r) && col_counts.iter().all(|&c| c >= r)
}

/// Plants `floor(alpha * |pattern|)` corrupted entries inside the pattern,
/// verifying that the remaining entries keep at least `r` per row and
/// column. Values are uniform in `[-max|L*|, +max|L*|]`.
///
/// Returns the corrupted positions (indices into the row-major pattern,
/// sorted) and their corruption values.
pub fn gen_corruption(
    model: &LowRankModel,
    pattern: &[(u32, u32)],
    alpha: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if !(0.0..=0.5).contains(&alpha) {
        return Err(Error::invalid("alpha must lie in [0, 0.5]"));
    }
    let k_star = (alpha * pattern.len() as f64).floor() as usize;
    if k_star == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let mut rng = substream(seed, 0, StreamPurpose::Corruption);
    let mut row_counts = vec![0usize; model.n1];
    let mut col_counts = vec![0usize; model.n2];
    for &(i, j) in pattern {
        row_counts[i as usize] += 1;
        col_counts[j as usize] += 1;
    }
    let mut chosen: Option<Vec<usize>> = None;
    for _ in 0..RESAMPLE_ATTEMPTS {
        let mut picks = rand::seq::index::sample(&mut rng, pattern.len(), k_star).into_vec();
        picks.sort_unstable();
        let mut rows_left = row_counts.clone();
        let mut cols_left = col_counts.clone();
        for &p in &picks {
            let (i, j) = pattern[p];
            rows_left[i as usize] -= 1;
            cols_left[j as usize] -= 1;
        }
        if rows_left.iter().all(|&c| c >= model.r) && cols_left.iter().all(|&c| c >= model.r) {
            chosen = Some(picks);
            break;
        }
    }
    let picks = chosen.ok_or_else(|| {
        Error::InfeasibleSampling(format!(
            "corruption verification failed {RESAMPLE_ATTEMPTS} times"
        ))
    })?;
    let bound = model.max_abs_entry();
    let values: Vec<f64> = picks
        .iter()
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Ok((picks, values))
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every observed value.
pub fn add_gaussian_noise(values: &[f64], sigma: f64, seed: u64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid("sigma must be nonnegative"));
    }
    if sigma == 0.0 {
        return Ok(values.to_vec());
    }
    let mut rng = substream(seed, 0, StreamPurpose::Noise);
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    Ok(values.iter().map(|v| v + normal.sample(&mut rng)).collect())
}

/// `||L_hat - L*||_F / ||L*||_F`.
pub fn rel_rmse(estimate: &FactorPair, model: &LowRankModel) -> f64 {
    let denom = model.frobenius_norm();
    debug_assert!(denom > 0.0, "ground truth has positive norm by invariant");
    let mut num = 0.0;
    for i in 0..model.n1 {
        for j in 0..model.n2 {
            let d = estimate.product_at(i, j) - model.value_at(i, j);
            num += d * d;
        }
    }
    num.sqrt() / denom
}

/// Relative Frobenius distance between two dense matrices.
pub fn rel_rmse_between(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if estimate.shape() != truth.shape() {
        return Err(Error::invalid("shape mismatch"));
    }
    let denom = truth.norm();
    if denom == 0.0 {
        return Err(Error::invalid("ground truth has zero norm"));
    }
    Ok((estimate - truth).norm() / denom)
}

/// Sampling-pattern generator selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingMode {
    FixedUniform,
    Bernoulli { p: f64 },
    PowerLaw,
}

impl std::fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SamplingMode::FixedUniform => write!(f, "fixed-uniform"),
            SamplingMode::Bernoulli { p } => write!(f, "bernoulli({p})"),
            SamplingMode::PowerLaw => write!(f, "power-law"),
        }
    }
}

/// One simulated problem configuration.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n1: usize,
    pub n2: usize,
    pub r_true: usize,
    pub kappa: f64,
    /// Oversampling ratio `|omega| / (r (n1 + n2 - r))`; ignored by
    /// Bernoulli sampling.
    pub rho: f64,
    pub sampling: SamplingMode,
    /// Fraction of observed entries to corrupt; values are uniform in
    /// `[-max|L*|, +max|L*|]`.
    pub alpha: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n1: 200,
            n2: 100,
            r_true: 5,
            kappa: 2.0,
            rho: 12.0,
            sampling: SamplingMode::FixedUniform,
            alpha: 0.05,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    /// The desk-scale exact-recovery configuration: 200x100, rank 5,
    /// condition number 2, oversampling 12, 5% corruption.
    pub fn fig1_desk_scale(seed: u64) -> Self {
        SimConfig {
            seed,
            ..SimConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.alpha) {
            return Err(Error::InvalidConfig("alpha must lie in [0, 0.5]".into()));
        }
        if self.sampling == SamplingMode::FixedUniform {
            let target = self.rho * (self.r_true * (self.n1 + self.n2 - self.r_true)) as f64;
            if target.floor() as usize > self.n1 * self.n2 {
                return Err(Error::InvalidConfig(
                    "rho * r * (n1 + n2 - r) exceeds the cell count".into(),
                ));
            }
        }
        Ok(())
    }
}

/// A fully assembled planted instance: ground truth, observed (possibly
/// corrupted, possibly noisy) entries, and the planted outlier support.
#[derive(Debug, Clone)]
pub struct PlantedInstance {
    pub model: LowRankModel,
    pub observations: ObservationSet,
    pub lambda_star: EntrySet,
    pub corruption_values: Vec<f64>,
}

impl PlantedInstance {
    pub fn generate(cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        let model = gen_low_rank(cfg.n1, cfg.n2, cfg.r_true, cfg.kappa, cfg.seed)?;
        let pattern = match cfg.sampling {
            SamplingMode::FixedUniform => {
                sample_omega_fixed(cfg.n1, cfg.n2, cfg.r_true, cfg.rho, cfg.seed)?
            }
            SamplingMode::Bernoulli { p } => {
                sample_omega_bernoulli(cfg.n1, cfg.n2, p, cfg.seed)?
            }
            SamplingMode::PowerLaw => {
                sample_omega_powerlaw(cfg.n1, cfg.n2, cfg.r_true, cfg.rho, cfg.seed)?
            }
        };
        let (corr_positions, corr_values) = gen_corruption(&model, &pattern, cfg.alpha, cfg.seed)?;
        let mut values: Vec<f64> = pattern
            .iter()
            .map(|&(i, j)| model.value_at(i as usize, j as usize))
            .collect();
        for (&p, &s) in corr_positions.iter().zip(corr_values.iter()) {
            values[p] += s;
        }
        let values = add_gaussian_noise(&values, cfg.noise_sigma, cfg.seed)?;
        let observations = ObservationSet::from_triplets(
            cfg.n1,
            cfg.n2,
            pattern
                .iter()
                .zip(values.iter())
                .map(|(&(i, j), &v)| (i as usize, j as usize, v)),
        )?;
        // The pattern is row-major sorted, so pattern indices coincide with
        // entry positions of the assembled observation set.
        let lambda_star = EntrySet::from_positions(&observations, corr_positions.iter().copied())?;
        Ok(PlantedInstance {
            model,
            observations,
            lambda_star,
            corruption_values: corr_values,
        })
    }

    /// Number of planted corrupted entries.
    pub fn k_star(&self) -> usize {
        self.lambda_star.cardinality()
    }
}

/// One sweep trial, CSV-serializable with a stable column order.
#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub n1: usize,
    pub n2: usize,
    pub r_true: usize,
    pub r_input: usize,
    pub kappa: f64,
    pub rho: f64,
    pub sampling: String,
    pub alpha: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub rel_rmse: f64,
    pub failed: bool,
    pub runtime_seconds: f64,
    pub k_used: usize,
    pub k_hat: Option<usize>,
    pub status: String,
}

impl TrialRecord {
    pub const CSV_HEADER: &'static str = "n1,n2,r_true,r_input,kappa,rho,sampling,alpha,noise_sigma,seed,rel_rmse,failed,runtime_seconds,k_used,k_hat,status";

    /// Builds a record, deriving the failure flag from the error threshold.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cfg: &SimConfig,
        r_input: usize,
        rel_rmse: f64,
        runtime_seconds: f64,
        k_used: usize,
        k_hat: Option<usize>,
        status: String,
    ) -> Self {
        TrialRecord {
            n1: cfg.n1,
            n2: cfg.n2,
            r_true: cfg.r_true,
            r_input,
            kappa: cfg.kappa,
            rho: cfg.rho,
            sampling: cfg.sampling.to_string(),
            alpha: cfg.alpha,
            noise_sigma: cfg.noise_sigma,
            seed: cfg.seed,
            rel_rmse,
            failed: rel_rmse > FAILURE_THRESHOLD,
            runtime_seconds,
            k_used,
            k_hat,
            status,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.n1,
            self.n2,
            self.r_true,
            self.r_input,
            self.kappa,
            self.rho,
            self.sampling,
            self.alpha,
            self.noise_sigma,
            self.seed,
            self.rel_rmse,
            self.failed,
            self.runtime_seconds,
            self.k_used,
            self.k_hat.map_or(String::new(), |k| k.to_string()),
            self.status,
        )
    }
}

/// Aggregate statistics over a batch of trials.
#[derive(Debug, Clone)]
pub struct Summary {
    pub n: usize,
    pub median_rel_rmse: f64,
    pub failure_rate: f64,
    /// Binomial standard error `sqrt(p (1 - p) / n)`.
    pub failure_se: f64,
    /// `failure_rate -/+ 1.96 * failure_se`.
    pub ci_lower: f64,
    pub ci_upper: f64,
}

pub fn aggregate(records: &[TrialRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::invalid("cannot aggregate zero trials"));
    }
    let n = records.len();
    let median_rel_rmse = median(records.iter().map(|r| r.rel_rmse).collect());
    let failures = records.iter().filter(|r| r.failed).count();
    let p = failures as f64 / n as f64;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    Ok(Summary {
        n,
        median_rel_rmse,
        failure_rate: p,
        failure_se: se,
        ci_lower: p - 1.96 * se,
        ci_upper: p + 1.96 * se,
    })
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    assert!(!xs.is_empty());
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}
