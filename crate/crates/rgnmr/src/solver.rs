//! The outer completion loop.
//!
//! Each iteration solves the minimal-norm linearized least-squares problem on
//! the entries not currently flagged as outliers, then re-flags the `k`
//! observed entries with the largest linearized residuals. The loop stops at
//! the iteration cap, when the relative residual on the kept entries falls
//! below the outer tolerance, or -- when an additive-noise level is declared
//! -- below `sqrt(noise_sigma)`. The returned estimate is the rank-`r`
//! projection of the final linearized representation.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::gn_step::{
    linearized, project_rank_r, solve_min_norm_damped, FactorPair, InnerSolveOptions,
    LinearizedEstimate,
};
use crate::obs_model::{restrict, sets_equal, top_k_entries, EntrySet, ObservationSet};

/// How the initial factor pair is chosen when none is supplied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitPolicy {
    /// I.i.d. Gaussian factors, small relative to the data scale.
    RandomGaussian,
    /// Spectral initialization of the observed matrix (see the `theory`
    /// module); clipping is driven by the measured incoherence of the
    /// truncated factors.
    Spectral,
    /// The caller passes `init` explicitly.
    UserSupplied,
}

/// Configuration for [`run`].
#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Assumed upper bound on the number of corrupted entries.
    pub k: usize,
    /// Maximal number of outer iterations.
    pub max_outer_iterations: usize,
    /// Relative residual on the kept entries below which the run is declared
    /// converged.
    pub outer_tolerance: f64,
    /// Window length for flagged-set stability detection: the trajectory is
    /// stable when the last `window + 1` sets are pairwise equal.
    pub lambda_stability_window: usize,
    pub init_policy: InitPolicy,
    /// Standard-deviation scale of the random initialization. `None` selects
    /// `1e-2 * ||observed||_F / sqrt(|observed|)`, small relative to the data
    /// so the initial flagged set is close to the top-k of `|X|`.
    pub init_scale: Option<f64>,
    pub seed: u64,
    pub inner: InnerSolveOptions,
    /// Known additive-noise standard deviation; `0` disables the
    /// `sqrt(noise_sigma)` stopping rule.
    pub noise_sigma: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            k: 0,
            max_outer_iterations: 100,
            outer_tolerance: 1e-12,
            lambda_stability_window: 3,
            init_policy: InitPolicy::RandomGaussian,
            init_scale: None,
            seed: 0,
            inner: InnerSolveOptions::default(),
            noise_sigma: 0.0,
        }
    }
}

impl SolveOptions {
    pub fn with_k(k: usize) -> Self {
        SolveOptions {
            k,
            ..SolveOptions::default()
        }
    }
}

/// Terminal state of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    /// A row or column lost all of its kept entries mid-run; the best
    /// iterate so far is returned.
    IllPosed,
}

/// Outcome of [`run`] with per-iteration diagnostics.
#[derive(Debug, Clone)]
pub struct SolveResult {
    /// Rank-`r` output factors.
    pub factors: FactorPair,
    /// The stacked linearized representation before the final projection.
    pub estimate_builder: LinearizedEstimate,
    pub lambda_final: EntrySet,
    /// Whether the flagged-set trajectory was stable over the final window.
    pub lambda_stabilized: bool,
    /// Relative residual on the kept entries, one value per iteration.
    /// Recorded as observed; not required to be nonincreasing.
    pub residual_history: Vec<f64>,
    pub iterations_used: usize,
    pub status: SolveStatus,
}

/// Per-iteration snapshot passed to [`run_with_observer`] callbacks.
pub struct IterationSnapshot<'a> {
    pub iteration: usize,
    pub linearized: &'a LinearizedEstimate,
    pub relative_residual: f64,
    pub lambda: &'a EntrySet,
    /// Iterations spent by this step's inner least-squares solve.
    pub inner_iterations: usize,
}

/// Runs the completion loop. See the module documentation for the iteration
/// structure. `init` and `lambda0` override the configured policies.
pub fn run(
    obs: &ObservationSet,
    r: usize,
    opts: &SolveOptions,
    init: Option<&FactorPair>,
    lambda0: Option<&EntrySet>,
) -> Result<SolveResult> {
    run_with_observer(obs, r, opts, init, lambda0, |_| {})
}

/// As [`run`], invoking `observer` once per iteration after the flagged set
/// has been re-estimated.
pub fn run_with_observer(
    obs: &ObservationSet,
    r: usize,
    opts: &SolveOptions,
    init: Option<&FactorPair>,
    lambda0: Option<&EntrySet>,
    mut observer: impl FnMut(&IterationSnapshot),
) -> Result<SolveResult> {
    if r == 0 {
        return Err(Error::invalid("rank must be positive"));
    }
    if obs.is_empty() {
        return Err(Error::IllPosed("no observed entries".into()));
    }
    if opts.k > obs.len() {
        return Err(Error::invalid(format!(
            "k = {} exceeds |observed| = {}",
            opts.k,
            obs.len()
        )));
    }
    if opts.max_outer_iterations == 0 {
        return Err(Error::invalid("max_outer_iterations must be positive"));
    }
    if !(opts.outer_tolerance >= 0.0) {
        return Err(Error::invalid("outer_tolerance must be nonnegative"));
    }

    let (n1, n2) = (obs.n_rows(), obs.n_cols());
    let z0 = match init {
        Some(z) => {
            if z.dims() != (n1, n2) || z.rank() != r {
                return Err(Error::invalid("supplied initialization has wrong shape"));
            }
            z.clone()
        }
        None => match opts.init_policy {
            InitPolicy::RandomGaussian => {
                let scale = opts
                    .init_scale
                    .unwrap_or_else(|| 1e-2 * obs.values_norm() / (obs.len() as f64).sqrt());
                default_init(n1, n2, r, scale, opts.seed)
            }
            InitPolicy::Spectral => crate::theory::spectral_init_auto(obs, r, opts.k)?,
            InitPolicy::UserSupplied => {
                return Err(Error::invalid(
                    "init_policy is user-supplied but no initialization was given",
                ))
            }
        },
    };

    let mut lambda = match lambda0 {
        Some(l) => {
            if l.parent_dims() != (n1, n2) {
                return Err(Error::invalid("lambda0 references a different parent"));
            }
            if l.cardinality() != opts.k {
                return Err(Error::invalid(format!(
                    "lambda0 has {} members, expected k = {}",
                    l.cardinality(),
                    opts.k
                )));
            }
            l.clone()
        }
        None => default_lambda0(obs, &z0, opts.k)?,
    };

    let mut lambda_history: Vec<EntrySet> = vec![lambda.clone()];
    let mut residual_history: Vec<f64> = Vec::new();
    let mut z_prev = z0.clone();
    let mut z_curr = z0;
    let mut lin: Option<LinearizedEstimate> = None;
    let mut status = SolveStatus::MaxIterations;
    let mut iterations = 0;
    let noise_threshold = if opts.noise_sigma > 0.0 {
        Some(opts.noise_sigma.sqrt())
    } else {
        None
    };

    for t in 0..opts.max_outer_iterations {
        let kept = restrict(obs, &lambda)?;
        if kept.is_empty() || support_lost(obs, &kept) {
            status = SolveStatus::IllPosed;
            break;
        }

        // rhs_m = X_m + <U_t(i), V_t(j)> on the kept entries.
        let rhs: Vec<f64> = kept
            .iter()
            .map(|(i, j, x)| x + z_curr.product_at(i, j))
            .collect();
        let (z_next, report) = solve_min_norm_damped(&z_curr, &kept, &rhs, 0.0, &opts.inner)?;

        let lin_t = linearized(&z_curr, &z_next)?;
        let resid_all = {
            let mut vals = lin_t.values_on(obs);
            for (p, v) in vals.iter_mut().enumerate() {
                *v -= obs.value_of(p);
            }
            vals
        };
        let lambda_next = top_k_entries(obs, &resid_all, opts.k)?;

        // Relative residual on the entries used by this step's solve.
        let mask = lambda.mask();
        let mut num = 0.0;
        let mut den = 0.0;
        for p in 0..obs.len() {
            if !mask[p] {
                num += resid_all[p] * resid_all[p];
                den += obs.value_of(p) * obs.value_of(p);
            }
        }
        let rel_res = if den > 0.0 {
            (num / den).sqrt()
        } else {
            num.sqrt()
        };

        iterations = t + 1;
        residual_history.push(rel_res);
        lambda_history.push(lambda_next.clone());
        observer(&IterationSnapshot {
            iteration: iterations,
            linearized: &lin_t,
            relative_residual: rel_res,
            lambda: &lambda_next,
            inner_iterations: report.iterations,
        });

        z_prev = z_curr;
        z_curr = z_next;
        lambda = lambda_next;
        lin = Some(lin_t);

        if rel_res <= opts.outer_tolerance {
            status = SolveStatus::Converged;
            break;
        }
        if let Some(thr) = noise_threshold {
            if rel_res <= thr {
                status = SolveStatus::Converged;
                break;
            }
        }
    }

    let lin_final = match lin {
        Some(l) => l,
        // Ill-posed before the first solve: fall back to the initialization.
        None => linearized(&z_prev, &z_curr)?,
    };
    let factors = project_rank_r(&lin_final, r)?;
    let stabilized = lambda_stabilized(&lambda_history, opts.lambda_stability_window);

    Ok(SolveResult {
        factors,
        estimate_builder: lin_final,
        lambda_final: lambda,
        lambda_stabilized: stabilized,
        residual_history,
        iterations_used: iterations,
        status,
    })
}

/// True when some row or column that has observations in `obs` lost all of
/// them in `kept`.
fn support_lost(obs: &ObservationSet, kept: &ObservationSet) -> bool {
    (0..obs.n_rows()).any(|i| obs.row_count(i) > 0 && kept.row_count(i) == 0)
        || (0..obs.n_cols()).any(|j| obs.col_count(j) > 0 && kept.col_count(j) == 0)
}

/// I.i.d. Gaussian factors with entry standard deviation `scale / sqrt(r)`,
/// deterministic per seed.
pub fn default_init(n1: usize, n2: usize, r: usize, scale: f64, seed: u64) -> FactorPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x1217);
    let sd = scale / (r as f64).sqrt();
    if sd == 0.0 {
        return FactorPair::zeros(n1, n2, r);
    }
    let normal = Normal::new(0.0, sd).expect("valid std dev");
    let u = DMatrix::from_fn(n1, r, |_, _| normal.sample(&mut rng));
    let v = DMatrix::from_fn(n2, r, |_, _| normal.sample(&mut rng));
    FactorPair::new(u, v).expect("finite random factors")
}

/// Initial flagged set: the `k` largest residuals against the initial
/// product, `|X - U_0 V_0^T)|` on the observed entries.
pub fn default_lambda0(obs: &ObservationSet, anchor: &FactorPair, k: usize) -> Result<EntrySet> {
    if anchor.dims() != (obs.n_rows(), obs.n_cols()) {
        return Err(Error::invalid("anchor shape mismatch"));
    }
    let resid: Vec<f64> = obs
        .iter()
        .map(|(i, j, x)| x - anchor.product_at(i, j))
        .collect();
    top_k_entries(obs, &resid, k)
}

/// True iff the last `window + 1` sets in the history are pairwise equal.
/// A history shorter than `window + 1` is never considered stable.
pub fn lambda_stabilized(history: &[EntrySet], window: usize) -> bool {
    if window == 0 || history.len() < window + 1 {
        return false;
    }
    let tail = &history[history.len() - (window + 1)..];
    tail.windows(2).all(|w| sets_equal(&w[0], &w[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{self, SimConfig};

    #[test]
    fn lambda_stability_detection() {
        let obs = ObservationSet::from_triplets(
            4,
            5,
            (0..20).map(|p| (p / 5, p % 5, p as f64)),
        )
        .unwrap();
        let a = EntrySet::from_positions(&obs, [1, 2]).unwrap();
        let b = EntrySet::from_positions(&obs, [3, 4]).unwrap();
        let constant = vec![a.clone(), a.clone(), a.clone(), a.clone()];
        assert!(lambda_stabilized(&constant, 3));
        let alternating = vec![a.clone(), b.clone(), a.clone(), b.clone(), a.clone()];
        assert!(!lambda_stabilized(&alternating, 1));
        assert!(!lambda_stabilized(&alternating, 3));
        let mut tail_equal = vec![b.clone(), a.clone(), b.clone(), b.clone()];
        tail_equal.extend([b.clone(), b.clone(), a.clone(), a.clone(), a.clone()]);
        // Last 3 equal out of 9: window 2 stable, window 3 not.
        assert!(lambda_stabilized(&tail_equal, 2));
        assert!(!lambda_stabilized(&tail_equal, 3));
        assert!(!lambda_stabilized(&constant[..2], 3));
    }

    #[test]
    fn default_init_is_deterministic_and_scaled() {
        let a = default_init(100, 40, 5, 1.0, 9);
        let b = default_init(100, 40, 5, 1.0, 9);
        assert_eq!(a.u(), b.u());
        assert_eq!(a.v(), b.v());
        let zero = default_init(10, 10, 2, 0.0, 1);
        assert_eq!(zero.norm_sq(), 0.0);
        // Column norms concentrate near sqrt(n) * scale / sqrt(r) = sqrt(n/r).
        let mut mean = 0.0;
        let trials = 100;
        for seed in 0..trials {
            let z = default_init(100, 40, 5, 1.0, seed);
            let norms: f64 = (0..5).map(|c| z.u().column(c).norm()).sum::<f64>() / 5.0;
            mean += norms / trials as f64;
        }
        let predicted = (100.0f64 / 5.0).sqrt();
        assert!(
            (mean - predicted).abs() / predicted < 0.2,
            "mean column norm {mean} vs predicted {predicted}"
        );
    }

    #[test]
    fn default_lambda0_flags_planted_corruption() {
        let cfg = SimConfig::fig1_desk_scale(3);
        let inst = simgen::PlantedInstance::generate(&cfg).unwrap();
        // With the exact factorization as anchor, the residual equals the
        // corruption, so the top-k* set is exactly the planted support.
        let anchor = inst.model.factors().clone();
        let k_star = inst.lambda_star.cardinality();
        let l0 = default_lambda0(&inst.observations, &anchor, k_star).unwrap();
        assert!(sets_equal(&l0, &inst.lambda_star));
        assert!(default_lambda0(&inst.observations, &anchor, 0)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn plain_completion_recovers_uncorrupted_instance() {
        // k = 0 reduces to plain Gauss-Newton matrix completion.
        let cfg = SimConfig {
            n1: 60,
            n2: 40,
            r_true: 3,
            kappa: 2.0,
            rho: 6.0,
            alpha: 0.0,
            noise_sigma: 0.0,
            seed: 7,
            ..SimConfig::default()
        };
        let inst = simgen::PlantedInstance::generate(&cfg).unwrap();
        let opts = SolveOptions {
            seed: 7,
            ..SolveOptions::with_k(0)
        };
        let result = run(&inst.observations, 3, &opts, None, None).unwrap();
        assert_eq!(result.status, SolveStatus::Converged);
        let err = simgen::rel_rmse(&result.factors, &inst.model);
        assert!(err <= 1e-9, "rel-RMSE {err}");
        assert!(result.lambda_final.is_empty());
    }

    #[test]
    fn corrupted_instance_recovered_with_exact_budget() {
        let cfg = SimConfig::fig1_desk_scale(11);
        let inst = simgen::PlantedInstance::generate(&cfg).unwrap();
        let k_star = inst.lambda_star.cardinality();
        let opts = SolveOptions {
            seed: 11,
            ..SolveOptions::with_k(k_star)
        };
        let result = run(&inst.observations, cfg.r_true, &opts, None, None).unwrap();
        let err = simgen::rel_rmse(&result.factors, &inst.model);
        assert!(err <= 1e-6, "rel-RMSE {err}");
        assert!(
            result.lambda_final.is_superset_of(&inst.lambda_star),
            "final flagged set must cover the planted support"
        );
        assert!(result.lambda_stabilized);
    }

    #[test]
    fn oversized_budget_still_covers_planted_support() {
        // k above the true count: the flagged set must still contain the
        // planted support once the run converges.
        let cfg = SimConfig {
            n1: 120,
            n2: 60,
            r_true: 3,
            rho: 10.0,
            alpha: 0.05,
            seed: 13,
            ..SimConfig::default()
        };
        let inst = simgen::PlantedInstance::generate(&cfg).unwrap();
        let k = inst.k_star() + 40;
        let opts = SolveOptions {
            seed: 13,
            ..SolveOptions::with_k(k)
        };
        let result = run(&inst.observations, 3, &opts, None, None).unwrap();
        assert!(simgen::rel_rmse(&result.factors, &inst.model) <= 1e-6);
        assert!(result.lambda_final.is_superset_of(&inst.lambda_star));
        assert_eq!(result.lambda_final.cardinality(), k);
    }

    #[test]
    fn exact_start_is_a_fixed_point() {
        let cfg = SimConfig::fig1_desk_scale(23);
        let inst = simgen::PlantedInstance::generate(&cfg).unwrap();
        let anchor = inst.model.factors().clone();
        let lambda0 = inst.lambda_star.clone();
        let opts = SolveOptions {
            seed: 23,
            max_outer_iterations: 1,
            ..SolveOptions::with_k(lambda0.cardinality())
        };
        let result = run(
            &inst.observations,
            cfg.r_true,
            &opts,
            Some(&anchor),
            Some(&lambda0),
        )
        .unwrap();
        assert!(
            result.residual_history[0] <= 1e-10,
            "first-iteration residual {}",
            result.residual_history[0]
        );
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = SimConfig::fig1_desk_scale(5);
        let inst = simgen::PlantedInstance::generate(&cfg).unwrap();
        let k_star = inst.lambda_star.cardinality();
        let opts = SolveOptions {
            seed: 5,
            max_outer_iterations: 6,
            ..SolveOptions::with_k(k_star)
        };
        let a = run(&inst.observations, cfg.r_true, &opts, None, None).unwrap();
        let b = run(&inst.observations, cfg.r_true, &opts, None, None).unwrap();
        assert_eq!(a.residual_history, b.residual_history);
        assert_eq!(a.factors.u(), b.factors.u());
        assert!(sets_equal(&a.lambda_final, &b.lambda_final));
    }

    #[test]
    fn cardinality_constraint_holds_every_iteration() {
        let cfg = SimConfig::fig1_desk_scale(31);
        let inst = simgen::PlantedInstance::generate(&cfg).unwrap();
        let k = 100;
        let opts = SolveOptions {
            seed: 31,
            max_outer_iterations: 8,
            ..SolveOptions::with_k(k)
        };
        let mut sizes = Vec::new();
        run_with_observer(&inst.observations, cfg.r_true, &opts, None, None, |snap| {
            sizes.push(snap.lambda.cardinality());
        })
        .unwrap();
        assert!(!sizes.is_empty());
        assert!(sizes.iter().all(|&s| s == k));
    }

    #[test]
    fn rejects_invalid_arguments() {
        let obs = ObservationSet::from_triplets(2, 2, vec![(0, 0, 1.0)]).unwrap();
        assert!(run(&obs, 0, &SolveOptions::default(), None, None).is_err());
        assert!(run(&obs, 1, &SolveOptions::with_k(5), None, None).is_err());
    }

    #[test]
    fn full_removal_reports_ill_posed() {
        // k = |observed| removes everything: no row keeps an entry.
        let obs = ObservationSet::from_triplets(
            2,
            2,
            vec![(0, 0, 1.0), (0, 1, 2.0), (1, 0, 3.0), (1, 1, 4.0)],
        )
        .unwrap();
        let opts = SolveOptions {
            seed: 1,
            ..SolveOptions::with_k(4)
        };
        let result = run(&obs, 1, &opts, None, None).unwrap();
        assert_eq!(result.status, SolveStatus::IllPosed);
    }
}
