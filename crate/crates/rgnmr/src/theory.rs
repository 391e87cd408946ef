//! The analysis-oriented solver variant and its geometric quantities.
//!
//! The modified loop differs from the plain one in two ways: the flagged set
//! is the support of the row/column fraction-thresholding operator applied to
//! the current residual (rather than a fixed-cardinality top-k), and each
//! update is constrained to factor pairs with bounded row norms inside a
//! shrinking ball around the current iterate. The constrained step is solved
//! as ridge-regularized least squares: the ridge weight is found by bisection
//! until the ball constraint holds after row clipping. The composition
//! (ridge for the ball, then clipping for the row bound) is a heuristic
//! stand-in for the exact joint projection, which has no closed form.
//!
//! Spectral initialization builds a sparse estimate of the corruption,
//! factors the centered observation matrix with the iterative SVD, balances
//! the factors, and clips their rows.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::gn_step::{linearized, lsmr, FactorPair, InnerSolveOptions, OmegaOp};
use crate::jacobi::{jacobi_singular_values, jacobi_svd};
use crate::obs_model::{restrict, threshold_top_fraction, EntrySet, ObservationSet};
use crate::solver::{lambda_stabilized, SolveResult, SolveStatus};
use crate::svd::{truncated_svd, SparseMatVec};

/// Relative slack absorbing clip/rescale roundoff in membership tests.
const MEMBERSHIP_SLACK: f64 = 1e-12;

/// Early-stop threshold on the relative residual of the modified loop.
const MODIFIED_TOLERANCE: f64 = 1e-12;

/// Parameters of the constrained variant.
#[derive(Debug, Clone)]
pub struct TheoryParams {
    /// Incoherence bound of the ground truth (>= 1).
    pub mu: f64,
    /// Per-row/column corrupted fraction bound, in [0, 1).
    pub alpha: f64,
    /// Over-removal factor (>= 1); entries are flagged with threshold
    /// fraction `gamma * alpha`.
    pub gamma: f64,
    /// Initial squared radius of the shrinking neighborhood; iteration `t`
    /// uses `delta / 4^(t+1)`.
    pub delta: f64,
    /// Observation probability used to center the spectral estimate.
    pub p: f64,
    /// Top singular-value estimate of the ground truth; constant-factor
    /// estimates (for example from the spectral initialization) suffice.
    pub sigma1_star: Option<f64>,
    pub sigmar_star: Option<f64>,
}

impl TheoryParams {
    pub fn new(mu: f64, alpha: f64, gamma: f64, delta: f64, p: f64) -> Self {
        TheoryParams {
            mu,
            alpha,
            gamma,
            delta,
            p,
            sigma1_star: None,
            sigmar_star: None,
        }
    }

    /// Fills the singular-value estimates (and a default `delta` when the
    /// current one is not positive) from an initialization's spectrum.
    pub fn with_spectrum_from(mut self, init: &FactorPair) -> Self {
        let (s1, sr) = spectrum_estimate(init);
        self.sigma1_star = Some(s1);
        self.sigmar_star = Some(sr);
        if !(self.delta > 0.0) {
            self.delta = Self::default_delta(s1, sr);
        }
        self
    }

    /// `sigma_r / (10 kappa)` with `kappa = sigma_1 / sigma_r`.
    pub fn default_delta(sigma1: f64, sigmar: f64) -> f64 {
        sigmar / (10.0 * (sigma1 / sigmar))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 1.0) {
            return Err(Error::invalid("mu must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::invalid("alpha must lie in [0, 1)"));
        }
        if !(self.gamma >= 1.0) {
            return Err(Error::invalid("gamma must be at least 1"));
        }
        if self.gamma * self.alpha > 1.0 {
            return Err(Error::invalid("gamma * alpha must not exceed 1"));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::invalid("p must lie in (0, 1]"));
        }
        if let (Some(s1), Some(sr)) = (self.sigma1_star, self.sigmar_star) {
            if !(s1 >= sr && sr > 0.0) {
                return Err(Error::invalid("need sigma1 >= sigmar > 0"));
            }
        }
        Ok(())
    }
}

/// Singular values of the product of a factor pair, top and `r`-th.
pub fn spectrum_estimate(z: &FactorPair) -> (f64, f64) {
    let sv = product_singular_values(z);
    let s1 = sv.first().copied().unwrap_or(0.0);
    let sr = sv.last().copied().unwrap_or(0.0);
    (s1, sr)
}

/// Singular values of `U V^T` computed through the QR-core route.
pub fn product_singular_values(z: &FactorPair) -> Vec<f64> {
    let qr_u = z.u().clone().qr();
    let qr_v = z.v().clone().qr();
    let core = qr_u.r() * qr_v.r().transpose();
    jacobi_singular_values(&core)
}

/// Spectral initialization: estimate the corruption support by fraction
/// thresholding, factor the centered remainder at rank `r`, balance, and
/// clip row norms to `sqrt(mu r / n) * ||Z||_op`.
pub fn spectral_init(obs: &ObservationSet, r: usize, params: &TheoryParams) -> Result<FactorPair> {
    params.validate()?;
    spectral_init_inner(obs, r, params.alpha, params.p, Some(params.mu)).map(|(z, _)| z)
}

/// Plumbing default used by the plain solver's spectral policy: the
/// corruption fraction is `k / |observed|`, the sampling probability is the
/// empirical fill, and the clipping level is driven by the incoherence
/// measured on the truncated factors themselves.
pub fn spectral_init_auto(obs: &ObservationSet, r: usize, k: usize) -> Result<FactorPair> {
    let alpha = (k as f64 / obs.len().max(1) as f64).min(0.99);
    spectral_init_inner(obs, r, alpha, obs.p_hat(), None).map(|(z, _)| z)
}

fn spectral_init_inner(
    obs: &ObservationSet,
    r: usize,
    alpha: f64,
    p: f64,
    mu: Option<f64>,
) -> Result<(FactorPair, f64)> {
    if !(p > 0.0) {
        return Err(Error::invalid("observation probability must be positive"));
    }
    if r == 0 || r > obs.n_rows().min(obs.n_cols()) {
        return Err(Error::invalid("rank out of range"));
    }
    let (n1, n2) = (obs.n_rows(), obs.n_cols());
    let flagged = threshold_top_fraction(obs, obs.values(), alpha.min(1.0))?;
    let mask = flagged.mask();
    // Centered values: (X - S_init) / p, with S_init = X on the flagged set.
    let centered: Vec<f64> = (0..obs.len())
        .map(|pos| if mask[pos] { 0.0 } else { obs.value_of(pos) / p })
        .collect();
    let op = SparseMatVec::new(obs, &centered)?;
    let svd = truncated_svd(&op, r)?;

    let mut u = svd.u.clone();
    let mut v = svd.v.clone();
    for c in 0..r {
        let s = svd.singular_values[c].max(0.0).sqrt();
        u.column_mut(c).scale_mut(s);
        v.column_mut(c).scale_mut(s);
    }
    let sigma1 = svd.singular_values[0].max(0.0);
    let z_op = (2.0 * sigma1).sqrt();
    let mu = mu.unwrap_or_else(|| {
        // Measured incoherence of the truncated factors; keeps clipping
        // essentially inactive when no bound was supplied.
        incoherence_of_orthonormal(&svd.u, &svd.v, r)
    });
    let eta1 = (mu * r as f64 / n1 as f64).sqrt() * z_op;
    let eta2 = (mu * r as f64 / n2 as f64).sqrt() * z_op;
    let clipped = FactorPair::new(clip_rows(&u, eta1), clip_rows(&v, eta2))?;
    Ok((clipped, sigma1))
}

/// Balanced rank-`r` factorization of a stacked representation; equivalent
/// to the dense route but never forms the product.
pub fn b_svd_stacked(lin: &crate::gn_step::LinearizedEstimate, r: usize) -> Result<FactorPair> {
    crate::gn_step::project_rank_r(lin, r)
}

/// Balanced rank-`r` factorization of a dense matrix:
/// `U = U_r Sigma_r^{1/2}`, `V = V_r Sigma_r^{1/2}`.
pub fn b_svd(matrix: &DMatrix<f64>, r: usize) -> Result<FactorPair> {
    if r == 0 || r > matrix.nrows().min(matrix.ncols()) {
        return Err(Error::invalid("rank out of range"));
    }
    let svd = jacobi_svd(matrix);
    let mut u = DMatrix::zeros(matrix.nrows(), r);
    let mut v = DMatrix::zeros(matrix.ncols(), r);
    for c in 0..r {
        let s = svd.singular_values[c].max(0.0).sqrt();
        u.column_mut(c).copy_from(&(svd.u.column(c) * s));
        v.column_mut(c).copy_from(&(svd.v.column(c) * s));
    }
    FactorPair::new(u, v)
}

/// Rescales every row with norm above `eta` back to norm `eta`; rows already
/// within the budget are returned bitwise unchanged.
pub fn clip_rows(m: &DMatrix<f64>, eta: f64) -> DMatrix<f64> {
    assert!(eta >= 0.0, "clip level must be nonnegative");
    let mut out = m.clone();
    for i in 0..m.nrows() {
        let norm = m.row(i).norm();
        if norm > eta {
            let scale = eta / norm;
            out.row_mut(i).scale_mut(scale);
        }
    }
    out
}

/// The constrained loop. `init` is clipped into the row-norm set on entry,
/// and every iterate is kept inside both constraint sets by construction.
pub fn run_modified(
    obs: &ObservationSet,
    r: usize,
    params: &TheoryParams,
    max_iterations: usize,
    init: &FactorPair,
) -> Result<SolveResult> {
    params.validate()?;
    let (Some(sigma1), Some(_)) = (params.sigma1_star, params.sigmar_star) else {
        return Err(Error::invalid(
            "sigma1_star and sigmar_star estimates are required; \
             use with_spectrum_from after spectral initialization",
        ));
    };
    if init.dims() != (obs.n_rows(), obs.n_cols()) || init.rank() != r {
        return Err(Error::invalid("initialization has wrong shape"));
    }
    if max_iterations == 0 {
        return Err(Error::invalid("max_iterations must be positive"));
    }
    if !(params.delta > 0.0) {
        return Err(Error::invalid("delta must be positive"));
    }
    let (n1, n2) = (obs.n_rows(), obs.n_cols());
    let eta1 = row_bound(params.mu, r, sigma1, n1);
    let eta2 = row_bound(params.mu, r, sigma1, n2);
    let mut z = FactorPair::new(
        clip_rows(init.u(), eta1),
        clip_rows(init.v(), eta2),
    )?;

    let inner = InnerSolveOptions::default();
    let theta = params.gamma * params.alpha;
    let mut lambda_history: Vec<EntrySet> = Vec::new();
    let mut residual_history = Vec::new();
    let mut status = SolveStatus::MaxIterations;
    let mut iterations = 0;
    let mut lambda_final = EntrySet::empty(obs);

    for t in 0..max_iterations {
        let resid: Vec<f64> = obs
            .iter()
            .map(|(i, j, x)| z.product_at(i, j) - x)
            .collect();
        let lambda = threshold_top_fraction(obs, &resid, theta)?;
        let kept = restrict(obs, &lambda)?;
        if kept.is_empty() {
            status = SolveStatus::IllPosed;
            break;
        }
        lambda_history.push(lambda.clone());
        lambda_final = lambda;

        // Update residual on the kept set in the update variable w:
        // minimize ||A w - (X - L_t)|| + ridge, then clip and accept when
        // the shrinking ball constraint holds.
        let b: Vec<f64> = kept.iter().map(|(i, j, x)| x - z.product_at(i, j)).collect();
        let delta_t = params.delta / 4f64.powi(t as i32 + 1);
        let op = OmegaOp::new(&z, &kept);
        let cap = inner.cap_for(n1, n2);
        let tol = inner.relative_tolerance;
        let candidate = |damp: f64| -> FactorPair {
            let (w, _) = lsmr(&op, &b, damp, tol, tol, cap);
            let z_new = add_flat(&z, &w);
            FactorPair::new(
                clip_rows(z_new.u(), eta1),
                clip_rows(z_new.v(), eta2),
            )
            .expect("clipped factors are finite")
        };
        let dist_sq = |cand: &FactorPair| -> f64 {
            (cand.u() - z.u()).norm_squared() + (cand.v() - z.v()).norm_squared()
        };

        // Ridge weight bisection, from zero upward.
        let mut accepted = candidate(0.0);
        if dist_sq(&accepted) > delta_t {
            let bnorm = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            // ||w(damp)|| <= ||b|| / (2 damp), so this bracket is feasible.
            let mut hi = bnorm / delta_t.sqrt().max(f64::MIN_POSITIVE);
            let mut hi_cand = candidate(hi);
            let mut guard = 0;
            while dist_sq(&hi_cand) > delta_t {
                hi *= 4.0;
                hi_cand = candidate(hi);
                guard += 1;
                assert!(guard < 60, "ridge bracket search failed to terminate");
            }
            let mut lo = 0.0;
            for _ in 0..30 {
                let mid = 0.5 * (lo + hi);
                let cand = candidate(mid);
                if dist_sq(&cand) <= delta_t {
                    hi = mid;
                    hi_cand = cand;
                } else {
                    lo = mid;
                }
            }
            accepted = hi_cand;
        }

        assert!(
            in_c_neighborhood(&accepted, &z, delta_t),
            "iterate escaped the shrinking neighborhood"
        );
        assert!(
            in_b_mu(&accepted, params.mu, sigma1),
            "iterate escaped the row-norm set"
        );
        z = accepted;
        iterations = t + 1;

        let mut num = 0.0;
        let mut den = 0.0;
        for (i, j, x) in kept.iter() {
            let d = z.product_at(i, j) - x;
            num += d * d;
            den += x * x;
        }
        let rel_res = if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
        residual_history.push(rel_res);
        if rel_res <= MODIFIED_TOLERANCE {
            status = SolveStatus::Converged;
            break;
        }
    }

    let estimate_builder = linearized(&z, &z)?;
    let stabilized = lambda_stabilized(&lambda_history, 3);
    Ok(SolveResult {
        factors: z,
        estimate_builder,
        lambda_final,
        lambda_stabilized: stabilized,
        residual_history,
        iterations_used: iterations,
        status,
    })
}

fn row_bound(mu: f64, r: usize, sigma1: f64, n: usize) -> f64 {
    (3.0 * mu * r as f64 * sigma1 / n as f64).sqrt()
}

fn add_flat(z: &FactorPair, w: &[f64]) -> FactorPair {
    let (n1, n2) = z.dims();
    let r = z.rank();
    let mut u = z.u().clone();
    let mut v = z.v().clone();
    for i in 0..n1 {
        for k in 0..r {
            u[(i, k)] += w[i * r + k];
        }
    }
    for j in 0..n2 {
        for k in 0..r {
            v[(j, k)] += w[n1 * r + j * r + k];
        }
    }
    FactorPair::new(u, v).expect("finite update")
}

/// Procrustes distance between stacked factor pairs:
/// `min_P ||Z1 - Z2 P||_F` over orthogonal `P`. The optimal alignment is
/// `P = W Y^T` from the SVD `Z2^T Z1 = W Sigma Y^T`; the distance is then
/// evaluated directly, which stays accurate when the pairs nearly coincide
/// (the nuclear-norm identity cancels catastrophically there).
pub fn procrustes_distance(z1: &FactorPair, z2: &FactorPair) -> f64 {
    assert_eq!(z1.dims(), z2.dims(), "stacked shapes must match");
    assert_eq!(z1.rank(), z2.rank(), "stacked shapes must match");
    let gram = z2.u().transpose() * z1.u() + z2.v().transpose() * z1.v();
    let svd = jacobi_svd(&gram);
    // Zero-sigma columns of W are free directions of the alignment; complete
    // them to an orthonormal basis so P stays orthogonal.
    let w = complete_orthonormal(svd.u.clone());
    let p = &w * svd.v.transpose();
    let du = (z1.u() - z2.u() * &p).norm_squared();
    let dv = (z1.v() - z2.v() * &p).norm_squared();
    (du + dv).sqrt()
}

/// Replaces zero columns of a square matrix with unit vectors orthogonal to
/// every other column. Nonzero columns are assumed orthonormal already.
fn complete_orthonormal(mut w: DMatrix<f64>) -> DMatrix<f64> {
    let r = w.ncols();
    for c in 0..r {
        if w.column(c).norm() > 0.5 {
            continue;
        }
        // Try canonical directions; by dimension count one of them has a
        // usable component outside the span of the other columns.
        let mut best: Option<(f64, Vec<f64>)> = None;
        for axis in 0..r {
            let mut cand = vec![0.0; r];
            cand[axis] = 1.0;
            for other in 0..r {
                if other == c {
                    continue;
                }
                let col = w.column(other);
                let coef: f64 = (0..r).map(|i| cand[i] * col[i]).sum();
                for i in 0..r {
                    cand[i] -= coef * col[i];
                }
            }
            let norm: f64 = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if best.as_ref().is_none_or(|(n, _)| norm > *n) {
                best = Some((norm, cand));
            }
        }
        let (norm, cand) = best.expect("r > 0");
        debug_assert!(norm > 1e-8, "no orthogonal completion found");
        for i in 0..r {
            w[(i, c)] = cand[i] / norm;
        }
    }
    w
}

/// `||U^T U - V^T V||_F`, the imbalance of a factor pair.
pub fn balance_gap(z: &FactorPair) -> f64 {
    (z.u().transpose() * z.u() - z.v().transpose() * z.v()).norm()
}

/// Incoherence of a dense matrix with numerical rank at most `r`:
/// `max(n1/r max_i ||U(i,.)||^2, n2/r max_j ||V(j,.)||^2)` over the thin
/// SVD factors.
pub fn incoherence_of(l: &DMatrix<f64>, r: usize) -> f64 {
    let svd = jacobi_svd(l);
    let keep = r.min(svd.singular_values.len());
    incoherence_of_orthonormal(
        &svd.u.columns(0, keep).into_owned(),
        &svd.v.columns(0, keep).into_owned(),
        r,
    )
}

/// Incoherence computed from a factor-pair representation without
/// densifying the product.
pub fn incoherence_of_factors(z: &FactorPair, r: usize) -> f64 {
    let qr_u = z.u().clone().qr();
    let qr_v = z.v().clone().qr();
    let core = qr_u.r() * qr_v.r().transpose();
    let svd = jacobi_svd(&core);
    let keep = r.min(svd.singular_values.len());
    let u = qr_u.q() * svd.u.columns(0, keep);
    let v = qr_v.q() * svd.v.columns(0, keep);
    incoherence_of_orthonormal(&u, &v, r)
}

fn incoherence_of_orthonormal(u: &DMatrix<f64>, v: &DMatrix<f64>, r: usize) -> f64 {
    let max_row_sq = |m: &DMatrix<f64>| -> f64 {
        (0..m.nrows())
            .map(|i| m.row(i).norm_squared())
            .fold(0.0, f64::max)
    };
    let n1 = u.nrows() as f64;
    let n2 = v.nrows() as f64;
    (n1 * max_row_sq(u) / r as f64).max(n2 * max_row_sq(v) / r as f64)
}

/// Membership in the bounded-row-norm set (with roundoff slack, so factors
/// produced by [`clip_rows`] always qualify).
pub fn in_b_mu(z: &FactorPair, mu: f64, sigma1_star: f64) -> bool {
    let r = z.rank();
    let (n1, n2) = z.dims();
    let eta1 = row_bound(mu, r, sigma1_star, n1) * (1.0 + MEMBERSHIP_SLACK);
    let eta2 = row_bound(mu, r, sigma1_star, n2) * (1.0 + MEMBERSHIP_SLACK);
    (0..n1).all(|i| z.u().row(i).norm() <= eta1) && (0..n2).all(|j| z.v().row(j).norm() <= eta2)
}

/// Membership in the `delta_t` neighborhood of an anchor pair.
pub fn in_c_neighborhood(z: &FactorPair, anchor: &FactorPair, delta_t: f64) -> bool {
    let d = (z.u() - anchor.u()).norm_squared() + (z.v() - anchor.v()).norm_squared();
    d <= delta_t * (1.0 + MEMBERSHIP_SLACK)
}

/// `||U V^T - L*||_F`.
pub fn error_to(z: &FactorPair, l_star: &DMatrix<f64>) -> f64 {
    (z.product_dense() - l_star).norm()
}
