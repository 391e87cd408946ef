//! The linearized completion step.
//!
//! Near a pair of factor matrices `(U_t, V_t)`, the product `U V^T` is
//! replaced by its linearization `U_t V^T + U V_t^T - U_t V_t^T`, which makes
//! the masked fitting subproblem linear in the unknown pair `(U, V)`. This
//! module provides the matrix-free forward/adjoint pair of that linear map
//! restricted to the observed entries, the minimal-norm least-squares solve,
//! and the final rank-`r` projection of the linearized estimate.
//!
//! The least-squares step is solved by an LSMR iteration started from the
//! zero factor pair. Starting from zero is what makes the iteration converge
//! to the minimal-norm solution on rank-deficient systems; forming the normal
//! equations explicitly would lose that guarantee and is not offered.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::obs_model::ObservationSet;

/// A pair `(U, V)` of dense factor matrices with a shared inner dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    u: DMatrix<f64>,
    v: DMatrix<f64>,
}

impl FactorPair {
    pub fn new(u: DMatrix<f64>, v: DMatrix<f64>) -> Result<Self> {
        if u.ncols() != v.ncols() || u.ncols() == 0 {
            return Err(Error::invalid(format!(
                "factor inner dimensions disagree: {} vs {}",
                u.ncols(),
                v.ncols()
            )));
        }
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite factor entry"));
        }
        Ok(FactorPair { u, v })
    }

    pub fn zeros(n1: usize, n2: usize, r: usize) -> Self {
        FactorPair {
            u: DMatrix::zeros(n1, r),
            v: DMatrix::zeros(n2, r),
        }
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// Shared inner dimension of the two factors.
    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    /// `(n_rows, n_cols)` of the represented product.
    pub fn dims(&self) -> (usize, usize) {
        (self.u.nrows(), self.v.nrows())
    }

    /// `||U||_F^2 + ||V||_F^2`.
    pub fn norm_sq(&self) -> f64 {
        self.u.iter().chain(self.v.iter()).map(|x| x * x).sum()
    }

    /// Value of the product `U V^T` at `(i, j)`.
    pub fn product_at(&self, i: usize, j: usize) -> f64 {
        self.u.row(i).dot(&self.v.row(j))
    }

    /// Densifies the product; intended for metrics and small instances.
    pub fn product_dense(&self) -> DMatrix<f64> {
        &self.u * self.v.transpose()
    }

    /// Row-major stacked layout `[U rows | V rows]` used by the iterative
    /// solver.
    pub(crate) fn to_flat(&self) -> Vec<f64> {
        let (n1, n2) = self.dims();
        let r = self.rank();
        let mut flat = Vec::with_capacity((n1 + n2) * r);
        for i in 0..n1 {
            for k in 0..r {
                flat.push(self.u[(i, k)]);
            }
        }
        for j in 0..n2 {
            for k in 0..r {
                flat.push(self.v[(j, k)]);
            }
        }
        flat
    }

    pub(crate) fn from_flat(n1: usize, n2: usize, r: usize, flat: &[f64]) -> Self {
        debug_assert_eq!(flat.len(), (n1 + n2) * r);
        let u = DMatrix::from_fn(n1, r, |i, k| flat[i * r + k]);
        let v = DMatrix::from_fn(n2, r, |j, k| flat[n1 * r + j * r + k]);
        FactorPair { u, v }
    }
}

/// Stacked representation `A B^T` of the linearized estimate.
///
/// Built from consecutive iterates `(Z_t, Z_{t+1})` as
/// `A = [U_t | U_{t+1} - U_t]`, `B = [V_{t+1} | V_t]`, so that
/// `A B^T = U_t V_{t+1}^T + U_{t+1} V_t^T - U_t V_t^T`.
#[derive(Debug, Clone)]
pub struct LinearizedEstimate {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl LinearizedEstimate {
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// Number of stacked columns (twice the factor rank).
    pub fn stacked_cols(&self) -> usize {
        self.a.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.a.nrows(), self.b.nrows())
    }

    pub fn value_at(&self, i: usize, j: usize) -> f64 {
        self.a.row(i).dot(&self.b.row(j))
    }

    /// Values of `A B^T` on the observed positions, in entry order.
    pub fn values_on(&self, obs: &ObservationSet) -> Vec<f64> {
        let s = self.stacked_cols();
        let a = row_major(&self.a);
        let b = row_major(&self.b);
        obs.rows()
            .iter()
            .zip(obs.cols().iter())
            .map(|(&i, &j)| dot(&a[i as usize * s..][..s], &b[j as usize * s..][..s]))
            .collect()
    }

    pub fn dense(&self) -> DMatrix<f64> {
        &self.a * self.b.transpose()
    }
}

/// Options for the inner LSMR iteration.
///
/// `max_inner_iterations = None` selects the default cap of
/// `50 * (n_rows + n_cols)`. The `seed` is unused by the deterministic
/// solver and reserved for future randomized variants.
#[derive(Debug, Clone)]
pub struct InnerSolveOptions {
    pub max_inner_iterations: Option<usize>,
    pub relative_tolerance: f64,
    pub seed: u64,
}

impl Default for InnerSolveOptions {
    fn default() -> Self {
        InnerSolveOptions {
            max_inner_iterations: None,
            relative_tolerance: 1e-14,
            seed: 0,
        }
    }
}

impl InnerSolveOptions {
    pub(crate) fn cap_for(&self, n1: usize, n2: usize) -> usize {
        self.max_inner_iterations.unwrap_or(50 * (n1 + n2))
    }
}

/// Why the inner iteration stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerStop {
    /// Residual satisfied the consistent-system test.
    Residual,
    /// Normal-equation residual dropped below the tolerance.
    NormalResidual,
    /// Either test satisfied at machine precision.
    MachinePrecision,
    /// Iteration cap reached.
    IterationLimit,
    /// The normal-equation residual stopped improving: the rounding floor of
    /// this system sits above the requested tolerance.
    Stagnation,
    /// The right-hand side was zero (or already orthogonal to the range).
    TrivialSolution,
}

/// Diagnostics from one inner solve.
#[derive(Debug, Clone)]
pub struct InnerReport {
    pub iterations: usize,
    pub residual_norm: f64,
    pub normal_residual_norm: f64,
    pub stop: InnerStop,
}

/// Evaluates the linear map `z = (U, V) -> P_omega(U_t V^T + U V_t^T)`
/// entrywise on the observed positions.
pub fn apply_forward(
    anchor: &FactorPair,
    z: &FactorPair,
    obs: &ObservationSet,
) -> Result<Vec<f64>> {
    check_anchor(anchor, obs)?;
    if z.dims() != anchor.dims() || z.rank() != anchor.rank() {
        return Err(Error::invalid("factor pair shape mismatch"));
    }
    let op = OmegaOp::new(anchor, obs);
    let x = z.to_flat();
    let mut out = vec![0.0; obs.len()];
    op.forward(&x, &mut out);
    Ok(out)
}

/// Adjoint of [`apply_forward`]: scatters residuals back to a factor pair,
/// `G_U = P*(res) V_t`, `G_V = P*(res)^T U_t`.
pub fn apply_adjoint(
    anchor: &FactorPair,
    residuals: &[f64],
    obs: &ObservationSet,
) -> Result<FactorPair> {
    check_anchor(anchor, obs)?;
    if residuals.len() != obs.len() {
        return Err(Error::invalid("residual sequence length mismatch"));
    }
    let op = OmegaOp::new(anchor, obs);
    let mut out = vec![0.0; op.ncols()];
    op.adjoint(residuals, &mut out);
    let (n1, n2) = anchor.dims();
    Ok(FactorPair::from_flat(n1, n2, anchor.rank(), &out))
}

/// Minimal-Frobenius-norm minimizer of `||apply_forward(anchor, z) - rhs||`
/// over factor pairs `z`, computed by LSMR started from the zero pair.
pub fn solve_min_norm(
    anchor: &FactorPair,
    obs_minus_lambda: &ObservationSet,
    rhs: &[f64],
    opts: &InnerSolveOptions,
) -> Result<FactorPair> {
    solve_min_norm_damped(anchor, obs_minus_lambda, rhs, 0.0, opts).map(|(z, _)| z)
}

/// As [`solve_min_norm`], with a ridge weight `damp` on `||z||` and the
/// solve diagnostics. `damp = 0` recovers the plain minimal-norm solve.
pub(crate) fn solve_min_norm_damped(
    anchor: &FactorPair,
    obs_minus_lambda: &ObservationSet,
    rhs: &[f64],
    damp: f64,
    opts: &InnerSolveOptions,
) -> Result<(FactorPair, InnerReport)> {
    check_anchor(anchor, obs_minus_lambda)?;
    if obs_minus_lambda.is_empty() {
        return Err(Error::IllPosed("empty observation set".into()));
    }
    if rhs.len() != obs_minus_lambda.len() {
        return Err(Error::invalid("rhs length mismatch"));
    }
    if rhs.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite rhs"));
    }
    if !(opts.relative_tolerance > 0.0) {
        return Err(Error::invalid("relative_tolerance must be positive"));
    }
    let (n1, n2) = anchor.dims();
    let op = OmegaOp::new(anchor, obs_minus_lambda);
    let (x, report) = lsmr(
        &op,
        rhs,
        damp,
        opts.relative_tolerance,
        opts.relative_tolerance,
        opts.cap_for(n1, n2),
    );
    Ok((FactorPair::from_flat(n1, n2, anchor.rank(), &x), report))
}

/// Builds the stacked representation of the step's linearized estimate
/// from two consecutive iterates.
pub fn linearized(zt: &FactorPair, zt1: &FactorPair) -> Result<LinearizedEstimate> {
    if zt.dims() != zt1.dims() || zt.rank() != zt1.rank() {
        return Err(Error::invalid("iterate shape mismatch"));
    }
    let r = zt.rank();
    let (n1, n2) = zt.dims();
    let mut a = DMatrix::zeros(n1, 2 * r);
    let mut b = DMatrix::zeros(n2, 2 * r);
    a.view_mut((0, 0), (n1, r)).copy_from(zt.u());
    a.view_mut((0, r), (n1, r))
        .copy_from(&(zt1.u() - zt.u()));
    b.view_mut((0, 0), (n2, r)).copy_from(zt1.v());
    b.view_mut((0, r), (n2, r)).copy_from(zt.v());
    Ok(LinearizedEstimate { a, b })
}

/// Best rank-`r` approximation of the stacked estimate, returned as a
/// balanced factor pair `U = Q_a W Sigma^{1/2}`, `V = Q_b Y Sigma^{1/2}`.
pub fn project_rank_r(lin: &LinearizedEstimate, r: usize) -> Result<FactorPair> {
    if r == 0 {
        return Err(Error::invalid("projection rank must be positive"));
    }
    if r > lin.stacked_cols() {
        return Err(Error::invalid(format!(
            "projection rank {r} exceeds stacked width {}",
            lin.stacked_cols()
        )));
    }
    let (n1, n2) = lin.dims();
    let qr_a = lin.a.clone().qr();
    let qr_b = lin.b.clone().qr();
    let core = qr_a.r() * qr_b.r().transpose();
    let svd = crate::jacobi::jacobi_svd(&core);
    let keep = r.min(svd.singular_values.len());

    let mut u = DMatrix::zeros(n1, r);
    let mut v = DMatrix::zeros(n2, r);
    let q_a = qr_a.q();
    let q_b = qr_b.q();
    for k in 0..keep {
        let sigma = svd.singular_values[k].max(0.0);
        let scale = sigma.sqrt();
        let mut ucol = &q_a * svd.u.column(k);
        let mut vcol = &q_b * svd.v.column(k);
        if leading_sign_negative(ucol.as_slice()) {
            ucol.neg_mut();
            vcol.neg_mut();
        }
        u.column_mut(k).copy_from(&(ucol * scale));
        v.column_mut(k).copy_from(&(vcol * scale));
    }
    FactorPair::new(u, v)
}

/// Sign convention: the leading nonzero entry of each left singular vector
/// is made nonnegative.
pub(crate) fn leading_sign_negative(col: &[f64]) -> bool {
    col.iter().find(|&&x| x != 0.0).is_some_and(|&x| x < 0.0)
}

fn check_anchor(anchor: &FactorPair, obs: &ObservationSet) -> Result<()> {
    if anchor.dims() != (obs.n_rows(), obs.n_cols()) {
        return Err(Error::invalid(format!(
            "anchor is {:?}, observations are {}x{}",
            anchor.dims(),
            obs.n_rows(),
            obs.n_cols()
        )));
    }
    Ok(())
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (n, c) = (m.nrows(), m.ncols());
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        for k in 0..c {
            out.push(m[(i, k)]);
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Matrix-free linear operators over the observed positions.
pub(crate) trait LinOp {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn forward(&self, x: &[f64], out: &mut [f64]);
    fn adjoint(&self, y: &[f64], out: &mut [f64]);
}

/// The Gauss-Newton subproblem operator with anchor `(U_t, V_t)`, acting on
/// flat row-major stacked factor pairs.
pub(crate) struct OmegaOp<'a> {
    rows: &'a [u32],
    cols: &'a [u32],
    ut: Vec<f64>,
    vt: Vec<f64>,
    n1: usize,
    n2: usize,
    r: usize,
}

impl<'a> OmegaOp<'a> {
    pub(crate) fn new(anchor: &FactorPair, obs: &'a ObservationSet) -> Self {
        let (n1, n2) = anchor.dims();
        OmegaOp {
            rows: obs.rows(),
            cols: obs.cols(),
            ut: row_major(anchor.u()),
            vt: row_major(anchor.v()),
            n1,
            n2,
            r: anchor.rank(),
        }
    }
}

impl LinOp for OmegaOp<'_> {
    fn nrows(&self) -> usize {
        self.rows.len()
    }

    fn ncols(&self) -> usize {
        (self.n1 + self.n2) * self.r
    }

    fn forward(&self, x: &[f64], out: &mut [f64]) {
        let r = self.r;
        let (xu, xv) = x.split_at(self.n1 * r);
        for (m, (&i, &j)) in self.rows.iter().zip(self.cols.iter()).enumerate() {
            let i = i as usize * r;
            let j = j as usize * r;
            out[m] = dot(&self.ut[i..i + r], &xv[j..j + r]) + dot(&xu[i..i + r], &self.vt[j..j + r]);
        }
    }

    fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        let r = self.r;
        out.fill(0.0);
        let (gu, gv) = out.split_at_mut(self.n1 * r);
        for (m, (&i, &j)) in self.rows.iter().zip(self.cols.iter()).enumerate() {
            let w = y[m];
            let i = i as usize * r;
            let j = j as usize * r;
            for k in 0..r {
                gu[i + k] += w * self.vt[j + k];
                gv[j + k] += w * self.ut[i + k];
            }
        }
    }
}

/// LSMR for `min ||A x - b||^2 + damp^2 ||x||^2`, started from `x = 0`.
///
/// Follows the Fong-Saunders recurrences. With `damp = 0` and a
/// rank-deficient `A`, the zero start makes the limit the pseudoinverse
/// (minimal-norm) solution. Terminates on the consistent-system test
/// `||r|| <= btol ||b|| + atol ||A|| ||x||`, on the normal-equation test
/// `||A^T r|| <= atol ||A|| ||r||`, or at the iteration cap.
///
/// The right Lanczos vectors are kept fully reorthogonalized (one-sided, the
/// short side); without this the basis degrades on near-rank-deficient
/// systems and the iterate drifts off the minimal-norm solution.
pub(crate) fn lsmr<L: LinOp>(
    op: &L,
    b: &[f64],
    damp: f64,
    atol: f64,
    btol: f64,
    max_iterations: usize,
) -> (Vec<f64>, InnerReport) {
    let m = op.nrows();
    let n = op.ncols();
    debug_assert_eq!(b.len(), m);

    let mut x = vec![0.0; n];
    let mut u = b.to_vec();
    let mut v = vec![0.0; n];
    let mut tmp_m = vec![0.0; m];
    let mut tmp_n = vec![0.0; n];
    // Full reorthogonalization up to this many vectors; beyond it the cost
    // would grow quadratically with the iteration count, so long solves
    // continue with the frozen basis. Small systems (including every dense
    // oracle comparison) stay fully reorthogonalized.
    let reorth_cap = n.min(256);
    let mut v_basis: Vec<Vec<f64>> = Vec::new();

    let mut beta = norm2(&u);
    let normb = beta;
    if beta == 0.0 {
        return (
            x,
            InnerReport {
                iterations: 0,
                residual_norm: 0.0,
                normal_residual_norm: 0.0,
                stop: InnerStop::TrivialSolution,
            },
        );
    }
    scale(&mut u, 1.0 / beta);
    op.adjoint(&u, &mut v);
    let mut alpha = norm2(&v);
    if alpha == 0.0 {
        // b is orthogonal to the range; x = 0 is the minimal-norm solution.
        return (
            x,
            InnerReport {
                iterations: 0,
                residual_norm: normb,
                normal_residual_norm: 0.0,
                stop: InnerStop::TrivialSolution,
            },
        );
    }
    scale(&mut v, 1.0 / alpha);
    v_basis.push(v.clone());

    let mut zetabar = alpha * beta;
    let mut alphabar = alpha;
    let mut rho = 1.0;
    let mut rhobar = 1.0;
    let mut cbar = 1.0;
    let mut sbar = 0.0;

    let mut h = v.clone();
    let mut hbar = vec![0.0; n];

    // State for the ||r|| estimate.
    let mut betadd = beta;
    let mut betad = 0.0;
    let mut rhodold = 1.0;
    let mut tautildeold = 0.0;
    let mut thetatilde = 0.0;
    let mut zeta = 0.0;
    let mut d = 0.0;

    let mut norm_a2 = alpha * alpha;

    let mut iterations = 0;
    let mut normr = beta;
    let mut normar = alpha * beta;
    let mut best_normar = f64::INFINITY;
    let mut best_normar_iteration = 0;
    let stop;

    loop {
        if iterations >= max_iterations {
            stop = InnerStop::IterationLimit;
            break;
        }
        iterations += 1;

        // Golub-Kahan bidiagonalization step.
        op.forward(&v, &mut tmp_m);
        for (ui, ti) in u.iter_mut().zip(tmp_m.iter()) {
            *ui = ti - alpha * *ui;
        }
        beta = norm2(&u);
        if beta > 0.0 {
            scale(&mut u, 1.0 / beta);
            op.adjoint(&u, &mut tmp_n);
            for (vi, ti) in v.iter_mut().zip(tmp_n.iter()) {
                *vi = ti - beta * *vi;
            }
            if v_basis.len() < reorth_cap {
                for basis_v in &v_basis {
                    let coeff: f64 = v.iter().zip(basis_v.iter()).map(|(a, c)| a * c).sum();
                    for (vi, bi) in v.iter_mut().zip(basis_v.iter()) {
                        *vi -= coeff * bi;
                    }
                }
            }
            alpha = norm2(&v);
            if alpha > 0.0 {
                scale(&mut v, 1.0 / alpha);
                if v_basis.len() < reorth_cap {
                    v_basis.push(v.clone());
                }
            }
        }

        // Rotation eliminating the damping term.
        let alphahat = (alphabar * alphabar + damp * damp).sqrt();
        let chat = alphabar / alphahat;
        let shat = damp / alphahat;

        // Rotation turning the lower bidiagonal to upper.
        let rhoold = rho;
        rho = (alphahat * alphahat + beta * beta).sqrt();
        let c = alphahat / rho;
        let s = beta / rho;
        let thetanew = s * alpha;
        alphabar = c * alpha;

        // Second rotation for the LSMR subproblem.
        let rhobarold = rhobar;
        let zetaold = zeta;
        let thetabar = sbar * rho;
        rhobar = ((cbar * rho) * (cbar * rho) + thetanew * thetanew).sqrt();
        cbar = cbar * rho / rhobar;
        sbar = thetanew / rhobar;
        zeta = cbar * zetabar;
        zetabar = -sbar * zetabar;

        // Update search directions and the solution.
        let hbar_scale = thetabar * rho / (rhoold * rhobarold);
        for k in 0..n {
            hbar[k] = h[k] - hbar_scale * hbar[k];
        }
        let x_scale = zeta / (rho * rhobar);
        for k in 0..n {
            x[k] += x_scale * hbar[k];
        }
        let h_scale = thetanew / rho;
        for k in 0..n {
            h[k] = v[k] - h_scale * h[k];
        }

        // Residual-norm estimate.
        let betaacute = chat * betadd;
        let betacheck = -shat * betadd;
        let betahat = c * betaacute;
        betadd = -s * betaacute;
        let thetatildeold = thetatilde;
        let rhotildeold = (rhodold * rhodold + thetabar * thetabar).sqrt();
        let ctildeold = rhodold / rhotildeold;
        let stildeold = thetabar / rhotildeold;
        thetatilde = stildeold * rhobar;
        rhodold = ctildeold * rhobar;
        betad = -stildeold * betad + ctildeold * betahat;
        tautildeold = (zetaold - thetatildeold * tautildeold) / rhotildeold;
        let taud = (zeta - thetatilde * tautildeold) / rhodold;
        d += betacheck * betacheck;
        normr = (d + (betad - taud) * (betad - taud) + betadd * betadd).sqrt();

        norm_a2 += beta * beta;
        let norm_a = norm_a2.sqrt();
        norm_a2 += alpha * alpha;

        normar = zetabar.abs();
        let normx = norm2(&x);

        let test1 = normr / normb;
        let test2 = if normr > 0.0 {
            normar / (norm_a * normr)
        } else {
            0.0
        };
        let t1 = test1 / (1.0 + norm_a * normx / normb);
        let rtol = btol + atol * norm_a * normx / normb;

        if 1.0 + test2 <= 1.0 || 1.0 + t1 <= 1.0 {
            stop = InnerStop::MachinePrecision;
            break;
        }
        if test2 <= atol {
            stop = InnerStop::NormalResidual;
            break;
        }
        if test1 <= rtol {
            stop = InnerStop::Residual;
            break;
        }
        if normar < best_normar * 0.9 {
            best_normar = normar;
            best_normar_iteration = iterations;
        } else if iterations - best_normar_iteration >= 100 {
            stop = InnerStop::Stagnation;
            break;
        }
    }

    (
        x,
        InnerReport {
            iterations,
            residual_norm: normr,
            normal_residual_norm: normar,
            stop,
        },
    )
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn scale(x: &mut [f64], s: f64) {
    for v in x.iter_mut() {
        *v *= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_pair(rng: &mut StdRng, n1: usize, n2: usize, r: usize) -> FactorPair {
        let u = DMatrix::from_fn(n1, r, |_, _| rng.random_range(-1.0..1.0));
        let v = DMatrix::from_fn(n2, r, |_, _| rng.random_range(-1.0..1.0));
        FactorPair::new(u, v).unwrap()
    }

    fn random_obs(rng: &mut StdRng, n1: usize, n2: usize, m: usize) -> ObservationSet {
        let mut cells: Vec<(usize, usize)> = (0..n1)
            .flat_map(|i| (0..n2).map(move |j| (i, j)))
            .collect();
        for i in (1..cells.len()).rev() {
            let j = rng.random_range(0..=i);
            cells.swap(i, j);
        }
        cells.truncate(m);
        ObservationSet::from_triplets(
            n1,
            n2,
            cells
                .into_iter()
                .map(|(i, j)| (i, j, rng.random_range(-1.0..1.0))),
        )
        .unwrap()
    }

    /// Dense assembly of the forward operator: an |omega| x (n1+n2)r matrix
    /// acting on the flat stacked layout. Independent route used as the
    /// oracle for the matrix-free code and the pseudoinverse comparisons.
    fn dense_operator(anchor: &FactorPair, obs: &ObservationSet) -> DMatrix<f64> {
        let (n1, _n2) = anchor.dims();
        let r = anchor.rank();
        let mut a = DMatrix::zeros(obs.len(), (n1 + anchor.v().nrows()) * r);
        for p in 0..obs.len() {
            let (i, j) = (obs.row_of(p), obs.col_of(p));
            for k in 0..r {
                // coefficient of U[i,k] is V_t[j,k]; of V[j,k] is U_t[i,k].
                a[(p, i * r + k)] = anchor.v()[(j, k)];
                a[(p, n1 * r + j * r + k)] = anchor.u()[(i, k)];
            }
        }
        a
    }

    #[test]
    fn forward_zero_and_plugin_identity() {
        let mut rng = StdRng::seed_from_u64(1);
        let anchor = random_pair(&mut rng, 4, 3, 2);
        let obs = random_obs(&mut rng, 4, 3, 9);
        let zero = FactorPair::zeros(4, 3, 2);
        assert_eq!(apply_forward(&anchor, &zero, &obs).unwrap(), vec![0.0; 9]);
        let doubled = apply_forward(&anchor, &anchor, &obs).unwrap();
        for (p, val) in doubled.iter().enumerate() {
            let expect = 2.0 * anchor.product_at(obs.row_of(p), obs.col_of(p));
            assert_relative_eq!(*val, expect, max_relative = 1e-13);
        }
    }

    #[test]
    fn forward_matches_dense_assembly() {
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..20 {
            let anchor = random_pair(&mut rng, 4, 3, 2);
            let z = random_pair(&mut rng, 4, 3, 2);
            let obs = random_obs(&mut rng, 4, 3, 7);
            let got = apply_forward(&anchor, &z, &obs).unwrap();
            let dense = dense_operator(&anchor, &obs);
            let x = nalgebra::DVector::from_vec(z.to_flat());
            let expect = dense * x;
            for p in 0..obs.len() {
                assert_relative_eq!(got[p], expect[p], max_relative = 1e-12, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn adjoint_zero_and_one_hot() {
        let mut rng = StdRng::seed_from_u64(3);
        let anchor = random_pair(&mut rng, 5, 4, 2);
        let obs = ObservationSet::from_triplets(5, 4, vec![(2, 1, 0.5)]).unwrap();
        let g = apply_adjoint(&anchor, &[1.0], &obs).unwrap();
        for i in 0..5 {
            for k in 0..2 {
                let expect = if i == 2 { anchor.v()[(1, k)] } else { 0.0 };
                assert_eq!(g.u()[(i, k)], expect);
            }
        }
        for j in 0..4 {
            for k in 0..2 {
                let expect = if j == 1 { anchor.u()[(2, k)] } else { 0.0 };
                assert_eq!(g.v()[(j, k)], expect);
            }
        }
        let zero = apply_adjoint(&anchor, &[0.0], &obs).unwrap();
        assert_eq!(zero.norm_sq(), 0.0);
    }

    #[test]
    fn adjoint_identity_holds() {
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..100 {
            let n1 = rng.random_range(2..=6);
            let n2 = rng.random_range(2..=6);
            let r = rng.random_range(1..=3);
            let m = rng.random_range(1..=n1 * n2);
            let anchor = random_pair(&mut rng, n1, n2, r);
            let z = random_pair(&mut rng, n1, n2, r);
            let obs = random_obs(&mut rng, n1, n2, m);
            let w: Vec<f64> = (0..obs.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fz = apply_forward(&anchor, &z, &obs).unwrap();
            let ftw = apply_adjoint(&anchor, &w, &obs).unwrap();
            let lhs: f64 = fz.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
            let rhs: f64 = z
                .to_flat()
                .iter()
                .zip(ftw.to_flat().iter())
                .map(|(a, b)| a * b)
                .sum();
            let scale = lhs.abs().max(rhs.abs()).max(1e-30);
            assert!(
                (lhs - rhs).abs() / scale <= 1e-11,
                "adjoint identity violated: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn min_norm_identity_fixed_point() {
        // Fully observed X = I with U_t = V_t = I: the minimal-norm solution
        // of U + V^T = 2I is U = V = I.
        let n = 3;
        let eye = DMatrix::<f64>::identity(n, n);
        let anchor = FactorPair::new(eye.clone(), eye.clone()).unwrap();
        let obs = ObservationSet::from_triplets(
            n,
            n,
            (0..n).flat_map(|i| (0..n).map(move |j| (i, j, if i == j { 1.0 } else { 0.0 }))),
        )
        .unwrap();
        // rhs = X + U_t V_t^T on the mask.
        let rhs: Vec<f64> = obs
            .iter()
            .map(|(i, j, x)| x + anchor.product_at(i, j))
            .collect();
        let z = solve_min_norm(&anchor, &obs, &rhs, &InnerSolveOptions::default()).unwrap();
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_relative_eq!(z.u()[(i, j)], expect, epsilon = 1e-10);
                assert_relative_eq!(z.v()[(i, j)], expect, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn min_norm_zero_rhs_gives_zero() {
        let mut rng = StdRng::seed_from_u64(5);
        let anchor = random_pair(&mut rng, 4, 4, 2);
        let obs = random_obs(&mut rng, 4, 4, 10);
        let z = solve_min_norm(&anchor, &obs, &[0.0; 10], &InnerSolveOptions::default())
            .unwrap();
        assert_eq!(z.norm_sq(), 0.0);
    }

    #[test]
    fn min_norm_rejects_bad_input() {
        let mut rng = StdRng::seed_from_u64(6);
        let anchor = random_pair(&mut rng, 3, 3, 1);
        let empty = ObservationSet::from_triplets(3, 3, vec![(0, 0, 1.0)])
            .and_then(|o| crate::obs_model::restrict(&o, &crate::obs_model::top_k_entries(&o, o.values(), 1).unwrap()))
            .unwrap();
        assert!(matches!(
            solve_min_norm(&anchor, &empty, &[], &InnerSolveOptions::default()),
            Err(Error::IllPosed(_))
        ));
        let obs = random_obs(&mut rng, 3, 3, 4);
        assert!(solve_min_norm(&anchor, &obs, &[f64::NAN; 4], &InnerSolveOptions::default()).is_err());
        assert!(solve_min_norm(&anchor, &obs, &[1.0; 3], &InnerSolveOptions::default()).is_err());
    }

    #[test]
    fn min_norm_matches_dense_pseudoinverse() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..40 {
            let n1 = rng.random_range(2..=5);
            let n2 = rng.random_range(2..=5);
            let r = rng.random_range(1..=2);
            let m = rng.random_range(2..=n1 * n2);
            let anchor = random_pair(&mut rng, n1, n2, r);
            let obs = random_obs(&mut rng, n1, n2, m);
            let rhs: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let z = solve_min_norm(&anchor, &obs, &rhs, &InnerSolveOptions::default()).unwrap();
            let a = dense_operator(&anchor, &obs);
            let x_star =
                nalgebra::DVector::from_vec(crate::jacobi::pinv_solve(&a, &rhs, 1e-10));
            let b = nalgebra::DVector::from_vec(rhs.clone());
            let x = nalgebra::DVector::from_vec(z.to_flat());
            let res = (&a * &x - &b).norm();
            let res_star = (&a * &x_star - &b).norm();
            let bnorm = b.norm();
            assert!(
                res <= res_star + 1e-8 * bnorm,
                "residual {res} vs oracle {res_star}"
            );
            assert!(
                x.norm() <= x_star.norm() * (1.0 + 1e-6) + 1e-12,
                "norm {} vs oracle {}",
                x.norm(),
                x_star.norm()
            );
        }
    }

    #[test]
    fn min_norm_fixed_point_on_exact_data() {
        // Anchor factorizes L*; rhs built from uncorrupted entries of L*.
        let mut rng = StdRng::seed_from_u64(8);
        for _ in 0..10 {
            let (n1, n2, r) = (8, 6, 2);
            let truth = random_pair(&mut rng, n1, n2, r);
            let obs_pattern = random_obs(&mut rng, n1, n2, 36);
            let obs = obs_pattern
                .with_values(
                    (0..obs_pattern.len())
                        .map(|p| truth.product_at(obs_pattern.row_of(p), obs_pattern.col_of(p)))
                        .collect(),
                )
                .unwrap();
            let rhs: Vec<f64> = obs
                .iter()
                .map(|(i, j, x)| x + truth.product_at(i, j))
                .collect();
            let z = solve_min_norm(&truth, &obs, &rhs, &InnerSolveOptions::default()).unwrap();
            let fz = apply_forward(&truth, &z, &obs).unwrap();
            let err: f64 = fz
                .iter()
                .zip(rhs.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let rhs_norm: f64 = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err <= 1e-9 * rhs_norm, "fixed point violated: {err}");
        }
    }

    #[test]
    fn linearized_substitution_cases() {
        let mut rng = StdRng::seed_from_u64(9);
        let zt = random_pair(&mut rng, 5, 4, 2);
        let zt1 = random_pair(&mut rng, 5, 4, 2);
        let same = linearized(&zt, &zt).unwrap();
        let prod = zt.product_dense();
        assert_relative_eq!(same.dense(), prod, epsilon = 1e-13);
        let zero = FactorPair::zeros(5, 4, 2);
        let from_zero = linearized(&zero, &zt1).unwrap();
        assert_eq!(from_zero.dense().norm(), 0.0);
    }

    #[test]
    fn linearized_matches_dense_expansion() {
        let mut rng = StdRng::seed_from_u64(10);
        for _ in 0..20 {
            let zt = random_pair(&mut rng, 6, 5, 3);
            let zt1 = random_pair(&mut rng, 6, 5, 3);
            let lin = linearized(&zt, &zt1).unwrap();
            let expect = zt.u() * zt1.v().transpose() + zt1.u() * zt.v().transpose()
                - zt.u() * zt.v().transpose();
            let diff = (lin.dense() - &expect).norm() / expect.norm().max(1e-30);
            assert!(diff <= 1e-13, "expansion mismatch: {diff}");
        }
    }

    #[test]
    fn projection_idempotent_on_low_rank() {
        let mut rng = StdRng::seed_from_u64(11);
        let z = random_pair(&mut rng, 6, 5, 2);
        let lin = linearized(&z, &z).unwrap();
        let proj = project_rank_r(&lin, 2).unwrap();
        let err = (proj.product_dense() - z.product_dense()).norm() / z.product_dense().norm();
        assert!(err <= 1e-10, "reconstruction error {err}");
    }

    #[test]
    fn projection_keeps_dominant_singular_value() {
        let u = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let v = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let z = FactorPair::new(u, v).unwrap();
        let lin = linearized(&z, &z).unwrap();
        let proj = project_rank_r(&lin, 1).unwrap();
        let dense = proj.product_dense();
        assert_relative_eq!(dense[(0, 0)], 4.0, epsilon = 1e-12);
        assert_relative_eq!(dense[(1, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn projection_matches_dense_svd_truncation() {
        let mut rng = StdRng::seed_from_u64(12);
        for _ in 0..10 {
            let zt = random_pair(&mut rng, 7, 6, 2);
            let zt1 = random_pair(&mut rng, 7, 6, 2);
            let lin = linearized(&zt, &zt1).unwrap();
            let proj = project_rank_r(&lin, 2).unwrap();
            let dense = lin.dense();
            let svd = crate::jacobi::jacobi_svd(&dense);
            let mut trunc = DMatrix::zeros(7, 6);
            for k in 0..2 {
                trunc += svd.singular_values[k] * svd.u.column(k) * svd.v.column(k).transpose();
            }
            let err = (proj.product_dense() - &trunc).norm() / trunc.norm();
            assert!(err <= 1e-10, "truncation mismatch: {err}");
            // The output is balanced.
            let gap = (proj.u().transpose() * proj.u() - proj.v().transpose() * proj.v()).norm();
            assert!(gap <= 1e-10 * svd.singular_values[0]);
        }
    }
}
