//! Truncated SVD of sparse matrices by Golub-Kahan-Lanczos
//! bidiagonalization with full reorthogonalization.
//!
//! The operator is accessed only through matrix-vector products, so the
//! spectral initialization can factor the centered observation matrix
//! without densifying it. The start vector is fixed, which keeps results
//! deterministic across runs and platforms.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::obs_model::ObservationSet;

/// Matrix accessed via `y = M x` and `x = M^T y`.
pub trait MatVec {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
    fn apply_transpose(&self, y: &[f64], out: &mut [f64]);
}

/// Sparse matrix over an observation pattern with externally supplied values.
pub struct SparseMatVec<'a> {
    obs: &'a ObservationSet,
    values: &'a [f64],
}

impl<'a> SparseMatVec<'a> {
    pub fn new(obs: &'a ObservationSet, values: &'a [f64]) -> Result<Self> {
        if values.len() != obs.len() {
            return Err(Error::invalid("value sequence length mismatch"));
        }
        Ok(SparseMatVec { obs, values })
    }
}

impl MatVec for SparseMatVec<'_> {
    fn nrows(&self) -> usize {
        self.obs.n_rows()
    }

    fn ncols(&self) -> usize {
        self.obs.n_cols()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (p, (&i, &j)) in self.obs.rows().iter().zip(self.obs.cols().iter()).enumerate() {
            out[i as usize] += self.values[p] * x[j as usize];
        }
    }

    fn apply_transpose(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (p, (&i, &j)) in self.obs.rows().iter().zip(self.obs.cols().iter()).enumerate() {
            out[j as usize] += self.values[p] * y[i as usize];
        }
    }
}

/// Result of a truncated SVD: `m x r`, `r`, `n x r` with singular values in
/// nonincreasing order. Left singular vectors follow the convention that the
/// leading nonzero entry is nonnegative.
pub struct TruncatedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub v: DMatrix<f64>,
}

/// Computes the top-`r` singular triplets of `op`.
///
/// Runs Lanczos bidiagonalization, expanding the Krylov subspace until the
/// leading `r` Ritz values stabilize and their residual bounds fall below
/// `tol * sigma_1`, restarting the basis from a fresh orthogonal direction if
/// the recurrence breaks down early.
pub fn truncated_svd(op: &impl MatVec, r: usize) -> Result<TruncatedSvd> {
    truncated_svd_with(op, r, 1e-12, 600)
}

pub fn truncated_svd_with(
    op: &impl MatVec,
    r: usize,
    tol: f64,
    max_steps: usize,
) -> Result<TruncatedSvd> {
    let m = op.nrows();
    let n = op.ncols();
    if r == 0 || r > m.min(n) {
        return Err(Error::invalid(format!(
            "rank {r} invalid for a {m}x{n} operator"
        )));
    }
    let max_dim = m.min(n);
    // Fixed-seed start vector; the choice only affects iteration count.
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_1a2b);

    let mut vs: Vec<Vec<f64>> = Vec::new(); // right Lanczos vectors, length n
    let mut us: Vec<Vec<f64>> = Vec::new(); // left Lanczos vectors, length m
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new(); // beta[k] couples v[k+1] to u[k]

    let mut v = random_unit(&mut rng, n);
    let mut prev_ritz: Vec<f64> = Vec::new();
    let mut steps = 0;

    loop {
        if vs.len() == max_dim {
            break;
        }
        steps += 1;
        if steps > max_steps {
            return Err(Error::SvdNoConvergence { iterations: steps });
        }

        // u_k = M v_k - beta_{k-1} u_{k-1}, reorthogonalized.
        let mut u = vec![0.0; m];
        op.apply(&v, &mut u);
        if let (Some(last_u), Some(&beta)) = (us.last(), betas.last()) {
            for (ui, li) in u.iter_mut().zip(last_u.iter()) {
                *ui -= beta * li;
            }
        }
        reorthogonalize(&mut u, &us);
        let alpha = norm2(&u);
        vs.push(v.clone());
        if alpha <= f64::EPSILON * 1e3 {
            // Breakdown: the subspace is invariant. Restart from a fresh
            // direction orthogonal to what we have, or stop if exhausted.
            alphas.push(0.0);
            us.push(vec![0.0; m]);
            match fresh_direction(&mut rng, n, &vs) {
                Some(dir) => {
                    betas.push(0.0);
                    v = dir;
                    continue;
                }
                None => break,
            }
        }
        scale(&mut u, 1.0 / alpha);
        alphas.push(alpha);
        us.push(u.clone());

        // v_{k+1} = M^T u_k - alpha_k v_k, reorthogonalized.
        let mut w = vec![0.0; n];
        op.apply_transpose(&u, &mut w);
        for (wi, vi) in w.iter_mut().zip(v.iter()) {
            *wi -= alpha * vi;
        }
        reorthogonalize(&mut w, &vs);
        let beta = norm2(&w);
        if beta <= f64::EPSILON * 1e3 {
            match fresh_direction(&mut rng, n, &vs) {
                Some(dir) => {
                    betas.push(0.0);
                    v = dir;
                }
                None => break,
            }
        } else {
            scale(&mut w, 1.0 / beta);
            betas.push(beta);
            v = w;
        }

        // Convergence check on the leading Ritz values.
        let k = vs.len();
        if k >= r {
            let ritz = ritz_values(&alphas, &betas, k, r);
            let sigma1 = ritz.first().copied().unwrap_or(0.0);
            if sigma1 == 0.0 {
                break;
            }
            if prev_ritz.len() == r {
                let stable = ritz
                    .iter()
                    .zip(prev_ritz.iter())
                    .all(|(a, b)| (a - b).abs() <= tol * sigma1);
                if stable && k > r {
                    break;
                }
            }
            prev_ritz = ritz;
        }
    }

    // Dense SVD of the rectangular core: M V_k = U_k B and
    // M^T U_k = V_{k+1} Bhat^T with Bhat the k x (k+1) upper bidiagonal
    // holding the trailing coupling, so no accuracy is lost when the short
    // dimension is exhausted.
    let k = vs.len();
    let bhat = assemble_core(&alphas, &betas, k);
    let svd = crate::jacobi::jacobi_svd(&bhat);
    // Right basis: the stored v's plus the pending (k+1)-th vector; its
    // weight is zero whenever the recurrence ended without a coupling.
    let mut vs_ext: Vec<&[f64]> = vs.iter().map(|x| x.as_slice()).collect();
    vs_ext.push(&v);

    let mut u_out = DMatrix::zeros(m, r);
    let mut v_out = DMatrix::zeros(n, r);
    let mut sigma = vec![0.0; r];
    for c in 0..r.min(k) {
        sigma[c] = svd.singular_values[c].max(0.0);
        // Left vector: sum_t P[t, c] * u_t ; right: sum_t Q[t, c] * v_t.
        let mut ucol = vec![0.0; m];
        let mut vcol = vec![0.0; n];
        for t in 0..k {
            let pu = svd.u[(t, c)];
            for (o, x) in ucol.iter_mut().zip(us[t].iter()) {
                *o += pu * x;
            }
        }
        for (t, vt) in vs_ext.iter().enumerate().take(k + 1) {
            let qv = svd.v[(t, c)];
            for (o, x) in vcol.iter_mut().zip(vt.iter()) {
                *o += qv * x;
            }
        }
        if crate::gn_step::leading_sign_negative(&ucol) {
            for x in ucol.iter_mut() {
                *x = -*x;
            }
            for x in vcol.iter_mut() {
                *x = -*x;
            }
        }
        for (i, x) in ucol.iter().enumerate() {
            u_out[(i, c)] = *x;
        }
        for (j, x) in vcol.iter().enumerate() {
            v_out[(j, c)] = *x;
        }
    }

    Ok(TruncatedSvd {
        u: u_out,
        singular_values: sigma,
        v: v_out,
    })
}

/// The k x (k+1) upper bidiagonal core; a missing trailing coupling is a
/// zero column.
fn assemble_core(alphas: &[f64], betas: &[f64], k: usize) -> DMatrix<f64> {
    let mut bhat = DMatrix::zeros(k, k + 1);
    for i in 0..k {
        bhat[(i, i)] = alphas[i];
        if i < betas.len() {
            bhat[(i, i + 1)] = betas[i];
        }
    }
    bhat
}

/// Leading `r` singular values of the current core.
fn ritz_values(alphas: &[f64], betas: &[f64], k: usize, r: usize) -> Vec<f64> {
    let mut sv = crate::jacobi::jacobi_singular_values(&assemble_core(alphas, betas, k));
    sv.truncate(r);
    sv
}

/// Two passes of classical Gram-Schmidt against the stored basis.
fn reorthogonalize(x: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let coeff: f64 = x.iter().zip(b.iter()).map(|(a, c)| a * c).sum();
            if coeff != 0.0 {
                for (xi, bi) in x.iter_mut().zip(b.iter()) {
                    *xi -= coeff * bi;
                }
            }
        }
    }
}

fn fresh_direction(rng: &mut ChaCha8Rng, n: usize, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    if basis.len() >= n {
        return None;
    }
    for _ in 0..8 {
        let mut cand = random_unit(rng, n);
        reorthogonalize(&mut cand, basis);
        let nrm = norm2(&cand);
        if nrm > 1e-8 {
            scale(&mut cand, 1.0 / nrm);
            return Some(cand);
        }
    }
    None
}

fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let nrm = norm2(&v);
    scale(&mut v, 1.0 / nrm);
    v
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn scale(x: &mut [f64], s: f64) {
    for v in x.iter_mut() {
        *v *= s;
    }
}
