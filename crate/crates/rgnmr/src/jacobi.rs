//! Dense SVD by one-sided Jacobi (Hestenes) rotations.
//!
//! Small and deterministic, with high relative accuracy on exactly
//! rank-deficient input, which is where LAPACK-style implicit-QR
//! implementations (including nalgebra's) can lose precision. Everything in
//! this crate that needs a dense SVD routes through here; matrices are small
//! (projection cores, Procrustes grams) or modest (dense test oracles), so
//! the O(m n^2) sweeps are not a bottleneck.

use nalgebra::DMatrix;

/// Thin SVD `A = U diag(sigma) V^T` with `k = min(m, n)` columns, singular
/// values in nonincreasing order. Columns of `U` follow the
/// leading-nonzero-entry-nonnegative sign convention; columns associated
/// with zero singular values are left as zero vectors in `U`.
pub struct JacobiSvd {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub v: DMatrix<f64>,
}

const MAX_SWEEPS: usize = 60;

pub fn jacobi_svd(a: &DMatrix<f64>) -> JacobiSvd {
    if a.nrows() >= a.ncols() {
        jacobi_svd_tall(a.clone())
    } else {
        let t = jacobi_svd_tall(a.transpose());
        // Swapping sides breaks the U-sign convention; restore it.
        let mut u = t.v;
        let mut v = t.u;
        for c in 0..u.ncols() {
            if crate::gn_step::leading_sign_negative(u.column(c).as_slice()) {
                u.column_mut(c).neg_mut();
                v.column_mut(c).neg_mut();
            }
        }
        JacobiSvd {
            u,
            singular_values: t.singular_values,
            v,
        }
    }
}

/// Singular values only, nonincreasing.
pub fn jacobi_singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    let w = if a.nrows() >= a.ncols() {
        a.clone()
    } else {
        a.transpose()
    };
    let (w, _) = sweep_columns(w, None);
    let mut sv: Vec<f64> = (0..w.ncols()).map(|c| w.column(c).norm()).collect();
    sv.sort_unstable_by(|x, y| y.total_cmp(x));
    sv
}

fn jacobi_svd_tall(a: DMatrix<f64>) -> JacobiSvd {
    let n = a.ncols();
    let (w, v) = sweep_columns(a, Some(DMatrix::identity(n, n)));
    let v = v.expect("accumulated");

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|c| w.column(c).norm()).collect();
    order.sort_unstable_by(|&x, &y| norms[y].total_cmp(&norms[x]));

    let m = w.nrows();
    let mut u = DMatrix::zeros(m, n);
    let mut v_sorted = DMatrix::zeros(n, n);
    let mut sigma = vec![0.0; n];
    let scale = norms[order[0]].max(f64::MIN_POSITIVE);
    for (c, &src) in order.iter().enumerate() {
        sigma[c] = norms[src];
        v_sorted.column_mut(c).copy_from(&v.column(src));
        if norms[src] > scale * 1e-300 && norms[src] > 0.0 {
            let mut col = w.column(src) / norms[src];
            if crate::gn_step::leading_sign_negative(col.as_slice()) {
                col.neg_mut();
                v_sorted.column_mut(c).neg_mut();
            }
            u.column_mut(c).copy_from(&col);
        }
    }
    JacobiSvd {
        u,
        singular_values: sigma,
        v: v_sorted,
    }
}

/// Orthogonalizes the columns of `w` by plane rotations, accumulating them
/// into `v` when given. Stops when every column pair is numerically
/// orthogonal.
fn sweep_columns(
    mut w: DMatrix<f64>,
    mut v: Option<DMatrix<f64>>,
) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
    let n = w.ncols();
    let tol = 1e-15;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let wp = w.column(p);
                let wq = w.column(q);
                let app = wp.dot(&wp);
                let aqq = wq.dot(&wq);
                let apq = wp.dot(&wq);
                if app == 0.0 || aqq == 0.0 {
                    continue;
                }
                if apq.abs() <= tol * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut w, p, q, c, s);
                if let Some(acc) = v.as_mut() {
                    rotate_pair(acc, p, q, c, s);
                }
            }
        }
        if !rotated {
            break;
        }
    }
    (w, v)
}

#[inline]
fn rotate_pair(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let a = m[(i, p)];
        let b = m[(i, q)];
        m[(i, p)] = c * a - s * b;
        m[(i, q)] = s * a + c * b;
    }
}

/// Minimal-norm least-squares solution `x = V diag(1/sigma) U^T b`, with
/// singular values at or below `rel_cutoff * sigma_1` treated as zero.
pub fn pinv_solve(a: &DMatrix<f64>, b: &[f64], rel_cutoff: f64) -> Vec<f64> {
    let svd = jacobi_svd(a);
    let cutoff = svd.singular_values.first().copied().unwrap_or(0.0) * rel_cutoff;
    let bv = nalgebra::DVector::from_column_slice(b);
    let mut x = nalgebra::DVector::zeros(a.ncols());
    for k in 0..svd.singular_values.len() {
        let s = svd.singular_values[k];
        if s > cutoff && s > 0.0 {
            let coef = svd.u.column(k).dot(&bv) / s;
            x += coef * svd.v.column(k);
        }
    }
    x.as_slice().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn reconstruction_error(a: &DMatrix<f64>) -> f64 {
        let svd = jacobi_svd(a);
        let mut rec = DMatrix::zeros(a.nrows(), a.ncols());
        for k in 0..svd.singular_values.len() {
            rec += svd.singular_values[k] * svd.u.column(k) * svd.v.column(k).transpose();
        }
        (rec - a).norm() / a.norm().max(1e-300)
    }

    #[test]
    fn accurate_on_rank_deficient_matrices() {
        let mut rng = StdRng::seed_from_u64(1);
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let m = rng.random_range(2..=12);
            let n = rng.random_range(2..=12);
            let r = rng.random_range(1..=3.min(m.min(n)));
            let u = DMatrix::from_fn(m, r, |_, _| rng.random_range(-1.0..1.0f64));
            let v = DMatrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0f64));
            let a = &u * v.transpose();
            worst = worst.max(reconstruction_error(&a));
            // Orthonormality of the computed factors on their support.
            let svd = jacobi_svd(&a);
            for k in 0..r {
                assert!((svd.u.column(k).norm() - 1.0).abs() < 1e-12);
                assert!((svd.v.column(k).norm() - 1.0).abs() < 1e-12);
            }
        }
        assert!(worst < 1e-12, "worst reconstruction error {worst:e}");
    }

    #[test]
    fn accurate_on_full_rank_matrices() {
        let mut rng = StdRng::seed_from_u64(2);
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let m = rng.random_range(1..=12);
            let n = rng.random_range(1..=12);
            let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0f64));
            worst = worst.max(reconstruction_error(&a));
        }
        assert!(worst < 1e-12, "worst reconstruction error {worst:e}");
    }

    #[test]
    fn values_match_diagonal_case() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, -1.0]);
        let sv = jacobi_singular_values(&a);
        assert!((sv[0] - 4.0).abs() < 1e-14 && (sv[1] - 1.0).abs() < 1e-14);
        let svd = jacobi_svd(&a);
        assert_eq!(svd.singular_values.len(), 2);
    }

    #[test]
    fn pinv_solves_least_squares() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..100 {
            let m = rng.random_range(2..=10);
            let n = rng.random_range(2..=10);
            let r = rng.random_range(1..=m.min(n));
            let u = DMatrix::from_fn(m, r, |_, _| rng.random_range(-1.0..1.0f64));
            let v = DMatrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0f64));
            let a = &u * v.transpose();
            let b: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = pinv_solve(&a, &b, 1e-10);
            let xv = nalgebra::DVector::from_column_slice(&x);
            let bv = nalgebra::DVector::from_column_slice(&b);
            let resid = &a * &xv - &bv;
            let normal = (a.transpose() * &resid).norm();
            assert!(
                normal <= 1e-10 * a.norm() * bv.norm().max(1.0),
                "normal residual {normal:e}"
            );
        }
    }
}
