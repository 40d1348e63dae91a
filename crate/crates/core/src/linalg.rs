//! Dense linear-algebra helpers: SVD pseudoinverse, minimum-norm least
//! squares, null-space extraction, and a multiscale grid minimizer used by
//! brute-force test oracles.
//!
//! All tolerances are relative to the largest singular value. The default
//! follows the usual LAPACK-style rule `max(nrows, ncols) * eps * sigma_max`;
//! callers with hand-built tables (the synthetic oracles) pass an explicit
//! `rcond` instead so that null-space detection is deterministic.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Singular-value cutoff for `m` given an optional relative tolerance.
fn sv_tol(m: &DMatrix<f64>, sigma_max: f64, rcond: Option<f64>) -> f64 {
    let rel = rcond.unwrap_or_else(|| m.nrows().max(m.ncols()) as f64 * f64::EPSILON);
    rel * sigma_max
}

/// Moore-Penrose pseudoinverse via SVD.
///
/// Returns `(pinv, rank, tol)` where `tol` is the absolute singular-value
/// cutoff actually used (recorded so oracle solvers can report it).
pub fn pinv(m: &DMatrix<f64>, rcond: Option<f64>) -> (DMatrix<f64>, usize, f64) {
    if m.nrows() == 0 || m.ncols() == 0 {
        return (DMatrix::zeros(m.ncols(), m.nrows()), 0, 0.0);
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    let sigma_max = svd.singular_values.max();
    let tol = sv_tol(m, sigma_max, rcond);

    let k = svd.singular_values.len();
    let mut inv_s = DMatrix::zeros(k, k);
    let mut rank = 0;
    for i in 0..k {
        let s = svd.singular_values[i];
        if s > tol {
            inv_s[(i, i)] = 1.0 / s;
            rank += 1;
        }
    }
    (v_t.transpose() * inv_s * u.transpose(), rank, tol)
}

/// Rank of `m` at the same cutoff convention as [`pinv`].
pub fn rank(m: &DMatrix<f64>, rcond: Option<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let svd = m.clone().svd(false, false);
    let sigma_max = svd.singular_values.max();
    let tol = sv_tol(m, sigma_max, rcond);
    svd.singular_values.iter().filter(|&&s| s > tol).count()
}

/// Minimum-norm least-squares solution of `a x ≈ b`.
pub fn lstsq_min_norm(a: &DMatrix<f64>, b: &DVector<f64>, rcond: Option<f64>) -> DVector<f64> {
    let (p, _, _) = pinv(a, rcond);
    &p * b
}

/// Orthonormal basis of the right null space `{x : a x = 0}`, one column per
/// basis vector (zero columns when `a` has full column rank).
pub fn null_space(a: &DMatrix<f64>, rcond: Option<f64>) -> DMatrix<f64> {
    let n = a.ncols();
    if a.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    // A thin SVD of a wide matrix omits the trailing rows of V^T entirely;
    // padding with zero rows to square keeps the singular values and makes
    // V^T full n x n, so every null direction carries an explicit (zero)
    // singular value.
    let padded;
    let work: &DMatrix<f64> = if a.nrows() < n {
        let mut p = DMatrix::zeros(n, n);
        p.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
        padded = p;
        &padded
    } else {
        a
    };
    let svd = work.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    let sigma_max = svd.singular_values.max();
    let tol = sv_tol(a, sigma_max, rcond);

    let mut cols: Vec<DVector<f64>> = Vec::new();
    for i in 0..svd.singular_values.len() {
        if svd.singular_values[i] <= tol {
            cols.push(v_t.row(i).transpose());
        }
    }
    if cols.is_empty() {
        return DMatrix::zeros(n, 0);
    }
    DMatrix::from_columns(&cols)
}

/// Solves the symmetric positive-definite system `a x = b` by Cholesky,
/// escalating a diagonal jitter through the supplied ladder on failure.
/// Returns the solution and the jitter actually applied (0.0 when clean).
pub fn solve_spd_with_jitter(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    jitter_ladder: &[f64],
) -> Result<(DMatrix<f64>, f64)> {
    if let Some(chol) = a.clone().cholesky() {
        return Ok((chol.solve(b), 0.0));
    }
    for &j in jitter_ladder {
        let mut aj = a.clone();
        for i in 0..aj.nrows().min(aj.ncols()) {
            aj[(i, i)] += j;
        }
        if let Some(chol) = aj.cholesky() {
            return Ok((chol.solve(b), j));
        }
    }
    Err(Error::computation(format!(
        "Cholesky failed after jitter ladder {:?}",
        jitter_ladder
    )))
}

/// Multiscale coordinate grid minimizer for brute-force oracle checks.
///
/// Evaluates `f` on a regular grid in the box `center ± half_width`,
/// recenters on the best point, shrinks the box, and repeats. Not a
/// production optimizer; only used to cross-check closed-form minimizers on
/// tiny instances where the objective is smooth and the box contains the
/// minimizer.
pub fn grid_minimize<F>(
    f: &F,
    center: &[f64],
    half_width: f64,
    points_per_dim: usize,
    levels: usize,
) -> (Vec<f64>, f64)
where
    F: Fn(&[f64]) -> f64,
{
    assert!(points_per_dim >= 3, "need at least 3 grid points per dim");
    let d = center.len();
    let mut best = center.to_vec();
    let mut best_val = f(&best);
    let mut hw = half_width;

    for _ in 0..levels {
        let mut idx = vec![0usize; d];
        let origin = best.clone();
        loop {
            let mut pt = vec![0.0; d];
            for k in 0..d {
                let t = idx[k] as f64 / (points_per_dim - 1) as f64;
                pt[k] = origin[k] - hw + 2.0 * hw * t;
            }
            let v = f(&pt);
            if v < best_val {
                best_val = v;
                best = pt;
            }
            // Odometer increment over the d-dimensional grid.
            let mut k = 0;
            loop {
                if k == d {
                    break;
                }
                idx[k] += 1;
                if idx[k] < points_per_dim {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == d {
                break;
            }
        }
        // Shrink so the next level still covers neighbors of the best point.
        hw *= 2.5 / (points_per_dim - 1) as f64;
    }
    (best, best_val)
}
