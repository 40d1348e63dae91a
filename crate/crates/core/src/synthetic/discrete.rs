//! Finite-support data-generating processes with exact enumeration oracles.
//!
//! On a finite support everything is computable in closed form: the target
//! J, the full solution set of both bridge equations, projected residual
//! norms, and every conditional law. The oracles here are deliberately
//! written as plain nested sums over the joint support and share no code
//! with the fitting layer, so they can arbitrate its correctness.
//!
//! Support encoding: U, W, Z, X are integer levels. Generated observation
//! tables carry W, Z, X as single integer-coded columns and A as the
//! canonical discrete action index.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{
    ActionKind, BridgeFit, BridgeKind, ClassDescriptor, ContrastSpec, FitDiagnostics,
    ObservationTable, RowMatrix, Strategy,
};
use crate::sieve::{FeatureMap, FeatureSpec};
use crate::rng::rng_from_seed;

/// Relative singular-value cutoff for the bridge-set solvers. Hand-built
/// tables are exact to float precision, so null-space detection at this
/// tolerance is deterministic.
pub const ORACLE_RCOND: f64 = 1e-10;

const ROW_SUM_TOL: f64 = 1e-12;

/// A fully tabulated law of (X, U, A, Z, W, Y) plus the contrast weights
/// that define the estimand.
///
/// Factorization: X ~ p(x), U|X ~ p(u|x), A|U,X ~ f(a|u,x),
/// Z|U,A,X ~ P(z|u,a,x), W|U,X ~ P(w|u,x), and
/// Y = E[Y|u,a,x] + uniform noise. W's law carries no dependence on A or Z,
/// and the outcome mean carries none on W: that is what makes (Z, W) a
/// valid negative-control pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteDgp {
    n_u: usize,
    n_w: usize,
    n_z: usize,
    n_a: usize,
    n_x: usize,
    /// p(x).
    p_x: Vec<f64>,
    /// p(u|x), indexed [x][u].
    p_u: Vec<Vec<f64>>,
    /// f(a|u,x), indexed [x][u][a]; strictly positive in every cell (overlap).
    f_a: Vec<Vec<Vec<f64>>>,
    /// P(w|u,x), indexed [x][u][w].
    p_w: Vec<Vec<Vec<f64>>>,
    /// P(z|u,a,x), indexed [x][u][a][z].
    p_z: Vec<Vec<Vec<Vec<f64>>>>,
    /// E[Y|u,a,x], indexed [x][u][a].
    y_mean: Vec<Vec<Vec<f64>>>,
    /// Half-width of the centered uniform outcome noise; keeps Y bounded.
    y_noise: f64,
    /// Contrast weights pi(a|x), indexed [x][a]; signed weights are legal.
    pi: Vec<Vec<f64>>,
}

fn check_prob_row(name: &str, row: &[f64], strictly_positive: bool) -> Result<()> {
    let mut sum = 0.0;
    for &v in row {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::validation(format!("{name}: entry {v} is not a probability")));
        }
        if strictly_positive && v <= 0.0 {
            return Err(Error::validation(format!("{name}: entry {v} violates strict positivity")));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(Error::validation(format!("{name}: row sums to {sum}, expected 1")));
    }
    Ok(())
}

impl DiscreteDgp {
    /// Builds and validates a DGP. Cardinalities are inferred from the table
    /// shapes; every conditional row must sum to 1 within 1e-12 and the
    /// action law must be strictly positive.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        p_x: Vec<f64>,
        p_u: Vec<Vec<f64>>,
        f_a: Vec<Vec<Vec<f64>>>,
        p_w: Vec<Vec<Vec<f64>>>,
        p_z: Vec<Vec<Vec<Vec<f64>>>>,
        y_mean: Vec<Vec<Vec<f64>>>,
        y_noise: f64,
        pi: Vec<Vec<f64>>,
    ) -> Result<DiscreteDgp> {
        let n_x = p_x.len();
        if n_x == 0 {
            return Err(Error::validation("p_x is empty"));
        }
        let n_u = p_u.first().map_or(0, |r| r.len());
        let n_a = f_a.first().and_then(|t| t.first()).map_or(0, |r| r.len());
        let n_w = p_w.first().and_then(|t| t.first()).map_or(0, |r| r.len());
        let n_z = p_z
            .first()
            .and_then(|t| t.first())
            .and_then(|t| t.first())
            .map_or(0, |r| r.len());
        let dgp = DiscreteDgp {
            n_u,
            n_w,
            n_z,
            n_a,
            n_x,
            p_x,
            p_u,
            f_a,
            p_w,
            p_z,
            y_mean,
            y_noise,
            pi,
        };
        dgp.validate()?;
        Ok(dgp)
    }

    fn validate(&self) -> Result<()> {
        let (n_u, n_w, n_z, n_a, n_x) = (self.n_u, self.n_w, self.n_z, self.n_a, self.n_x);
        if n_u == 0 || n_w == 0 || n_z == 0 || n_a == 0 || n_x == 0 {
            return Err(Error::validation("all cardinalities must be >= 1"));
        }
        if self.p_x.len() != n_x {
            return Err(Error::validation("p_x length disagrees with n_x"));
        }
        check_prob_row("p_x", &self.p_x, false)?;
        let shape_err = |name: &str| Error::validation(format!("{name} has the wrong shape"));
        if self.p_u.len() != n_x || self.f_a.len() != n_x || self.p_w.len() != n_x
            || self.p_z.len() != n_x || self.y_mean.len() != n_x || self.pi.len() != n_x
        {
            return Err(shape_err("a per-x table"));
        }
        for x in 0..n_x {
            if self.p_u[x].len() != n_u {
                return Err(shape_err("p_u"));
            }
            check_prob_row(&format!("p_u[x={x}]"), &self.p_u[x], false)?;
            if self.f_a[x].len() != n_u || self.p_w[x].len() != n_u || self.p_z[x].len() != n_u
                || self.y_mean[x].len() != n_u
            {
                return Err(shape_err("a per-u table"));
            }
            for u in 0..n_u {
                if self.f_a[x][u].len() != n_a {
                    return Err(shape_err("f_a"));
                }
                check_prob_row(&format!("f_a[x={x}][u={u}]"), &self.f_a[x][u], true)?;
                if self.p_w[x][u].len() != n_w {
                    return Err(shape_err("p_w"));
                }
                check_prob_row(&format!("p_w[x={x}][u={u}]"), &self.p_w[x][u], false)?;
                if self.p_z[x][u].len() != n_a {
                    return Err(shape_err("p_z"));
                }
                for a in 0..n_a {
                    if self.p_z[x][u][a].len() != n_z {
                        return Err(shape_err("p_z"));
                    }
                    check_prob_row(&format!("p_z[x={x}][u={u}][a={a}]"), &self.p_z[x][u][a], false)?;
                }
                if self.y_mean[x][u].len() != n_a {
                    return Err(shape_err("y_mean"));
                }
                if self.y_mean[x][u].iter().any(|v| !v.is_finite()) {
                    return Err(Error::validation("y_mean has a non-finite entry"));
                }
            }
            if self.pi[x].len() != n_a {
                return Err(shape_err("pi"));
            }
            if self.pi[x].iter().any(|v| !v.is_finite()) {
                return Err(Error::validation("pi has a non-finite entry"));
            }
        }
        if !self.y_noise.is_finite() || self.y_noise < 0.0 {
            return Err(Error::validation(format!("y_noise = {} must be finite and >= 0", self.y_noise)));
        }
        Ok(())
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn n_w(&self) -> usize {
        self.n_w
    }

    pub fn n_z(&self) -> usize {
        self.n_z
    }

    pub fn n_a(&self) -> usize {
        self.n_a
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn p_x_at(&self, x: usize) -> f64 {
        self.p_x[x]
    }

    pub fn p_u_at(&self, u: usize, x: usize) -> f64 {
        self.p_u[x][u]
    }

    pub fn f_at(&self, a: usize, u: usize, x: usize) -> f64 {
        self.f_a[x][u][a]
    }

    pub fn p_w_at(&self, w: usize, u: usize, x: usize) -> f64 {
        self.p_w[x][u][w]
    }

    pub fn p_z_at(&self, z: usize, u: usize, a: usize, x: usize) -> f64 {
        self.p_z[x][u][a][z]
    }

    pub fn mean_y(&self, u: usize, a: usize, x: usize) -> f64 {
        self.y_mean[x][u][a]
    }

    pub fn y_noise(&self) -> f64 {
        self.y_noise
    }

    pub fn pi_at(&self, a: usize, x: usize) -> f64 {
        self.pi[x][a]
    }

    /// Replaces the contrast table, revalidating shape.
    pub fn with_pi(mut self, pi: Vec<Vec<f64>>) -> Result<DiscreteDgp> {
        self.pi = pi;
        self.validate()?;
        Ok(self)
    }

    /// The stored contrast as a [`ContrastSpec`], matching the integer-coded
    /// x column of generated tables.
    pub fn contrast(&self) -> ContrastSpec {
        ContrastSpec::policy_table(self.pi.clone()).expect("validated at construction")
    }

    pub fn action_kind(&self) -> ActionKind {
        ActionKind::Discrete { n_actions: self.n_a }
    }

    /// Joint weight p(x) p(u|x) f(a|u,x).
    pub fn p_joint_uax(&self, u: usize, a: usize, x: usize) -> f64 {
        self.p_x[x] * self.p_u[x][u] * self.f_a[x][u][a]
    }

    /// Joint weight P(Z = z, A = a, X = x).
    pub fn p_joint_zax(&self, z: usize, a: usize, x: usize) -> f64 {
        (0..self.n_u)
            .map(|u| self.p_joint_uax(u, a, x) * self.p_z[x][u][a][z])
            .sum()
    }

    /// Joint weight P(W = w, A = a, X = x).
    pub fn p_joint_wax(&self, w: usize, a: usize, x: usize) -> f64 {
        (0..self.n_u)
            .map(|u| self.p_joint_uax(u, a, x) * self.p_w[x][u][w])
            .sum()
    }

    /// Posterior P(U = u | z, a, x); the zero vector when the cell has
    /// probability zero.
    pub fn posterior_u_given_zax(&self, z: usize, a: usize, x: usize) -> Vec<f64> {
        let mut post: Vec<f64> = (0..self.n_u)
            .map(|u| self.p_u[x][u] * self.f_a[x][u][a] * self.p_z[x][u][a][z])
            .collect();
        let den: f64 = post.iter().sum();
        if den > 0.0 {
            for v in &mut post {
                *v /= den;
            }
        }
        post
    }

    /// Posterior P(U = u | w, a, x); the zero vector when the cell has
    /// probability zero.
    pub fn posterior_u_given_wax(&self, w: usize, a: usize, x: usize) -> Vec<f64> {
        let mut post: Vec<f64> = (0..self.n_u)
            .map(|u| self.p_u[x][u] * self.f_a[x][u][a] * self.p_w[x][u][w])
            .collect();
        let den: f64 = post.iter().sum();
        if den > 0.0 {
            for v in &mut post {
                *v /= den;
            }
        }
        post
    }

    /// P(Z = z | w, a, x), mixing P(z|u,a,x) over the U posterior.
    pub fn p_z_given_wax(&self, z: usize, w: usize, a: usize, x: usize) -> f64 {
        let post = self.posterior_u_given_wax(w, a, x);
        (0..self.n_u).map(|u| post[u] * self.p_z[x][u][a][z]).sum()
    }

    /// P(W = w | z, a, x), mixing P(w|u,x) over the U posterior.
    pub fn p_w_given_zax(&self, w: usize, z: usize, a: usize, x: usize) -> f64 {
        let post = self.posterior_u_given_zax(z, a, x);
        (0..self.n_u).map(|u| post[u] * self.p_w[x][u][w]).sum()
    }

    /// 1 / f(a | w, x) = P(w|x) / P(w, a|x); 0 when w has probability zero
    /// under x. Overlap guarantees the denominator is positive whenever the
    /// numerator is.
    pub fn inv_f_given_wx(&self, a: usize, w: usize, x: usize) -> f64 {
        let p_wa: f64 = (0..self.n_u)
            .map(|u| self.p_u[x][u] * self.f_a[x][u][a] * self.p_w[x][u][w])
            .sum();
        let p_w: f64 = (0..self.n_u).map(|u| self.p_u[x][u] * self.p_w[x][u][w]).sum();
        if p_wa > 0.0 {
            p_w / p_wa
        } else {
            0.0
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<DiscreteDgp> {
        let dgp: DiscreteDgp = serde_json::from_str(s)?;
        dgp.validate()?;
        Ok(dgp)
    }

    /// SHA-256 of the canonical JSON encoding; stable across runs, changes
    /// whenever any table entry changes.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("validated tables serialize");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The stored contrast's value of J by exact enumeration.
    pub fn oracle_j(&self) -> f64 {
        oracle_discrete_j(self, &self.contrast()).expect("stored contrast is compatible")
    }
}

/// One Exp(1)-normalized row mixed toward uniform so no cell falls below
/// `floor / k`.
fn random_prob_row<R: Rng>(rng: &mut R, k: usize, floor: f64) -> Vec<f64> {
    let mut row: Vec<f64> = (0..k).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let sum: f64 = row.iter().sum();
    for v in &mut row {
        *v = (1.0 - floor) * (*v / sum) + floor / k as f64;
    }
    row
}

/// A randomly tabulated DGP with the given cardinalities. Action rows are
/// mixed 30% toward uniform so overlap holds with margin; proxy rows 5%, so
/// rank conditions hold almost surely without degenerate near-zero cells.
/// The contrast is a random proper policy density.
pub fn random_dgp(
    n_u: usize,
    n_w: usize,
    n_z: usize,
    n_a: usize,
    n_x: usize,
    y_noise: f64,
    seed: u64,
) -> DiscreteDgp {
    let mut rng = rng_from_seed(seed);
    let p_x = random_prob_row(&mut rng, n_x, 0.05);
    let mut p_u = Vec::new();
    let mut f_a = Vec::new();
    let mut p_w = Vec::new();
    let mut p_z = Vec::new();
    let mut y_mean = Vec::new();
    let mut pi = Vec::new();
    for _x in 0..n_x {
        p_u.push(random_prob_row(&mut rng, n_u, 0.05));
        let mut f_x = Vec::new();
        let mut w_x = Vec::new();
        let mut z_x = Vec::new();
        let mut y_x = Vec::new();
        for _u in 0..n_u {
            f_x.push(random_prob_row(&mut rng, n_a, 0.3));
            w_x.push(random_prob_row(&mut rng, n_w, 0.05));
            z_x.push((0..n_a).map(|_| random_prob_row(&mut rng, n_z, 0.05)).collect::<Vec<_>>());
            y_x.push((0..n_a).map(|_| 4.0 * rng.gen::<f64>() - 2.0).collect::<Vec<_>>());
        }
        f_a.push(f_x);
        p_w.push(w_x);
        p_z.push(z_x);
        y_mean.push(y_x);
        pi.push(random_prob_row(&mut rng, n_a, 0.1));
    }
    DiscreteDgp::new(p_x, p_u, f_a, p_w, p_z, y_mean, y_noise, pi)
        .expect("randomly generated tables are valid")
}

fn sample_cat<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let t: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if t < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Samples n rows and returns the observed table together with the latent U
/// column, for harnesses that compare against latent-adjusted scores.
///
/// Draw order per row is fixed (x, u, a, z, w, y-noise), so the observed
/// part coincides with [`generate_discrete`] at the same seed.
pub fn generate_discrete_with_latent_u(
    dgp: &DiscreteDgp,
    n: usize,
    seed: u64,
) -> (ObservationTable, Vec<usize>) {
    let mut rng = rng_from_seed(seed);
    let mut y = Vec::with_capacity(n);
    let mut a_col = Vec::with_capacity(n);
    let mut w = RowMatrix::zero_rows(1);
    let mut z = RowMatrix::zero_rows(1);
    let mut x_col = RowMatrix::zero_rows(1);
    let mut u_col = Vec::with_capacity(n);
    for _ in 0..n {
        let x = sample_cat(&mut rng, &dgp.p_x);
        let u = sample_cat(&mut rng, &dgp.p_u[x]);
        let a = sample_cat(&mut rng, &dgp.f_a[x][u]);
        let zi = sample_cat(&mut rng, &dgp.p_z[x][u][a]);
        let wi = sample_cat(&mut rng, &dgp.p_w[x][u]);
        let noise = dgp.y_noise * (2.0 * rng.gen::<f64>() - 1.0);
        y.push(dgp.y_mean[x][u][a] + noise);
        a_col.push(a as f64);
        z.push_row(&[zi as f64]);
        w.push_row(&[wi as f64]);
        x_col.push_row(&[x as f64]);
        u_col.push(u);
    }
    let table = ObservationTable::new(y, w, z, a_col, x_col, dgp.action_kind())
        .expect("sampled rows are valid by construction");
    (table, u_col)
}

/// Samples n observed rows; deterministic given (dgp, n, seed).
pub fn generate_discrete(dgp: &DiscreteDgp, n: usize, seed: u64) -> ObservationTable {
    generate_discrete_with_latent_u(dgp, n, seed).0
}

/// J = E[sum_a pi(a|X) E[Y|U, a, X]] by exact enumeration over (x, u).
pub fn oracle_discrete_j(dgp: &DiscreteDgp, contrast: &ContrastSpec) -> Result<f64> {
    contrast.check_compatible(&dgp.action_kind())?;
    let mut j = 0.0;
    for x in 0..dgp.n_x {
        let xrow = [x as f64];
        for u in 0..dgp.n_u {
            let wgt = dgp.p_x[x] * dgp.p_u[x][u];
            if wgt == 0.0 {
                continue;
            }
            j += wgt * contrast.integrate(&xrow, |a| dgp.y_mean[x][u][a.round() as usize]);
        }
    }
    Ok(j)
}

/// Solution sets of both bridge equations, one linear system per (a, x)
/// cell. Particular solutions are minimum-norm; the null bases are
/// orthonormal and span all remaining freedom.
#[derive(Clone, Debug)]
pub struct DiscreteBridgeSets {
    /// h0 values, indexed [x][a][w].
    pub h_particular: Vec<Vec<Vec<f64>>>,
    /// Null-space basis vectors for h, indexed [x][a][basis][w].
    pub h_null: Vec<Vec<Vec<Vec<f64>>>>,
    /// q0 values, indexed [x][a][z].
    pub q_particular: Vec<Vec<Vec<f64>>>,
    /// Null-space basis vectors for q, indexed [x][a][basis][z].
    pub q_null: Vec<Vec<Vec<Vec<f64>>>>,
}

impl DiscreteBridgeSets {
    pub fn h0(&self, w: usize, a: usize, x: usize) -> f64 {
        self.h_particular[x][a][w]
    }

    pub fn q0(&self, z: usize, a: usize, x: usize) -> f64 {
        self.q_particular[x][a][z]
    }

    /// Null-space dimension of the h system in cell (a, x).
    pub fn h_null_dim(&self, a: usize, x: usize) -> usize {
        self.h_null[x][a].len()
    }

    pub fn q_null_dim(&self, a: usize, x: usize) -> usize {
        self.q_null[x][a].len()
    }
}

fn check_solution(
    m: &DMatrix<f64>,
    sol: &DVector<f64>,
    rhs: &DVector<f64>,
    what: &str,
) -> Result<()> {
    let resid = (m * sol - rhs).amax();
    let scale = 1.0 + rhs.amax();
    if resid > 1e-10 * scale {
        return Err(Error::computation(format!(
            "{what}: solver residual {resid} exceeds tolerance; system is inconsistent"
        )));
    }
    Ok(())
}

fn columns_to_vecs(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.ncols()).map(|j| m.column(j).iter().cloned().collect()).collect()
}

/// Solves, for every (a, x) cell, the two latent linear systems
///   sum_w h(w) P(w|u, x)       = E[Y|u, a, x]   for all u,
///   sum_z q(z) P(z|u, a, x) f(a|u, x) = 1       for all u,
/// returning minimum-norm particular solutions and null-space bases. A proxy
/// matrix with rank below |U| leaves the right-hand side unreachable for
/// some outcome table, so it is rejected as a bridge-existence failure.
pub fn oracle_discrete_bridge_sets(dgp: &DiscreteDgp) -> Result<DiscreteBridgeSets> {
    let mut sets = DiscreteBridgeSets {
        h_particular: Vec::new(),
        h_null: Vec::new(),
        q_particular: Vec::new(),
        q_null: Vec::new(),
    };
    for x in 0..dgp.n_x {
        let mut hp_x = Vec::new();
        let mut hn_x = Vec::new();
        let mut qp_x = Vec::new();
        let mut qn_x = Vec::new();
        for a in 0..dgp.n_a {
            let m_h = DMatrix::from_fn(dgp.n_u, dgp.n_w, |u, w| dgp.p_w[x][u][w]);
            let rank_h = linalg::rank(&m_h, Some(ORACLE_RCOND));
            if rank_h < dgp.n_u {
                return Err(Error::BridgeExistence(format!(
                    "P(W|U) in cell (a={a}, x={x}) has rank {rank_h} < |U| = {}",
                    dgp.n_u
                )));
            }
            let rhs_h = DVector::from_fn(dgp.n_u, |u, _| dgp.y_mean[x][u][a]);
            let h0 = linalg::lstsq_min_norm(&m_h, &rhs_h, Some(ORACLE_RCOND));
            check_solution(&m_h, &h0, &rhs_h, "outcome bridge")?;
            hp_x.push(h0.iter().cloned().collect::<Vec<f64>>());
            hn_x.push(columns_to_vecs(&linalg::null_space(&m_h, Some(ORACLE_RCOND))));

            let m_q =
                DMatrix::from_fn(dgp.n_u, dgp.n_z, |u, z| dgp.p_z[x][u][a][z] * dgp.f_a[x][u][a]);
            let rank_q = linalg::rank(&m_q, Some(ORACLE_RCOND));
            if rank_q < dgp.n_u {
                return Err(Error::BridgeExistence(format!(
                    "P(Z|U) in cell (a={a}, x={x}) has rank {rank_q} < |U| = {}",
                    dgp.n_u
                )));
            }
            let rhs_q = DVector::from_element(dgp.n_u, 1.0);
            let q0 = linalg::lstsq_min_norm(&m_q, &rhs_q, Some(ORACLE_RCOND));
            check_solution(&m_q, &q0, &rhs_q, "action bridge")?;
            qp_x.push(q0.iter().cloned().collect::<Vec<f64>>());
            qn_x.push(columns_to_vecs(&linalg::null_space(&m_q, Some(ORACLE_RCOND))));
        }
        sets.h_particular.push(hp_x);
        sets.h_null.push(hn_x);
        sets.q_particular.push(qp_x);
        sets.q_null.push(qn_x);
    }
    Ok(sets)
}

/// Projected residual norm of an outcome-bridge candidate:
/// sqrt(E[(E[Y - h | Z, A, X])^2]) by exact enumeration. Zero exactly on
/// the observed solution set, null-space directions included.
pub fn oracle_residual_h<F>(dgp: &DiscreteDgp, h: F) -> f64
where
    F: Fn(usize, usize, usize) -> f64,
{
    let mut acc = 0.0;
    for x in 0..dgp.n_x {
        for a in 0..dgp.n_a {
            // E[Y - h | u, a, x] for each u, then mix over the z-posterior.
            let resid_u: Vec<f64> = (0..dgp.n_u)
                .map(|u| {
                    let hbar: f64 =
                        (0..dgp.n_w).map(|w| dgp.p_w[x][u][w] * h(w, a, x)).sum();
                    dgp.y_mean[x][u][a] - hbar
                })
                .collect();
            for z in 0..dgp.n_z {
                let mut den = 0.0;
                let mut num = 0.0;
                for u in 0..dgp.n_u {
                    let wgt = dgp.p_u[x][u] * dgp.f_a[x][u][a] * dgp.p_z[x][u][a][z];
                    den += wgt;
                    num += wgt * resid_u[u];
                }
                if den > 0.0 {
                    acc += dgp.p_x[x] * den * (num / den).powi(2);
                }
            }
        }
    }
    acc.sqrt()
}

/// Projected residual norm of an action-bridge candidate under the stored
/// contrast: sqrt(E[(pi(A|X) E[q - 1/f(A|W,X) | W, A, X])^2]) by exact
/// enumeration.
pub fn oracle_residual_q<F>(dgp: &DiscreteDgp, q: F) -> f64
where
    F: Fn(usize, usize, usize) -> f64,
{
    let mut acc = 0.0;
    for x in 0..dgp.n_x {
        for a in 0..dgp.n_a {
            let pi = dgp.pi[x][a];
            for w in 0..dgp.n_w {
                // p(w, a | x), p(w | x), and E[q | w, a, x] share one u-sweep.
                let mut p_wa = 0.0;
                let mut p_w_only = 0.0;
                let mut eq_num = 0.0;
                for u in 0..dgp.n_u {
                    let base = dgp.p_u[x][u] * dgp.p_w[x][u][w];
                    p_w_only += base;
                    let wgt = base * dgp.f_a[x][u][a];
                    p_wa += wgt;
                    let eq_u: f64 =
                        (0..dgp.n_z).map(|z| dgp.p_z[x][u][a][z] * q(z, a, x)).sum();
                    eq_num += wgt * eq_u;
                }
                if p_wa > 0.0 {
                    let g = pi * (eq_num / p_wa - p_w_only / p_wa);
                    acc += dgp.p_x[x] * p_wa * g * g;
                }
            }
        }
    }
    acc.sqrt()
}

/// P(W|Z, a, x) as an n_w x n_z matrix, mixing the W law over the U
/// posterior; columns of probability-zero z levels are zero.
pub fn p_w_given_z_matrix(dgp: &DiscreteDgp, a: usize, x: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(dgp.n_w, dgp.n_z);
    for z in 0..dgp.n_z {
        let post = dgp.posterior_u_given_zax(z, a, x);
        for w in 0..dgp.n_w {
            m[(w, z)] = (0..dgp.n_u).map(|u| post[u] * dgp.p_w[x][u][w]).sum();
        }
    }
    m
}

/// Per-cell ranks of the three proxy matrices plus the cardinality
/// consequences for bridge existence and uniqueness.
#[derive(Clone, Debug, Serialize)]
pub struct CompletenessReport {
    pub n_u: usize,
    pub n_w: usize,
    pub n_z: usize,
    /// rank P(W|U, a, x), indexed [x][a].
    pub rank_w_given_u: Vec<Vec<usize>>,
    /// rank P(Z|U, a, x), indexed [x][a].
    pub rank_z_given_u: Vec<Vec<usize>>,
    /// rank P(W|Z, a, x), indexed [x][a].
    pub rank_w_given_z: Vec<Vec<usize>>,
    /// Both bridge equations solvable in every cell (rank |U| on both sides).
    pub h_exists_all_cells: bool,
    pub q_exists_all_cells: bool,
    /// Trivial null space in every cell.
    pub h_unique: bool,
    pub q_unique: bool,
    pub notes: Vec<String>,
}

/// Ranks every proxy matrix at the oracle tolerance and spells out what the
/// cardinalities force: |W| > |U| caps rank P(W|Z) at |U|, so W-side
/// completeness fails and outcome bridges cannot be unique; symmetrically
/// for Z.
pub fn completeness_rank_check(dgp: &DiscreteDgp) -> CompletenessReport {
    let mut rank_w_given_u = Vec::new();
    let mut rank_z_given_u = Vec::new();
    let mut rank_w_given_z = Vec::new();
    let (mut h_exists, mut q_exists, mut h_unique, mut q_unique) = (true, true, true, true);
    for x in 0..dgp.n_x {
        let mut rw = Vec::new();
        let mut rz = Vec::new();
        let mut rwz = Vec::new();
        for a in 0..dgp.n_a {
            let m_w = DMatrix::from_fn(dgp.n_w, dgp.n_u, |w, u| dgp.p_w[x][u][w]);
            let m_z = DMatrix::from_fn(dgp.n_z, dgp.n_u, |z, u| dgp.p_z[x][u][a][z]);
            let m_wz = p_w_given_z_matrix(dgp, a, x);
            let rank_w = linalg::rank(&m_w, Some(ORACLE_RCOND));
            let rank_z = linalg::rank(&m_z, Some(ORACLE_RCOND));
            h_exists &= rank_w == dgp.n_u;
            q_exists &= rank_z == dgp.n_u;
            h_unique &= rank_w == dgp.n_w;
            q_unique &= rank_z == dgp.n_z;
            rw.push(rank_w);
            rz.push(rank_z);
            rwz.push(linalg::rank(&m_wz, Some(ORACLE_RCOND)));
        }
        rank_w_given_u.push(rw);
        rank_z_given_u.push(rz);
        rank_w_given_z.push(rwz);
    }
    let mut notes = Vec::new();
    if dgp.n_w > dgp.n_u {
        notes.push(format!(
            "|W| = {} > |U| = {}: rank P(W|Z) <= |U| in every cell, W-side completeness \
             cannot hold and outcome bridges are nonunique (null dimension >= {})",
            dgp.n_w,
            dgp.n_u,
            dgp.n_w - dgp.n_u
        ));
    }
    if dgp.n_z > dgp.n_u {
        notes.push(format!(
            "|Z| = {} > |U| = {}: rank P(Z|W) <= |U| in every cell, Z-side completeness \
             cannot hold and action bridges are nonunique (null dimension >= {})",
            dgp.n_z,
            dgp.n_u,
            dgp.n_z - dgp.n_u
        ));
    }
    if h_unique && q_unique && h_exists && q_exists {
        notes.push("square invertible proxy tables: both bridges exist and are unique".to_string());
    }
    CompletenessReport {
        n_u: dgp.n_u,
        n_w: dgp.n_w,
        n_z: dgp.n_z,
        rank_w_given_u,
        rank_z_given_u,
        rank_w_given_z,
        h_exists_all_cells: h_exists,
        q_exists_all_cells: q_exists,
        h_unique,
        q_unique,
        notes,
    }
}

/// Packages a per-(proxy level, action, x) value table as a
/// saturated-indicator [`BridgeFit`] over this DGP's integer coding, so
/// oracle bridges ride the same paths as fitted ones. `value(p, a, x)`
/// supplies the bridge value; `p` indexes W levels for outcome bridges
/// and Z levels for action bridges.
pub fn saturated_bridge_fit(
    dgp: &DiscreteDgp,
    kind: BridgeKind,
    value: impl Fn(usize, usize, usize) -> f64,
) -> Result<BridgeFit> {
    let levels = match kind {
        BridgeKind::Outcome => dgp.n_w,
        BridgeKind::Action => dgp.n_z,
    };
    let feature = FeatureMap::build(FeatureSpec::SaturatedIndicator {
        proxy_levels: vec![levels],
        n_actions: dgp.n_a,
        x_levels: vec![dgp.n_x],
    })?;
    let mut coeffs = vec![0.0; feature.dim()];
    for p in 0..levels {
        for a in 0..dgp.n_a {
            for x in 0..dgp.n_x {
                coeffs[(p * dgp.n_a + a) * dgp.n_x + x] = value(p, a, x);
            }
        }
    }
    Ok(BridgeFit {
        kind,
        action_kind: dgp.action_kind(),
        class: ClassDescriptor::Sieve { feature, coeffs },
        diagnostics: FitDiagnostics {
            objective: 0.0,
            strategy: Strategy::Unstabilized,
            lambda: 0.0,
            gamma: 0.0,
            rho: 0.0,
            n: 0,
            notes: vec!["packaged from a value table, not fitted".to_string()],
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 2-level everything, x-dependent, strongly confounded, ATE contrast.
    fn unique_dgp() -> DiscreteDgp {
        DiscreteDgp::new(
            vec![0.6, 0.4],
            vec![vec![0.7, 0.3], vec![0.35, 0.65]],
            vec![
                vec![vec![0.75, 0.25], vec![0.3, 0.7]],
                vec![vec![0.6, 0.4], vec![0.2, 0.8]],
            ],
            vec![
                vec![vec![0.85, 0.15], vec![0.25, 0.75]],
                vec![vec![0.8, 0.2], vec![0.3, 0.7]],
            ],
            vec![
                vec![
                    vec![vec![0.8, 0.2], vec![0.7, 0.3]],
                    vec![vec![0.3, 0.7], vec![0.2, 0.8]],
                ],
                vec![
                    vec![vec![0.75, 0.25], vec![0.85, 0.15]],
                    vec![vec![0.35, 0.65], vec![0.25, 0.75]],
                ],
            ],
            vec![
                vec![vec![0.5, 1.8], vec![-0.6, 0.9]],
                vec![vec![0.2, 1.1], vec![-1.0, 0.4]],
            ],
            0.5,
            vec![vec![-1.0, 1.0], vec![-1.0, 1.0]],
        )
        .unwrap()
    }

    #[test]
    fn validation_rejects_broken_tables() {
        // Row that does not sum to 1.
        assert!(DiscreteDgp::new(
            vec![0.5, 0.4],
            vec![vec![1.0], vec![1.0]],
            vec![vec![vec![0.5, 0.5]], vec![vec![0.5, 0.5]]],
            vec![vec![vec![1.0]], vec![vec![1.0]]],
            vec![vec![vec![vec![1.0], vec![1.0]]], vec![vec![vec![1.0], vec![1.0]]]],
            vec![vec![vec![0.0, 1.0]], vec![vec![0.0, 1.0]]],
            0.0,
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        )
        .is_err());
        // Overlap violation: f(a|u,x) = 0 in one cell.
        assert!(DiscreteDgp::new(
            vec![1.0],
            vec![vec![1.0]],
            vec![vec![vec![0.0, 1.0]]],
            vec![vec![vec![1.0]]],
            vec![vec![vec![vec![1.0], vec![1.0]]]],
            vec![vec![vec![0.0, 1.0]]],
            0.0,
            vec![vec![0.5, 0.5]],
        )
        .is_err());
        // Negative probability.
        assert!(DiscreteDgp::new(
            vec![1.5, -0.5],
            vec![vec![1.0], vec![1.0]],
            vec![vec![vec![0.5, 0.5]], vec![vec![0.5, 0.5]]],
            vec![vec![vec![1.0]], vec![vec![1.0]]],
            vec![vec![vec![vec![1.0], vec![1.0]]], vec![vec![vec![1.0], vec![1.0]]]],
            vec![vec![vec![0.0, 1.0]], vec![vec![0.0, 1.0]]],
            0.0,
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        )
        .is_err());
    }

    #[test]
    fn generation_is_deterministic_and_shapes_hold() {
        let dgp = unique_dgp();
        let empty = generate_discrete(&dgp, 0, 3);
        assert_eq!(empty.n(), 0);
        assert_eq!(empty.p_w(), 1);
        assert_eq!(empty.p_z(), 1);
        assert_eq!(empty.d_x(), 1);

        let t1 = generate_discrete(&dgp, 500, 42);
        let t2 = generate_discrete(&dgp, 500, 42);
        let t3 = generate_discrete(&dgp, 500, 43);
        assert_eq!(t1, t2);
        assert_ne!(t1, t3);
        assert_eq!(t1.n(), 500);
        // The latent-u variant agrees on the observed part.
        let (t4, u) = generate_discrete_with_latent_u(&dgp, 500, 42);
        assert_eq!(t1, t4);
        assert_eq!(u.len(), 500);
    }

    #[test]
    fn identity_proxies_reveal_u() {
        // P(W|U) = P(Z|U) = I: the proxies copy the confounder exactly.
        let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let dgp = DiscreteDgp::new(
            vec![1.0],
            vec![vec![0.5, 0.5]],
            vec![vec![vec![0.6, 0.4], vec![0.35, 0.65]]],
            vec![eye.clone()],
            vec![vec![
                vec![vec![1.0, 0.0], vec![1.0, 0.0]],
                vec![vec![0.0, 1.0], vec![0.0, 1.0]],
            ]],
            vec![vec![vec![0.0, 1.0], vec![0.5, 2.0]]],
            0.3,
            vec![vec![-1.0, 1.0]],
        )
        .unwrap();
        let (table, u) = generate_discrete_with_latent_u(&dgp, 2000, 7);
        for i in 0..table.n() {
            assert_eq!(table.w_row(i)[0] as usize, u[i]);
            assert_eq!(table.z_row(i)[0] as usize, u[i]);
        }
        // h0 on identity proxies is the latent outcome mean itself.
        let sets = oracle_discrete_bridge_sets(&dgp).unwrap();
        for a in 0..2 {
            for w in 0..2 {
                assert!((sets.h0(w, a, 0) - dgp.mean_y(w, a, 0)).abs() < 1e-12);
            }
            assert_eq!(sets.h_null_dim(a, 0), 0);
        }
    }

    #[test]
    fn action_marginal_matches_enumeration() {
        let dgp = unique_dgp();
        let n = 100_000;
        let table = generate_discrete(&dgp, n, 11);
        let mut counts = vec![0usize; dgp.n_a()];
        for i in 0..n {
            counts[table.a_index(i)] += 1;
        }
        for a in 0..dgp.n_a() {
            let mut p = 0.0;
            for x in 0..dgp.n_x() {
                for u in 0..dgp.n_u() {
                    p += dgp.p_joint_uax(u, a, x);
                }
            }
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            let emp = counts[a] as f64 / n as f64;
            assert!(
                (emp - p).abs() <= 3.0 * sd,
                "action {a}: empirical {emp} vs exact {p} (sd {sd})"
            );
        }
    }

    #[test]
    fn oracle_j_agrees_with_full_joint_enumeration() {
        // Second route: inverse-weighted outcome summed over the entire
        // joint support including both proxies.
        for seed in [1, 2, 3] {
            let dgp = random_dgp(2, 2, 2, 2, 2, 0.2, seed);
            let c = dgp.contrast();
            let j_reg = oracle_discrete_j(&dgp, &c).unwrap();
            let mut j_ipw = 0.0;
            for x in 0..dgp.n_x() {
                for u in 0..dgp.n_u() {
                    for a in 0..dgp.n_a() {
                        for z in 0..dgp.n_z() {
                            for w in 0..dgp.n_w() {
                                let mass = dgp.p_joint_uax(u, a, x)
                                    * dgp.p_z_at(z, u, a, x)
                                    * dgp.p_w_at(w, u, x);
                                j_ipw += mass * dgp.pi_at(a, x) / dgp.f_at(a, u, x)
                                    * dgp.mean_y(u, a, x);
                            }
                        }
                    }
                }
            }
            assert!((j_reg - j_ipw).abs() < 1e-12, "seed {seed}: {j_reg} vs {j_ipw}");
        }
    }

    #[test]
    fn constant_outcome_recovers_policy_value() {
        // Proper policy density and Y identically c: J = c.
        let dgp = random_dgp(2, 3, 3, 2, 1, 0.0, 5);
        let n_u = dgp.n_u();
        let n_a = dgp.n_a();
        let y_const =
            vec![vec![vec![2.5; n_a]; n_u]];
        let dgp = DiscreteDgp::new(
            (0..dgp.n_x()).map(|x| dgp.p_x_at(x)).collect(),
            vec![(0..n_u).map(|u| dgp.p_u_at(u, 0)).collect()],
            vec![(0..n_u)
                .map(|u| (0..n_a).map(|a| dgp.f_at(a, u, 0)).collect())
                .collect()],
            vec![(0..n_u)
                .map(|u| (0..dgp.n_w()).map(|w| dgp.p_w_at(w, u, 0)).collect())
                .collect()],
            vec![(0..n_u)
                .map(|u| {
                    (0..n_a)
                        .map(|a| (0..dgp.n_z()).map(|z| dgp.p_z_at(z, u, a, 0)).collect())
                        .collect()
                })
                .collect()],
            y_const,
            0.0,
            vec![(0..n_a).map(|a| dgp.pi_at(a, 0)).collect()],
        )
        .unwrap();
        assert!((dgp.oracle_j() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn bridge_sets_satisfy_latent_equations() {
        for (dgp, null_h, null_q) in [
            (unique_dgp(), 0, 0),
            (random_dgp(2, 3, 3, 2, 1, 0.2, 9), 1, 1),
        ] {
            let sets = oracle_discrete_bridge_sets(&dgp).unwrap();
            for x in 0..dgp.n_x() {
                for a in 0..dgp.n_a() {
                    assert_eq!(sets.h_null_dim(a, x), null_h);
                    assert_eq!(sets.q_null_dim(a, x), null_q);
                    for u in 0..dgp.n_u() {
                        let lhs_h: f64 = (0..dgp.n_w())
                            .map(|w| sets.h0(w, a, x) * dgp.p_w_at(w, u, x))
                            .sum();
                        assert!((lhs_h - dgp.mean_y(u, a, x)).abs() < 1e-10);
                        let lhs_q: f64 = (0..dgp.n_z())
                            .map(|z| sets.q0(z, a, x) * dgp.p_z_at(z, u, a, x) * dgp.f_at(a, u, x))
                            .sum();
                        assert!((lhs_q - 1.0).abs() < 1e-10);
                        // Null directions are invisible at the latent level too.
                        for v in &sets.h_null[x][a] {
                            let img: f64 =
                                (0..dgp.n_w()).map(|w| v[w] * dgp.p_w_at(w, u, x)).sum();
                            assert!(img.abs() < 1e-10);
                        }
                        for v in &sets.q_null[x][a] {
                            let img: f64 = (0..dgp.n_z())
                                .map(|z| v[z] * dgp.p_z_at(z, u, a, x) * dgp.f_at(a, u, x))
                                .sum();
                            assert!(img.abs() < 1e-10);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn bridge_sets_satisfy_observed_moment_equations() {
        // Latent solutions solve the observed conditional moments as well;
        // adding null-space directions changes nothing, leaving the span
        // does.
        let dgp = random_dgp(2, 3, 3, 2, 2, 0.3, 17);
        let sets = oracle_discrete_bridge_sets(&dgp).unwrap();
        assert!(oracle_residual_h(&dgp, |w, a, x| sets.h0(w, a, x)) < 1e-10);
        assert!(oracle_residual_q(&dgp, |z, a, x| sets.q0(z, a, x)) < 1e-10);

        let shifted_h =
            |w: usize, a: usize, x: usize| sets.h0(w, a, x) + 0.7 * sets.h_null[x][a][0][w];
        let shifted_q =
            |z: usize, a: usize, x: usize| sets.q0(z, a, x) - 1.3 * sets.q_null[x][a][0][z];
        assert!(oracle_residual_h(&dgp, shifted_h) < 1e-10);
        assert!(oracle_residual_q(&dgp, shifted_q) < 1e-10);

        // A direction with a nonzero image scales the residual linearly.
        let bump_h = |eps: f64| {
            oracle_residual_h(&dgp, |w, a, x| sets.h0(w, a, x) + eps * (w as f64 + 1.0))
        };
        let (r1, r2) = (bump_h(0.1), bump_h(0.2));
        assert!(r1 > 1e-3);
        assert!((r2 / r1 - 2.0).abs() < 0.05, "h residual not linear: {r1} {r2}");
        let bump_q = |eps: f64| {
            oracle_residual_q(&dgp, |z, a, x| sets.q0(z, a, x) + eps * (z as f64 + 1.0))
        };
        let (s1, s2) = (bump_q(0.1), bump_q(0.2));
        assert!(s1 > 1e-3);
        assert!((s2 / s1 - 2.0).abs() < 0.05, "q residual not linear: {s1} {s2}");
    }

    #[test]
    fn rank_deficient_proxies_are_rejected() {
        // Both U levels emit the same W law: rank 1 < |U| = 2.
        let flat = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let dgp = DiscreteDgp::new(
            vec![1.0],
            vec![vec![0.5, 0.5]],
            vec![vec![vec![0.5, 0.5], vec![0.5, 0.5]]],
            vec![flat],
            vec![vec![
                vec![vec![0.9, 0.1], vec![0.9, 0.1]],
                vec![vec![0.2, 0.8], vec![0.2, 0.8]],
            ]],
            vec![vec![vec![0.0, 1.0], vec![1.0, 2.0]]],
            0.0,
            vec![vec![0.5, 0.5]],
        )
        .unwrap();
        match oracle_discrete_bridge_sets(&dgp) {
            Err(Error::BridgeExistence(msg)) => assert!(msg.contains("rank")),
            other => panic!("expected bridge existence error, got {other:?}"),
        }
    }

    #[test]
    fn completeness_report_flags_and_product_identity() {
        let square = completeness_rank_check(&unique_dgp());
        assert!(square.h_exists_all_cells && square.q_exists_all_cells);
        assert!(square.h_unique && square.q_unique);
        assert!(square.notes.iter().any(|n| n.contains("unique")));

        let wide = random_dgp(2, 3, 3, 2, 1, 0.2, 23);
        let rep = completeness_rank_check(&wide);
        assert!(rep.h_exists_all_cells && !rep.h_unique);
        assert!(rep.q_exists_all_cells && !rep.q_unique);
        assert_eq!(rep.rank_w_given_u[0][0], 2);
        assert_eq!(rep.rank_w_given_z[0][0], 2);

        // P(W|Z, a, x) two ways: posterior mixing vs direct joint ratio.
        for a in 0..wide.n_a() {
            let via_posterior = p_w_given_z_matrix(&wide, a, 0);
            for z in 0..wide.n_z() {
                let p_zax = wide.p_joint_zax(z, a, 0);
                for w in 0..wide.n_w() {
                    let mut joint = 0.0;
                    for u in 0..wide.n_u() {
                        joint += wide.p_joint_uax(u, a, 0)
                            * wide.p_z_at(z, u, a, 0)
                            * wide.p_w_at(w, u, 0);
                    }
                    let direct = joint / p_zax;
                    assert!((via_posterior[(w, z)] - direct).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn latent_scores_recover_j_in_monte_carlo() {
        // Inverse-weighting, outcome-mean, and combined latent scores all
        // average to J within Monte-Carlo error when U is observed.
        let dgp = unique_dgp();
        let j = dgp.oracle_j();
        let c = dgp.contrast();
        let n = 100_000;
        let (table, u_col) = generate_discrete_with_latent_u(&dgp, n, 29);
        let mut scores_ipw = Vec::with_capacity(n);
        let mut scores_reg = Vec::with_capacity(n);
        let mut scores_dr = Vec::with_capacity(n);
        for i in 0..n {
            let x = table.x_row(i)[0] as usize;
            let a = table.a_index(i);
            let u = u_col[i];
            let y = table.y()[i];
            let k0 = dgp.mean_y(u, a, x);
            let w_ipw = dgp.pi_at(a, x) / dgp.f_at(a, u, x);
            let reg: f64 = c.integrate(&[x as f64], |ap| dgp.mean_y(u, ap.round() as usize, x));
            scores_ipw.push(w_ipw * y);
            scores_reg.push(reg);
            scores_dr.push(w_ipw * (y - k0) + reg);
        }
        for (name, s) in [("ipw", scores_ipw), ("reg", scores_reg), ("dr", scores_dr)] {
            let mean = s.iter().sum::<f64>() / n as f64;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let se = (var / n as f64).sqrt();
            assert!(
                (mean - j).abs() <= 4.0 * se,
                "{name}: mean {mean} vs J {j} (se {se})"
            );
        }
    }

    #[test]
    fn identification_identities_hold_for_arbitrary_candidates() {
        // For any h: E[(T h)(W, X)] - J equals E[pi q0 E[h - Y | Z, A, X]].
        // For any q: E[pi q Y] - J equals E[h0 pi (E[q|W,A,X] - 1/f(A|W,X))].
        // Both sides by exact enumeration, q0/h0 from the oracle solver.
        let dgp = random_dgp(2, 3, 2, 2, 2, 0.4, 31);
        let sets = oracle_discrete_bridge_sets(&dgp).unwrap();
        let j = dgp.oracle_j();
        let mut rng = rng_from_seed(77);
        let h_tab: Vec<f64> = (0..dgp.n_w() * dgp.n_a() * dgp.n_x())
            .map(|_| 4.0 * rng.gen::<f64>() - 2.0)
            .collect();
        let q_tab: Vec<f64> = (0..dgp.n_z() * dgp.n_a() * dgp.n_x())
            .map(|_| 4.0 * rng.gen::<f64>() - 2.0)
            .collect();
        let h = |w: usize, a: usize, x: usize| h_tab[(x * dgp.n_a() + a) * dgp.n_w() + w];
        let q = |z: usize, a: usize, x: usize| q_tab[(x * dgp.n_a() + a) * dgp.n_z() + z];

        // REG side.
        let mut lhs = -j;
        let mut rhs = 0.0;
        for x in 0..dgp.n_x() {
            for w in 0..dgp.n_w() {
                let p_wx: f64 =
                    (0..dgp.n_u()).map(|u| dgp.p_x_at(x) * dgp.p_u_at(u, x) * dgp.p_w_at(w, u, x)).sum();
                let th: f64 = (0..dgp.n_a()).map(|a| dgp.pi_at(a, x) * h(w, a, x)).sum();
                lhs += p_wx * th;
            }
            for a in 0..dgp.n_a() {
                for z in 0..dgp.n_z() {
                    let p_zax = dgp.p_joint_zax(z, a, x);
                    if p_zax == 0.0 {
                        continue;
                    }
                    let post = dgp.posterior_u_given_zax(z, a, x);
                    let mut cond = 0.0;
                    for u in 0..dgp.n_u() {
                        let hbar: f64 =
                            (0..dgp.n_w()).map(|w| dgp.p_w_at(w, u, x) * h(w, a, x)).sum();
                        cond += post[u] * (hbar - dgp.mean_y(u, a, x));
                    }
                    rhs += p_zax * dgp.pi_at(a, x) * sets.q0(z, a, x) * cond;
                }
            }
        }
        assert!((lhs - rhs).abs() < 1e-10, "reg identity: {lhs} vs {rhs}");

        // IPW side.
        let mut lhs = -j;
        for x in 0..dgp.n_x() {
            for u in 0..dgp.n_u() {
                for a in 0..dgp.n_a() {
                    for z in 0..dgp.n_z() {
                        lhs += dgp.p_joint_uax(u, a, x)
                            * dgp.p_z_at(z, u, a, x)
                            * dgp.pi_at(a, x)
                            * q(z, a, x)
                            * dgp.mean_y(u, a, x);
                    }
                }
            }
        }
        let mut rhs = 0.0;
        for x in 0..dgp.n_x() {
            for a in 0..dgp.n_a() {
                for w in 0..dgp.n_w() {
                    let p_wax = dgp.p_joint_wax(w, a, x);
                    if p_wax == 0.0 {
                        continue;
                    }
                    let eq: f64 =
                        (0..dgp.n_z()).map(|z| dgp.p_z_given_wax(z, w, a, x) * q(z, a, x)).sum();
                    rhs += p_wax
                        * sets.h0(w, a, x)
                        * dgp.pi_at(a, x)
                        * (eq - dgp.inv_f_given_wx(a, w, x));
                }
            }
        }
        assert!((lhs - rhs).abs() < 1e-10, "ipw identity: {lhs} vs {rhs}");
    }

    #[test]
    fn serde_round_trip_and_digest() {
        let dgp = unique_dgp();
        let json = dgp.to_json().unwrap();
        let back = DiscreteDgp::from_json(&json).unwrap();
        assert_eq!(dgp, back);
        let d1 = dgp.digest();
        assert_eq!(d1.len(), 64);
        assert_eq!(d1, back.digest());
        let tweaked = dgp.with_pi(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert_ne!(d1, tweaked.digest());
    }

    #[test]
    fn saturated_bridge_fit_reproduces_its_table() {
        let dgp = random_dgp(2, 3, 2, 2, 2, 0.1, 47);
        let table = |p: usize, a: usize, x: usize| {
            0.3 + 0.7 * p as f64 - 0.4 * a as f64 + 0.2 * x as f64
        };
        let h = saturated_bridge_fit(&dgp, BridgeKind::Outcome, table).unwrap();
        let q = saturated_bridge_fit(&dgp, BridgeKind::Action, table).unwrap();
        for x in 0..dgp.n_x {
            for a in 0..dgp.n_a {
                for w in 0..dgp.n_w {
                    let got = h.eval(&[w as f64], a as f64, &[x as f64]);
                    assert!((got - table(w, a, x)).abs() < 1e-15);
                }
                for z in 0..dgp.n_z {
                    let got = q.eval(&[z as f64], a as f64, &[x as f64]);
                    assert!((got - table(z, a, x)).abs() < 1e-15);
                }
            }
        }
    }
}
