//! Linear structural equation model with a latent confounder, vector
//! proxies, and a uniform conditional action density.
//!
//! Structure, with U and X drawn coordinatewise Unif(-1, 1):
//!   A | U, X ~ Unif(lo(U, X), hi(U, X)), both bounds affine in (U, X),
//!   W = alpha_w U + beta_w X + noise,
//!   Z = alpha_z U + beta_z X + gamma_z A + noise,
//!   Y = alpha_y.U + beta_y.X + gamma_y A + omega_y.W + noise.
//! Both bridge equations then have affine solutions indexed by a free
//! parameter theta with theta' alpha = target: the whole solution family is
//! available in closed form, including its nonuniqueness when the proxy
//! dimension exceeds the confounder dimension.

use nalgebra::{DMatrix, DVector};
use rand::distributions::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::Normal;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ActionKind, ContrastSpec, ObservationTable, RowMatrix};
use crate::rng::rng_from_seed;

/// Coefficient set for the linear SEM. Fields are public so instances can
/// be written as struct literals; always construct through
/// [`LinearSemDgp::validated`], which checks ranks and the action window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSemDgp {
    pub p_u: usize,
    pub p_w: usize,
    pub p_z: usize,
    pub d_x: usize,
    /// Outcome equation Y = alpha_y.U + beta_y.X + gamma_y A + omega_y.W + sd_y e.
    pub alpha_y: Vec<f64>,
    pub beta_y: Vec<f64>,
    pub gamma_y: f64,
    pub omega_y: Vec<f64>,
    /// W equation rows: W_i = alpha_w[i].U + beta_w[i].X + sd_w e.
    pub alpha_w: Vec<Vec<f64>>,
    pub beta_w: Vec<Vec<f64>>,
    /// Z equation rows: Z_i = alpha_z[i].U + beta_z[i].X + gamma_z[i] A + sd_z e.
    pub alpha_z: Vec<Vec<f64>>,
    pub beta_z: Vec<Vec<f64>>,
    pub gamma_z: Vec<f64>,
    /// Action window: lo = c_lo + alpha_lo.U + beta_lo.X, hi analogous.
    pub c_lo: f64,
    pub alpha_lo: Vec<f64>,
    pub beta_lo: Vec<f64>,
    pub c_hi: f64,
    pub alpha_hi: Vec<f64>,
    pub beta_hi: Vec<f64>,
    pub sd_y: f64,
    pub sd_w: f64,
    pub sd_z: f64,
}

fn abs_sum(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

impl LinearSemDgp {
    /// Validates shapes, finiteness, full column rank of both proxy loading
    /// matrices, and strict positivity of the action window over the whole
    /// (U, X) box.
    pub fn validated(self) -> Result<LinearSemDgp> {
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let (p_u, p_w, p_z, d_x) = (self.p_u, self.p_w, self.p_z, self.d_x);
        let dim = |name: &str, got: usize, want: usize| -> Result<()> {
            if got != want {
                return Err(Error::validation(format!("{name} has length {got}, expected {want}")));
            }
            Ok(())
        };
        dim("alpha_y", self.alpha_y.len(), p_u)?;
        dim("beta_y", self.beta_y.len(), d_x)?;
        dim("omega_y", self.omega_y.len(), p_w)?;
        dim("alpha_w", self.alpha_w.len(), p_w)?;
        dim("beta_w", self.beta_w.len(), p_w)?;
        dim("alpha_z", self.alpha_z.len(), p_z)?;
        dim("beta_z", self.beta_z.len(), p_z)?;
        dim("gamma_z", self.gamma_z.len(), p_z)?;
        for r in &self.alpha_w {
            dim("alpha_w row", r.len(), p_u)?;
        }
        for r in &self.beta_w {
            dim("beta_w row", r.len(), d_x)?;
        }
        for r in &self.alpha_z {
            dim("alpha_z row", r.len(), p_u)?;
        }
        for r in &self.beta_z {
            dim("beta_z row", r.len(), d_x)?;
        }
        dim("alpha_lo", self.alpha_lo.len(), p_u)?;
        dim("alpha_hi", self.alpha_hi.len(), p_u)?;
        dim("beta_lo", self.beta_lo.len(), d_x)?;
        dim("beta_hi", self.beta_hi.len(), d_x)?;

        let mut all: Vec<f64> = vec![self.gamma_y, self.c_lo, self.c_hi, self.sd_y, self.sd_w, self.sd_z];
        all.extend(self.alpha_y.iter().chain(&self.beta_y).chain(&self.omega_y));
        all.extend(self.gamma_z.iter().chain(&self.alpha_lo).chain(&self.alpha_hi));
        all.extend(self.beta_lo.iter().chain(&self.beta_hi));
        for row in self.alpha_w.iter().chain(&self.beta_w).chain(&self.alpha_z).chain(&self.beta_z) {
            all.extend(row.iter());
        }
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite coefficient"));
        }
        if self.sd_y < 0.0 || self.sd_w < 0.0 || self.sd_z < 0.0 {
            return Err(Error::validation("noise standard deviations must be >= 0"));
        }

        for (name, rows) in [("alpha_w", &self.alpha_w), ("alpha_z", &self.alpha_z)] {
            let m = DMatrix::from_fn(rows.len(), p_u, |i, j| rows[i][j]);
            let r = linalg::rank(&m, None);
            if r < p_u {
                return Err(Error::validation(format!(
                    "{name} has rank {r} < p_u = {p_u}; proxies cannot span the confounder"
                )));
            }
        }

        // Worst case of hi - lo over the box |u|, |x| <= 1.
        let min_width = (self.c_hi - self.c_lo)
            - (0..p_u).map(|j| (self.alpha_hi[j] - self.alpha_lo[j]).abs()).sum::<f64>()
            - (0..d_x).map(|k| (self.beta_hi[k] - self.beta_lo[k]).abs()).sum::<f64>();
        if min_width <= 0.0 {
            return Err(Error::validation(format!(
                "action window can close on the (U, X) box: minimal width {min_width} <= 0"
            )));
        }
        Ok(())
    }

    /// Tightest closed range containing every realizable action.
    pub fn action_range(&self) -> (f64, f64) {
        let lo = self.c_lo - abs_sum(&self.alpha_lo) - abs_sum(&self.beta_lo);
        let hi = self.c_hi + abs_sum(&self.alpha_hi) + abs_sum(&self.beta_hi);
        (lo, hi)
    }

    /// Largest interval contained in the action window for every (u, x) in
    /// the box. A policy-density contrast must be supported inside this
    /// window, or it weights actions some units can never receive and
    /// inverse-weighting identities fail; may be empty (lo >= hi) when the
    /// window moves a lot.
    pub fn policy_window(&self) -> (f64, f64) {
        let lo = self.c_lo + abs_sum(&self.alpha_lo) + abs_sum(&self.beta_lo);
        let hi = self.c_hi - abs_sum(&self.alpha_hi) - abs_sum(&self.beta_hi);
        (lo, hi)
    }

    pub fn action_kind(&self) -> ActionKind {
        let (lo, hi) = self.action_range();
        ActionKind::Continuous { lo, hi }
    }

    fn window(&self, u: &[f64], x: &[f64]) -> (f64, f64) {
        let mut lo = self.c_lo;
        let mut hi = self.c_hi;
        for j in 0..self.p_u {
            lo += self.alpha_lo[j] * u[j];
            hi += self.alpha_hi[j] * u[j];
        }
        for k in 0..self.d_x {
            lo += self.beta_lo[k] * x[k];
            hi += self.beta_hi[k] * x[k];
        }
        (lo, hi)
    }

    /// E[Y | a, u, x], marginalizing the W equation.
    pub fn latent_outcome_mean(&self, a: f64, u: &[f64], x: &[f64]) -> f64 {
        let mut v = self.gamma_y * a;
        for j in 0..self.p_u {
            v += self.alpha_y[j] * u[j];
        }
        for k in 0..self.d_x {
            v += self.beta_y[k] * x[k];
        }
        for i in 0..self.p_w {
            let mut wi = 0.0;
            for j in 0..self.p_u {
                wi += self.alpha_w[i][j] * u[j];
            }
            for k in 0..self.d_x {
                wi += self.beta_w[i][k] * x[k];
            }
            v += self.omega_y[i] * wi;
        }
        v
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<LinearSemDgp> {
        let dgp: LinearSemDgp = serde_json::from_str(s)?;
        dgp.validate()?;
        Ok(dgp)
    }

    /// SHA-256 of the canonical JSON encoding; stable across runs, changes
    /// whenever any coefficient changes.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("validated coefficients serialize");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Samples n rows plus the latent U matrix (row-major, p_u columns).
///
/// Draw order per row is fixed (x, u, a, w noise, z noise, y noise); noise
/// is drawn even at zero standard deviation so the stream layout does not
/// depend on the coefficients.
pub fn generate_linear_sem_with_latent_u(
    dgp: &LinearSemDgp,
    n: usize,
    seed: u64,
) -> Result<(ObservationTable, RowMatrix)> {
    dgp.validate()?;
    let mut rng = rng_from_seed(seed);
    let norm = Normal::new(0.0, 1.0).expect("unit normal");
    let unif = |rng: &mut rand_chacha::ChaCha12Rng| 2.0 * rng.gen::<f64>() - 1.0;

    let mut y = Vec::with_capacity(n);
    let mut a_col = Vec::with_capacity(n);
    let mut w = RowMatrix::zero_rows(dgp.p_w);
    let mut z = RowMatrix::zero_rows(dgp.p_z);
    let mut x_m = RowMatrix::zero_rows(dgp.d_x);
    let mut u_m = RowMatrix::zero_rows(dgp.p_u);
    let mut x_row = vec![0.0; dgp.d_x];
    let mut u_row = vec![0.0; dgp.p_u];
    let mut w_row = vec![0.0; dgp.p_w];
    let mut z_row = vec![0.0; dgp.p_z];
    for _ in 0..n {
        for v in &mut x_row {
            *v = unif(&mut rng);
        }
        for v in &mut u_row {
            *v = unif(&mut rng);
        }
        let (lo, hi) = dgp.window(&u_row, &x_row);
        let a = lo + (hi - lo) * rng.gen::<f64>();
        for i in 0..dgp.p_w {
            let mut wi = dgp.sd_w * norm.sample(&mut rng);
            for j in 0..dgp.p_u {
                wi += dgp.alpha_w[i][j] * u_row[j];
            }
            for k in 0..dgp.d_x {
                wi += dgp.beta_w[i][k] * x_row[k];
            }
            w_row[i] = wi;
        }
        for i in 0..dgp.p_z {
            let mut zi = dgp.gamma_z[i] * a + dgp.sd_z * norm.sample(&mut rng);
            for j in 0..dgp.p_u {
                zi += dgp.alpha_z[i][j] * u_row[j];
            }
            for k in 0..dgp.d_x {
                zi += dgp.beta_z[i][k] * x_row[k];
            }
            z_row[i] = zi;
        }
        let mut yi = dgp.gamma_y * a + dgp.sd_y * norm.sample(&mut rng);
        for j in 0..dgp.p_u {
            yi += dgp.alpha_y[j] * u_row[j];
        }
        for k in 0..dgp.d_x {
            yi += dgp.beta_y[k] * x_row[k];
        }
        for i in 0..dgp.p_w {
            yi += dgp.omega_y[i] * w_row[i];
        }
        y.push(yi);
        a_col.push(a);
        w.push_row(&w_row);
        z.push_row(&z_row);
        x_m.push_row(&x_row);
        u_m.push_row(&u_row);
    }
    let table = ObservationTable::new(y, w, z, a_col, x_m, dgp.action_kind())?;
    Ok((table, u_m))
}

/// Samples n observed rows; deterministic given (dgp, n, seed).
pub fn generate_linear_sem(dgp: &LinearSemDgp, n: usize, seed: u64) -> Result<ObservationTable> {
    Ok(generate_linear_sem_with_latent_u(dgp, n, seed)?.0)
}

/// An affine function of (proxy, a, x); the closed form both bridge
/// families take in this model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineBridge {
    pub coef_proxy: Vec<f64>,
    pub coef_a: f64,
    pub coef_x: Vec<f64>,
    pub intercept: f64,
}

impl AffineBridge {
    pub fn eval(&self, proxy: &[f64], a: f64, x: &[f64]) -> f64 {
        debug_assert_eq!(proxy.len(), self.coef_proxy.len());
        debug_assert_eq!(x.len(), self.coef_x.len());
        let mut v = self.intercept + self.coef_a * a;
        for (c, p) in self.coef_proxy.iter().zip(proxy) {
            v += c * p;
        }
        for (c, xv) in self.coef_x.iter().zip(x) {
            v += c * xv;
        }
        v
    }
}

/// Solves theta' alpha = target, returning the minimum-norm solution plus
/// an optional step along the null-space basis of alpha'.
fn solve_theta(
    alpha_rows: &[Vec<f64>],
    p_u: usize,
    target: &[f64],
    choice: Option<&[f64]>,
    what: &str,
) -> Result<Vec<f64>> {
    let p = alpha_rows.len();
    let at = DMatrix::from_fn(p_u, p, |j, i| alpha_rows[i][j]);
    let rhs = DVector::from_column_slice(target);
    let mut theta = linalg::lstsq_min_norm(&at, &rhs, None);
    let null = linalg::null_space(&at, None);
    if let Some(t) = choice {
        if t.len() != null.ncols() {
            return Err(Error::validation(format!(
                "{what}: free-parameter vector has length {}, null space has dimension {}",
                t.len(),
                null.ncols()
            )));
        }
        for (k, &tk) in t.iter().enumerate() {
            theta += null.column(k) * tk;
        }
    }
    let resid = (&at * &theta - &rhs).amax();
    if resid > 1e-10 * (1.0 + rhs.amax()) {
        return Err(Error::computation(format!(
            "{what}: constraint system theta' alpha = target is inconsistent (residual {resid})"
        )));
    }
    Ok(theta.iter().cloned().collect())
}

/// Closed-form bridge pair (h0, q0). `theta_w_choice` and `theta_z_choice`
/// move along the respective null spaces; `None` picks the minimum-norm
/// member of each family.
///
/// h0(w, a, x) = (theta_w + omega_y)'w + (beta_y - beta_w' theta_w)'x + gamma_y a
///   with alpha_w' theta_w = alpha_y;
/// q0(z, a, x) = theta_z'z + (d_beta - beta_z' theta_z)'x - theta_z' gamma_z a + d_c
///   with alpha_z' theta_z = alpha_hi - alpha_lo, d_beta = beta_hi - beta_lo,
///   d_c = c_hi - c_lo, so that E[q0 | A, U, X] = hi - lo = 1/f(A|U,X).
pub fn oracle_linear_sem_bridges(
    dgp: &LinearSemDgp,
    theta_w_choice: Option<&[f64]>,
    theta_z_choice: Option<&[f64]>,
) -> Result<(AffineBridge, AffineBridge)> {
    dgp.validate()?;
    let theta_w = solve_theta(&dgp.alpha_w, dgp.p_u, &dgp.alpha_y, theta_w_choice, "theta_w")?;
    let target_z: Vec<f64> =
        (0..dgp.p_u).map(|j| dgp.alpha_hi[j] - dgp.alpha_lo[j]).collect();
    let theta_z = solve_theta(&dgp.alpha_z, dgp.p_u, &target_z, theta_z_choice, "theta_z")?;

    let h_proxy: Vec<f64> =
        (0..dgp.p_w).map(|i| theta_w[i] + dgp.omega_y[i]).collect();
    let h_x: Vec<f64> = (0..dgp.d_x)
        .map(|k| dgp.beta_y[k] - (0..dgp.p_w).map(|i| dgp.beta_w[i][k] * theta_w[i]).sum::<f64>())
        .collect();
    let h0 = AffineBridge {
        coef_proxy: h_proxy,
        coef_a: dgp.gamma_y,
        coef_x: h_x,
        intercept: 0.0,
    };

    let q_x: Vec<f64> = (0..dgp.d_x)
        .map(|k| {
            dgp.beta_hi[k] - dgp.beta_lo[k]
                - (0..dgp.p_z).map(|i| dgp.beta_z[i][k] * theta_z[i]).sum::<f64>()
        })
        .collect();
    let q_a: f64 = -(0..dgp.p_z).map(|i| theta_z[i] * dgp.gamma_z[i]).sum::<f64>();
    let q0 = AffineBridge {
        coef_proxy: theta_z,
        coef_a: q_a,
        coef_x: q_x,
        intercept: dgp.c_hi - dgp.c_lo,
    };
    Ok((h0, q0))
}

/// J for this model by Monte-Carlo over the (U, X) law: the average of
/// the contrast-integrated latent outcome mean. Returns (estimate,
/// standard error); exact integration is not attempted because J depends on
/// the (U, X) law only through this smooth average.
pub fn oracle_linear_sem_j(
    dgp: &LinearSemDgp,
    contrast: &ContrastSpec,
    n_mc: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    dgp.validate()?;
    contrast.check_compatible(&dgp.action_kind())?;
    if n_mc < 2 {
        return Err(Error::validation("oracle_linear_sem_j needs n_mc >= 2"));
    }
    let mut rng = rng_from_seed(seed);
    let mut u_row = vec![0.0; dgp.p_u];
    let mut x_row = vec![0.0; dgp.d_x];
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..n_mc {
        for v in &mut x_row {
            *v = 2.0 * rng.gen::<f64>() - 1.0;
        }
        for v in &mut u_row {
            *v = 2.0 * rng.gen::<f64>() - 1.0;
        }
        let s = contrast.integrate(&x_row, |a| dgp.latent_outcome_mean(a, &u_row, &x_row));
        sum += s;
        sumsq += s * s;
    }
    let mean = sum / n_mc as f64;
    let var = (sumsq - n_mc as f64 * mean * mean) / (n_mc as f64 - 1.0);
    Ok((mean, (var.max(0.0) / n_mc as f64).sqrt()))
}

/// Uniform policy density 1/(hi - lo) on [lo, hi] under a three-node
/// Simpson rule, which integrates cubics exactly; every bridge expression
/// in this model is at most quadratic in a. The density is zero outside
/// [lo, hi], so evaluating it at realized actions outside the policy
/// support gives the correct weight.
pub fn uniform_density_contrast(lo: f64, hi: f64) -> Result<ContrastSpec> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::validation(format!("need finite lo < hi, got [{lo}, {hi}]")));
    }
    let width = hi - lo;
    ContrastSpec::quadrature(
        "uniform_density",
        vec![lo, 0.5 * (lo + hi), hi],
        vec![width / 6.0, 4.0 * width / 6.0, width / 6.0],
        move |a, _x| {
            if a < lo || a > hi {
                0.0
            } else {
                1.0 / width
            }
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar confounder, two proxies each side, one covariate.
    fn sem() -> LinearSemDgp {
        LinearSemDgp {
            p_u: 1,
            p_w: 2,
            p_z: 2,
            d_x: 1,
            alpha_y: vec![1.4],
            beta_y: vec![0.6],
            gamma_y: 0.9,
            omega_y: vec![0.5, -0.3],
            alpha_w: vec![vec![1.0], vec![-0.7]],
            beta_w: vec![vec![0.2], vec![0.4]],
            alpha_z: vec![vec![0.8], vec![0.5]],
            beta_z: vec![vec![-0.3], vec![0.1]],
            gamma_z: vec![0.25, -0.15],
            c_lo: -1.0,
            alpha_lo: vec![0.3],
            beta_lo: vec![0.1],
            c_hi: 1.2,
            alpha_hi: vec![0.5],
            beta_hi: vec![-0.1],
            sd_y: 0.4,
            sd_w: 0.3,
            sd_z: 0.3,
            }
        .validated()
        .unwrap()
    }

    #[test]
    fn validation_catches_rank_and_window_failures() {
        let mut bad = sem();
        bad.alpha_w = vec![vec![0.0], vec![0.0]];
        assert!(bad.validated().is_err());

        let mut bad = sem();
        bad.c_hi = -0.95;
        assert!(bad.validated().is_err());

        let mut bad = sem();
        bad.sd_w = -0.1;
        assert!(bad.validated().is_err());
    }

    #[test]
    fn noiseless_structural_wiring() {
        let dgp = LinearSemDgp {
            p_u: 0,
            p_w: 2,
            p_z: 1,
            d_x: 0,
            alpha_y: vec![],
            beta_y: vec![],
            gamma_y: 0.7,
            omega_y: vec![0.5, -0.25],
            alpha_w: vec![vec![], vec![]],
            beta_w: vec![vec![], vec![]],
            alpha_z: vec![vec![]],
            beta_z: vec![vec![]],
            gamma_z: vec![1.0],
            c_lo: 0.0,
            alpha_lo: vec![],
            beta_lo: vec![],
            c_hi: 1.0,
            alpha_hi: vec![],
            beta_hi: vec![],
            sd_y: 0.0,
            sd_w: 0.0,
            sd_z: 0.0,
        }
        .validated()
        .unwrap();
        let t = generate_linear_sem(&dgp, 50, 3).unwrap();
        for i in 0..t.n() {
            let w = t.w_row(i);
            assert_eq!(w, &[0.0, 0.0]);
            let want = 0.5 * w[0] - 0.25 * w[1] + 0.7 * t.a()[i];
            assert!((t.y()[i] - want).abs() < 1e-14);
            assert!((t.z_row(i)[0] - t.a()[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let dgp = sem();
        let t1 = generate_linear_sem(&dgp, 300, 12).unwrap();
        let t2 = generate_linear_sem(&dgp, 300, 12).unwrap();
        let t3 = generate_linear_sem(&dgp, 300, 13).unwrap();
        assert_eq!(t1, t2);
        assert_ne!(t1, t3);
        match t1.action_kind() {
            ActionKind::Continuous { lo, hi } => {
                assert!(t1.a().iter().all(|&a| a >= *lo && a <= *hi));
            }
            _ => panic!("continuous actions expected"),
        }
    }

    #[test]
    fn proxy_covariance_matches_analytic_form() {
        // No covariates, no action term in Z: Cov(Z, W) = alpha_z Var(U) alpha_w'
        // with Var(U) = 1/3 for Unif(-1, 1).
        let dgp = LinearSemDgp {
            p_u: 1,
            p_w: 2,
            p_z: 2,
            d_x: 0,
            alpha_y: vec![1.0],
            beta_y: vec![],
            gamma_y: 0.5,
            omega_y: vec![0.0, 0.0],
            alpha_w: vec![vec![0.9], vec![-0.6]],
            beta_w: vec![vec![], vec![]],
            alpha_z: vec![vec![0.7], vec![0.4]],
            beta_z: vec![vec![], vec![]],
            gamma_z: vec![0.0, 0.0],
            c_lo: -1.0,
            alpha_lo: vec![0.0],
            beta_lo: vec![],
            c_hi: 1.0,
            alpha_hi: vec![0.0],
            beta_hi: vec![],
            sd_y: 0.1,
            sd_w: 0.2,
            sd_z: 0.2,
        }
        .validated()
        .unwrap();
        let n = 200_000;
        let t = generate_linear_sem(&dgp, n, 21).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                // Means are zero by construction; use raw cross moments and
                // their empirical standard error.
                let prods: Vec<f64> =
                    (0..n).map(|r| t.z_row(r)[i] * t.w_row(r)[j]).collect();
                let mean = prods.iter().sum::<f64>() / n as f64;
                let var = prods.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
                let se = (var / n as f64).sqrt();
                let want = dgp.alpha_z[i][0] * dgp.alpha_w[j][0] / 3.0;
                assert!(
                    (mean - want).abs() <= 5.0 * se,
                    "cov[{i}][{j}]: {mean} vs {want} (se {se})"
                );
            }
        }
    }

    #[test]
    fn square_loading_gives_unique_theta() {
        let dgp = LinearSemDgp {
            p_u: 1,
            p_w: 1,
            p_z: 1,
            d_x: 0,
            alpha_y: vec![1.2],
            beta_y: vec![],
            gamma_y: 0.0,
            omega_y: vec![0.3],
            alpha_w: vec![vec![0.8]],
            beta_w: vec![vec![]],
            alpha_z: vec![vec![0.5]],
            beta_z: vec![vec![]],
            gamma_z: vec![0.1],
            c_lo: -1.0,
            alpha_lo: vec![0.2],
            beta_lo: vec![],
            c_hi: 1.0,
            alpha_hi: vec![0.4],
            beta_hi: vec![],
            sd_y: 0.0,
            sd_w: 0.0,
            sd_z: 0.0,
        }
        .validated()
        .unwrap();
        let (h0, q0) = oracle_linear_sem_bridges(&dgp, None, None).unwrap();
        // theta_w = alpha_y / alpha_w, theta_z = (alpha_hi - alpha_lo) / alpha_z.
        assert!((h0.coef_proxy[0] - (1.2 / 0.8 + 0.3)).abs() < 1e-12);
        assert!((q0.coef_proxy[0] - 0.2 / 0.5).abs() < 1e-12);
        assert!((q0.intercept - 2.0).abs() < 1e-12);
        // Mismatched free-parameter length is rejected.
        assert!(oracle_linear_sem_bridges(&dgp, Some(&[1.0]), None).is_err());
    }

    #[test]
    fn nonunique_bridges_share_latent_conditional_means() {
        let dgp = sem();
        let (h_a, q_a) = oracle_linear_sem_bridges(&dgp, None, None).unwrap();
        let (h_b, q_b) =
            oracle_linear_sem_bridges(&dgp, Some(&[1.5]), Some(&[-2.0])).unwrap();
        assert_ne!(h_a, h_b);
        assert_ne!(q_a, q_b);

        // Analytic check over a grid: E[h | u, a, x] and E[q | a, u, x]
        // agree for both members of each family.
        for &u in &[-1.0, -0.3, 0.4, 1.0] {
            for &xv in &[-1.0, 0.0, 0.8] {
                for &a in &[-0.5, 0.1, 0.9] {
                    let ew: Vec<f64> = (0..dgp.p_w)
                        .map(|i| dgp.alpha_w[i][0] * u + dgp.beta_w[i][0] * xv)
                        .collect();
                    let ez: Vec<f64> = (0..dgp.p_z)
                        .map(|i| {
                            dgp.alpha_z[i][0] * u + dgp.beta_z[i][0] * xv + dgp.gamma_z[i] * a
                        })
                        .collect();
                    let mh_a = h_a.eval(&ew, a, &[xv]);
                    let mh_b = h_b.eval(&ew, a, &[xv]);
                    assert!((mh_a - mh_b).abs() < 1e-10);
                    // And they equal the latent outcome mean.
                    assert!((mh_a - dgp.latent_outcome_mean(a, &[u], &[xv])).abs() < 1e-10);
                    let mq_a = q_a.eval(&ez, a, &[xv]);
                    let mq_b = q_b.eval(&ez, a, &[xv]);
                    assert!((mq_a - mq_b).abs() < 1e-10);
                    // E[q | a, u, x] = hi - lo = 1 / f(a | u, x).
                    let (lo, hi) = dgp.window(&[u], &[xv]);
                    assert!((mq_a - (hi - lo)).abs() < 1e-10);
                }
            }
        }

        // Monte-Carlo cross-check against latent test functions:
        // E[(h_a - h_b)(W, A, X) g(U, A, X)] = 0 for g in {1, u, a, x}.
        let n = 60_000;
        let (t, u_m) = generate_linear_sem_with_latent_u(&dgp, n, 55).unwrap();
        let gs: [fn(f64, f64, f64) -> f64; 4] =
            [|_, _, _| 1.0, |u, _, _| u, |_, a, _| a, |_, _, x| x];
        for (gi, g) in gs.iter().enumerate() {
            let vals: Vec<f64> = (0..n)
                .map(|i| {
                    let diff = h_a.eval(t.w_row(i), t.a()[i], t.x_row(i))
                        - h_b.eval(t.w_row(i), t.a()[i], t.x_row(i));
                    diff * g(u_m.row(i)[0], t.a()[i], t.x_row(i)[0])
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let se = (var / n as f64).sqrt().max(1e-12);
            assert!(mean.abs() <= 4.0 * se, "test function {gi}: mean {mean}, se {se}");
        }
    }

    #[test]
    fn bridges_reproduce_j_in_monte_carlo() {
        let dgp = sem();
        // The policy must be supported where every unit's action window
        // reaches, not on the global range.
        let (lo, hi) = dgp.policy_window();
        assert!(lo < hi);
        let c = uniform_density_contrast(lo, hi).unwrap();
        let (j, se_j) = oracle_linear_sem_j(&dgp, &c, 400_000, 91).unwrap();
        let (h0, q0) = oracle_linear_sem_bridges(&dgp, None, None).unwrap();

        let n = 150_000;
        let t = generate_linear_sem(&dgp, n, 92).unwrap();
        let mut reg = Vec::with_capacity(n);
        let mut ipw = Vec::with_capacity(n);
        for i in 0..n {
            let x = t.x_row(i);
            reg.push(c.integrate(x, |a| h0.eval(t.w_row(i), a, x)));
            let pi = c.pi(t.a()[i], x);
            ipw.push(pi * q0.eval(t.z_row(i), t.a()[i], x) * t.y()[i]);
        }
        for (name, s) in [("reg", reg), ("ipw", ipw)] {
            let mean = s.iter().sum::<f64>() / n as f64;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let se = (var / n as f64).sqrt();
            let band = 4.0 * (se * se + se_j * se_j).sqrt();
            assert!(
                (mean - j).abs() <= band,
                "{name}: {mean} vs J {j} (band {band})"
            );
        }
    }

    #[test]
    fn simpson_rule_is_exact_on_cubics() {
        let c = uniform_density_contrast(-0.5, 1.5).unwrap();
        let integral = c.integrate(&[], |a| a * a * a - 2.0 * a * a + a);
        // (1/2) int_{-1/2}^{3/2} (a^3 - 2a^2 + a) da.
        let anti = |a: f64| a.powi(4) / 4.0 - 2.0 * a.powi(3) / 3.0 + a * a / 2.0;
        let want = (anti(1.5) - anti(-0.5)) / 2.0;
        assert!((integral - want).abs() < 1e-12);
    }

    #[test]
    fn serde_round_trip() {
        let dgp = sem();
        let json = dgp.to_json().unwrap();
        let back = LinearSemDgp::from_json(&json).unwrap();
        assert_eq!(dgp, back);
    }
}
