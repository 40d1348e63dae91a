//! Minimax bridge estimation with linear hypothesis and critic classes.
//!
//! Both bridge fits solve a convex-concave game. With hypothesis features
//! ψ̃ (outcome side) or φ̃ (action side) and critic features φ resp. ψ, the
//! game has a closed form:
//!
//! * plain game (lambda = 0): the critic ranges over the unit ball, the
//!   solved objective is ‖v(α)‖² for the empirical moment vector v, and the
//!   minimizer is a pseudoinverse solve (min-norm under degeneracy);
//! * stabilized game (lambda > 0): the critic pays an empirical-L2 penalty
//!   lambda and a ridge gamma, the solved objective is the sandwich
//!   quadratic form v(α)ᵀ{gamma I + lambda Σ}⁻¹ v(α) with Σ the critic
//!   second-moment matrix.
//!
//! The action-bridge fit never estimates a propensity: its moment vector
//! uses only the contrast-integrated critic E_n[Tψ].

pub mod features;

pub use features::{FeatureMap, FeatureSpec};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{
    BridgeFit, BridgeKind, ClassDescriptor, ContrastSpec, FitDiagnostics, Integration,
    ObservationTable, Strategy,
};

/// Hypothesis/critic pair plus game hyperparameters.
///
/// `lambda == 0` selects the plain game; `lambda > 0` selects the
/// stabilized game and requires `gamma > 0` so the critic sandwich matrix
/// is invertible. `rho >= 0` adds Tikhonov mass inside the inverted
/// hypothesis-side matrix.
#[derive(Clone, Debug)]
pub struct SieveConfig {
    pub hypothesis: FeatureMap,
    pub critic: FeatureMap,
    pub lambda: f64,
    pub gamma: f64,
    pub rho: f64,
}

impl SieveConfig {
    pub fn plain(hypothesis: FeatureMap, critic: FeatureMap) -> SieveConfig {
        SieveConfig { hypothesis, critic, lambda: 0.0, gamma: 0.0, rho: 0.0 }
    }

    pub fn stabilized(
        hypothesis: FeatureMap,
        critic: FeatureMap,
        lambda: f64,
        gamma: f64,
    ) -> SieveConfig {
        SieveConfig { hypothesis, critic, lambda, gamma, rho: 0.0 }
    }

    pub fn with_rho(mut self, rho: f64) -> SieveConfig {
        self.rho = rho;
        self
    }

    pub fn strategy(&self) -> Strategy {
        if self.lambda == 0.0 {
            Strategy::Unstabilized
        } else {
            Strategy::Stabilized
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.gamma >= 0.0) || !(self.rho >= 0.0) {
            return Err(Error::validation("lambda, gamma, rho must be >= 0"));
        }
        if self.lambda > 0.0 && self.gamma == 0.0 {
            return Err(Error::validation(
                "stabilized game with gamma = 0 has a singular critic sandwich; set gamma > 0",
            ));
        }
        Ok(())
    }
}

/// Recommended critic ridge: 1e-4 times the average critic feature energy,
/// so the default tracks the feature scale. `kind` selects which proxy
/// block the critic reads (outcome critics read Z, action critics read W).
pub fn default_gamma(data: &ObservationTable, critic: &FeatureMap, kind: BridgeKind) -> Result<f64> {
    if data.n() == 0 {
        return Err(Error::validation("default_gamma needs n >= 1"));
    }
    let d = critic.dim();
    let mut buf = vec![0.0; d];
    let mut trace = 0.0;
    for i in 0..data.n() {
        let proxy = match kind {
            BridgeKind::Outcome => data.z_row(i),
            BridgeKind::Action => data.w_row(i),
        };
        critic.eval_into(proxy, data.a()[i], data.x_row(i), &mut buf);
        trace += buf.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(1e-4 * trace / (data.n() as f64 * d as f64))
}

struct GameMoments {
    /// Critic-by-hypothesis cross moment: E_n[φψ̃ᵀ] (outcome side) or
    /// E_n[πψφ̃ᵀ] (action side).
    design: DMatrix<f64>,
    /// Critic target: E_n[Yφ] (outcome side) or E_n[Tψ] (action side).
    target: DVector<f64>,
    /// Critic second moment E_n[φφᵀ], the stabilizer matrix.
    sigma: DMatrix<f64>,
}

use features::check_feature_arity as check_arity;

fn check_finite(v: &[f64], what: &str, row: usize) -> Result<()> {
    if v.iter().any(|f| !f.is_finite()) {
        return Err(Error::computation(format!("{what} evaluated non-finite at row {row}")));
    }
    Ok(())
}

/// Moments for the outcome-bridge game: hypothesis on (W,A,X), critic on
/// (Z,A,X), target Y.
fn h_moments(data: &ObservationTable, cfg: &SieveConfig) -> Result<GameMoments> {
    let n = data.n();
    let dc = cfg.critic.dim();
    let dh = cfg.hypothesis.dim();
    let mut design = DMatrix::zeros(dc, dh);
    let mut target = DVector::zeros(dc);
    let mut sigma = DMatrix::zeros(dc, dc);
    let mut cbuf = vec![0.0; dc];
    let mut hbuf = vec![0.0; dh];
    for i in 0..n {
        let a = data.a()[i];
        let x = data.x_row(i);
        cfg.critic.eval_into(data.z_row(i), a, x, &mut cbuf);
        cfg.hypothesis.eval_into(data.w_row(i), a, x, &mut hbuf);
        check_finite(&cbuf, "critic features", i)?;
        check_finite(&hbuf, "hypothesis features", i)?;
        accumulate_outer(&mut design, &cbuf, &hbuf);
        accumulate_outer(&mut sigma, &cbuf, &cbuf);
        for (r, &c) in cbuf.iter().enumerate() {
            target[r] += data.y()[i] * c;
        }
    }
    let inv_n = 1.0 / n as f64;
    design *= inv_n;
    target *= inv_n;
    sigma *= inv_n;
    Ok(GameMoments { design, target, sigma })
}

/// Moments for the action-bridge game: hypothesis on (Z,A,X), critic on
/// (W,A,X). The design carries the contrast weight π(A|X) row by row; the
/// target is the contrast-integrated critic, so no propensity appears.
fn q_moments(
    data: &ObservationTable,
    cfg: &SieveConfig,
    contrast: &ContrastSpec,
) -> Result<GameMoments> {
    let n = data.n();
    let dc = cfg.critic.dim();
    let dh = cfg.hypothesis.dim();
    let mut design = DMatrix::zeros(dc, dh);
    let mut target = DVector::zeros(dc);
    let mut sigma = DMatrix::zeros(dc, dc);
    let mut cbuf = vec![0.0; dc];
    let mut hbuf = vec![0.0; dh];
    let mut tbuf = vec![0.0; dc];
    let mut node_buf = vec![0.0; dc];
    for i in 0..n {
        let a = data.a()[i];
        let x = data.x_row(i);
        let w = data.w_row(i);
        cfg.critic.eval_into(w, a, x, &mut cbuf);
        cfg.hypothesis.eval_into(data.z_row(i), a, x, &mut hbuf);
        check_finite(&cbuf, "critic features", i)?;
        check_finite(&hbuf, "hypothesis features", i)?;
        let pi = contrast.pi(a, x);
        if !pi.is_finite() {
            return Err(Error::computation(format!("contrast weight non-finite at row {i}")));
        }
        let mut scaled = cbuf.clone();
        for v in &mut scaled {
            *v *= pi;
        }
        accumulate_outer(&mut design, &scaled, &hbuf);
        accumulate_outer(&mut sigma, &cbuf, &cbuf);
        // (Tψ)(W_i, X_i): integrate the whole critic vector over actions.
        tbuf.fill(0.0);
        match contrast.integration() {
            Integration::Discrete { n_actions } => {
                for ai in 0..*n_actions {
                    let av = ai as f64;
                    let weight = contrast.pi(av, x);
                    cfg.critic.eval_into(w, av, x, &mut node_buf);
                    for (t, &f) in tbuf.iter_mut().zip(node_buf.iter()) {
                        *t += weight * f;
                    }
                }
            }
            Integration::Quadrature { nodes, weights } => {
                for (node, wt) in nodes.iter().zip(weights) {
                    let weight = wt * contrast.pi(*node, x);
                    cfg.critic.eval_into(w, *node, x, &mut node_buf);
                    for (t, &f) in tbuf.iter_mut().zip(node_buf.iter()) {
                        *t += weight * f;
                    }
                }
            }
        }
        check_finite(&tbuf, "contrast-integrated critic", i)?;
        for (r, &t) in tbuf.iter().enumerate() {
            target[r] += t;
        }
    }
    let inv_n = 1.0 / n as f64;
    design *= inv_n;
    target *= inv_n;
    sigma *= inv_n;
    Ok(GameMoments { design, target, sigma })
}

fn accumulate_outer(m: &mut DMatrix<f64>, left: &[f64], right: &[f64]) {
    for (c, &r) in right.iter().enumerate() {
        if r == 0.0 {
            continue;
        }
        for (rr, &l) in left.iter().enumerate() {
            m[(rr, c)] += l * r;
        }
    }
}

/// Minimizer of the solved game given precomputed moments.
fn solve_game(moments: &GameMoments, cfg: &SieveConfig, notes: &mut Vec<String>) -> Result<DVector<f64>> {
    let dh = moments.design.ncols();
    if cfg.lambda == 0.0 {
        // Plain game: min-norm least squares on the moment map.
        if cfg.rho > 0.0 {
            let mut a = moments.design.transpose() * &moments.design;
            for j in 0..dh {
                a[(j, j)] += cfg.rho;
            }
            let rhs = moments.design.transpose() * &moments.target;
            let chol = a.cholesky().ok_or_else(|| {
                Error::computation("hypothesis normal matrix not positive definite despite rho > 0")
            })?;
            return Ok(chol.solve(&rhs));
        }
        let (pv, rank, _tol) = linalg::pinv(&moments.design, None);
        if rank < dh.min(moments.design.nrows()) {
            notes.push(format!(
                "moment map rank {rank} < min dimension {}; min-norm solution",
                dh.min(moments.design.nrows())
            ));
        }
        return Ok(&pv * &moments.target);
    }
    // Stabilized game: whiten by the critic sandwich, then least squares.
    let dc = moments.sigma.nrows();
    let mut sandwich = moments.sigma.clone() * cfg.lambda;
    for j in 0..dc {
        sandwich[(j, j)] += cfg.gamma;
    }
    let chol = sandwich.cholesky().ok_or_else(|| {
        Error::computation("critic sandwich matrix not positive definite; increase gamma")
    })?;
    let c_design = chol.solve(&moments.design);
    let c_target = chol.solve(&moments.target);
    let a = moments.design.transpose() * &c_design;
    let rhs = moments.design.transpose() * &c_target;
    if cfg.rho > 0.0 {
        let mut areg = a;
        for j in 0..dh {
            areg[(j, j)] += cfg.rho;
        }
        let chol2 = areg.cholesky().ok_or_else(|| {
            Error::computation("hypothesis normal matrix not positive definite despite rho > 0")
        })?;
        return Ok(chol2.solve(&rhs));
    }
    let (pv, rank, _tol) = linalg::pinv(&a, None);
    if rank < dh {
        notes.push(format!("whitened normal matrix rank {rank} < {dh}; min-norm solution"));
    }
    Ok(&pv * rhs)
}

fn objective_from_moments(moments: &GameMoments, cfg: &SieveConfig, alpha: &DVector<f64>) -> Result<f64> {
    let v = &moments.target - &moments.design * alpha;
    if cfg.lambda == 0.0 {
        return Ok(v.dot(&v));
    }
    let dc = moments.sigma.nrows();
    let mut sandwich = moments.sigma.clone() * cfg.lambda;
    for j in 0..dc {
        sandwich[(j, j)] += cfg.gamma;
    }
    let chol = sandwich.cholesky().ok_or_else(|| {
        Error::computation("critic sandwich matrix not positive definite; increase gamma")
    })?;
    let cv = chol.solve(&v);
    Ok(v.dot(&cv))
}

fn precheck(data: &ObservationTable, cfg: &SieveConfig, kind: BridgeKind) -> Result<()> {
    if data.n() == 0 {
        return Err(Error::validation("fitting requires n >= 1"));
    }
    cfg.validate()?;
    match kind {
        BridgeKind::Outcome => {
            check_arity(&cfg.hypothesis, "outcome hypothesis basis", data.p_w(), data.d_x())?;
            check_arity(&cfg.critic, "outcome critic basis", data.p_z(), data.d_x())?;
        }
        BridgeKind::Action => {
            check_arity(&cfg.hypothesis, "action hypothesis basis", data.p_z(), data.d_x())?;
            check_arity(&cfg.critic, "action critic basis", data.p_w(), data.d_x())?;
        }
    }
    Ok(())
}

/// Fits the outcome bridge ĥ(w,a,x) = ψ̃(w,a,x)ᵀα̂ by the solved minimax
/// game against critics in the span of φ(z,a,x).
pub fn fit_h_sieve(data: &ObservationTable, cfg: &SieveConfig) -> Result<BridgeFit> {
    precheck(data, cfg, BridgeKind::Outcome)?;
    let moments = h_moments(data, cfg)?;
    let mut notes = Vec::new();
    let alpha = solve_game(&moments, cfg, &mut notes)?;
    let objective = objective_from_moments(&moments, cfg, &alpha)?;
    Ok(BridgeFit {
        kind: BridgeKind::Outcome,
        action_kind: data.action_kind().clone(),
        class: ClassDescriptor::Sieve {
            feature: cfg.hypothesis.clone(),
            coeffs: alpha.iter().copied().collect(),
        },
        diagnostics: FitDiagnostics {
            objective,
            strategy: cfg.strategy(),
            lambda: cfg.lambda,
            gamma: cfg.gamma,
            rho: cfg.rho,
            n: data.n(),
            notes,
        },
    })
}

/// Fits the action bridge q̂(z,a,x) = φ̃(z,a,x)ᵀα̂ for the given contrast.
/// The moment conditions use the observed actions and the
/// contrast-integrated critic only; no propensity model is involved.
pub fn fit_q_sieve(
    data: &ObservationTable,
    cfg: &SieveConfig,
    contrast: &ContrastSpec,
) -> Result<BridgeFit> {
    precheck(data, cfg, BridgeKind::Action)?;
    contrast.check_compatible(data.action_kind())?;
    let moments = q_moments(data, cfg, contrast)?;
    let mut notes = Vec::new();
    let alpha = solve_game(&moments, cfg, &mut notes)?;
    let objective = objective_from_moments(&moments, cfg, &alpha)?;
    Ok(BridgeFit {
        kind: BridgeKind::Action,
        action_kind: data.action_kind().clone(),
        class: ClassDescriptor::Sieve {
            feature: cfg.hypothesis.clone(),
            coeffs: alpha.iter().copied().collect(),
        },
        diagnostics: FitDiagnostics {
            objective,
            strategy: cfg.strategy(),
            lambda: cfg.lambda,
            gamma: cfg.gamma,
            rho: cfg.rho,
            n: data.n(),
            notes,
        },
    })
}

/// Solved-game objective for the outcome bridge at arbitrary hypothesis
/// coefficients; the quantity the fit minimizes, exposed for audit.
pub fn minimax_objective_h(
    data: &ObservationTable,
    cfg: &SieveConfig,
    coefficients: &[f64],
) -> Result<f64> {
    precheck(data, cfg, BridgeKind::Outcome)?;
    if coefficients.len() != cfg.hypothesis.dim() {
        return Err(Error::validation(format!(
            "got {} coefficients, hypothesis dimension is {}",
            coefficients.len(),
            cfg.hypothesis.dim()
        )));
    }
    let moments = h_moments(data, cfg)?;
    objective_from_moments(&moments, cfg, &DVector::from_column_slice(coefficients))
}

/// Solved-game objective for the action bridge; symmetric to
/// [`minimax_objective_h`].
pub fn minimax_objective_q(
    data: &ObservationTable,
    cfg: &SieveConfig,
    contrast: &ContrastSpec,
    coefficients: &[f64],
) -> Result<f64> {
    precheck(data, cfg, BridgeKind::Action)?;
    contrast.check_compatible(data.action_kind())?;
    if coefficients.len() != cfg.hypothesis.dim() {
        return Err(Error::validation(format!(
            "got {} coefficients, hypothesis dimension is {}",
            coefficients.len(),
            cfg.hypothesis.dim()
        )));
    }
    let moments = q_moments(data, cfg, contrast)?;
    objective_from_moments(&moments, cfg, &DVector::from_column_slice(coefficients))
}
