//! Bridge fits against kernel critics.
//!
//! Everything here works on grouped cells (see `gram`). Writing P for the
//! row-to-z-cell aggregation matrix and L for the joint-count matrix, the
//! row-indexed objectives rewrite exactly:
//!
//! * plain game, outcome side: ψᵀK_nψ = (Pψ)ᵀ K_z (Pψ), where Pψ is the
//!   per-z-cell residual total Yz − L·h;
//! * stabilized game: the row-indexed middle matrix
//!   K_n^{1/2}(γI+λK_n)^{-1}K_n^{1/2} is the matrix function t ↦ t/(γ+λt)
//!   of K_n, and a Woodbury pass through the aggregation turns it into the
//!   cell-sized sandwich K^{1/2}(γI + λK^{1/2}D K^{1/2})^{-1}K^{1/2} with
//!   D the diagonal of cell row-counts (D = I recovers the dense form);
//! * action side, the linear term φᵀ(γI+λK_n)^{-1}K_{w2,n}𝟏 collapses by
//!   the push-through identity to vᵀ(γI+λK₁D)^{-1}K₂·counts.
//!
//! `gram::tests` and the tests below pin these rewrites against literal
//! row-indexed computations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{
    AnchorSet, BridgeFit, BridgeKind, ClassDescriptor, ContrastSpec, FitDiagnostics,
    ObservationTable, RowMatrix, Strategy,
};
use crate::rkhs::gram::{gram_matrix, GramBundle};
use crate::rkhs::{matrix_sqrt_psd, KernelSpec};
use crate::sieve::features::check_feature_arity;
use crate::sieve::FeatureMap;

/// What the fitted bridge itself looks like; the critic is always the
/// kernel class recorded in the Gram bundle.
#[derive(Clone, Debug)]
pub enum HypothesisClass {
    Sieve(FeatureMap),
    Kernel(KernelSpec),
}

fn validate_strategy(strategy: Strategy, lambda: f64, gamma: f64) -> Result<()> {
    match strategy {
        Strategy::Unstabilized => Ok(()),
        Strategy::Stabilized => {
            if !(lambda > 0.0) || !lambda.is_finite() {
                return Err(Error::validation("stabilized game requires lambda > 0"));
            }
            if !(gamma > 0.0) || !gamma.is_finite() {
                return Err(Error::validation("stabilized game requires gamma > 0"));
            }
            Ok(())
        }
    }
}

/// Cholesky with the documented jitter ladder (0, gamma, 10 gamma,
/// 100 gamma added to the diagonal); each escalation is logged.
fn chol_with_escalation(
    mat: &DMatrix<f64>,
    gamma: f64,
    label: &str,
    notes: &mut Vec<String>,
) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    for (step, mult) in [0.0, 1.0, 10.0, 100.0].iter().enumerate() {
        let jitter = mult * gamma;
        let mut m = mat.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = m.cholesky() {
            if step > 0 {
                notes.push(format!("added jitter {jitter:.3e} to {label}"));
            }
            return Ok(ch);
        }
    }
    let min_eig = mat
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |m, &v| m.min(v));
    Err(Error::computation(format!(
        "{label} indefinite after jitter escalation; minimum eigenvalue {min_eig:.3e}"
    )))
}

/// Middle matrix of the solved game on one side: the critic Gram for the
/// plain game, the cell-sized stabilized sandwich otherwise.
fn middle_matrix(
    k: &DMatrix<f64>,
    counts: &[f64],
    strategy: Strategy,
    lambda: f64,
    gamma: f64,
    label: &str,
    notes: &mut Vec<String>,
) -> Result<DMatrix<f64>> {
    match strategy {
        Strategy::Unstabilized => Ok(k.clone()),
        Strategy::Stabilized => {
            let s = matrix_sqrt_psd(k)?;
            // inner = gamma I + lambda * S D S.
            let mut sd = s.clone();
            for (j, &c) in counts.iter().enumerate() {
                sd.column_mut(j).scale_mut(c);
            }
            let mut inner = sd * &s;
            inner *= lambda;
            for i in 0..inner.nrows() {
                inner[(i, i)] += gamma;
            }
            let chol = chol_with_escalation(&inner, gamma, label, notes)?;
            let x = chol.solve(&s);
            let m = &s * x;
            Ok((&m + m.transpose()) * 0.5)
        }
    }
}

/// Action-side linear term: K₂·counts for the plain game, its
/// (γI + λK₁D)⁻¹ image for the stabilized one.
fn q_linear_term(
    gram: &GramBundle,
    strategy: Strategy,
    lambda: f64,
    gamma: f64,
) -> Result<DVector<f64>> {
    let counts = DVector::from_column_slice(gram.cnt_w());
    let base = gram.k_w2() * counts;
    match strategy {
        Strategy::Unstabilized => Ok(base),
        Strategy::Stabilized => {
            let mut kd = gram.k_w1().clone();
            for (j, &c) in gram.cnt_w().iter().enumerate() {
                kd.column_mut(j).scale_mut(c);
            }
            kd *= lambda;
            for i in 0..kd.nrows() {
                kd[(i, i)] += gamma;
            }
            let lu = kd.lu();
            lu.solve(&base).ok_or_else(|| {
                Error::computation("stabilized linear-term system is singular; increase gamma")
            })
        }
    }
}

fn anchors_from_points(points: &RowMatrix, p: usize, d_x: usize) -> AnchorSet {
    let g = points.nrows();
    let mut proxy = RowMatrix::zero_rows(p);
    let mut x = RowMatrix::zero_rows(d_x);
    let mut action = Vec::with_capacity(g);
    for i in 0..g {
        let row = points.row(i);
        proxy.push_row(&row[..p]);
        action.push(row[p]);
        x.push_row(&row[p + 1..]);
    }
    AnchorSet { proxy, action, x }
}

/// Features of a sieve hypothesis evaluated at each cell point.
fn features_on_cells(fm: &FeatureMap, points: &RowMatrix, p: usize) -> Result<DMatrix<f64>> {
    let g = points.nrows();
    let d = fm.dim();
    let mut out = DMatrix::zeros(g, d);
    let mut buf = vec![0.0; d];
    for i in 0..g {
        let row = points.row(i);
        fm.eval_into(&row[..p], row[p], &row[p + 1..], &mut buf);
        if buf.iter().any(|v| !v.is_finite()) {
            return Err(Error::computation(format!(
                "hypothesis features evaluated non-finite at cell {i}"
            )));
        }
        for (k, &v) in buf.iter().enumerate() {
            out[(i, k)] = v;
        }
    }
    Ok(out)
}

/// Solves min_x (Bx)ᵀM(Bx) − 2(Bx)ᵀm [+ rho‖x‖²] given A = BᵀMB and
/// rhs = Bᵀm; pseudoinverse (min-norm) when rho = 0.
fn solve_normal(
    a: DMatrix<f64>,
    rhs: DVector<f64>,
    rho: f64,
    notes: &mut Vec<String>,
) -> Result<DVector<f64>> {
    let d = a.nrows();
    if rho > 0.0 {
        let mut areg = a;
        for i in 0..d {
            areg[(i, i)] += rho;
        }
        let chol = areg.cholesky().ok_or_else(|| {
            Error::computation("hypothesis normal matrix not positive definite despite rho > 0")
        })?;
        return Ok(chol.solve(&rhs));
    }
    let (pv, rank, _tol) = crate::linalg::pinv(&a, None);
    if rank < d {
        notes.push(format!("normal matrix rank {rank} < {d}; min-norm solution"));
    }
    Ok(&pv * rhs)
}

fn common_prechecks(
    data: &ObservationTable,
    gram: &GramBundle,
    strategy: Strategy,
    lambda: f64,
    gamma: f64,
    rho: f64,
) -> Result<()> {
    if data.n() == 0 {
        return Err(Error::validation("fitting requires n >= 1"));
    }
    gram.check_matches(data)?;
    validate_strategy(strategy, lambda, gamma)?;
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::validation("rho must be finite and >= 0"));
    }
    Ok(())
}

/// Fits the outcome bridge against the kernel critic recorded in `gram`.
pub fn fit_h_kernel(
    data: &ObservationTable,
    gram: &GramBundle,
    hypothesis: &HypothesisClass,
    strategy: Strategy,
    lambda: f64,
    gamma1: f64,
    rho: f64,
) -> Result<BridgeFit> {
    common_prechecks(data, gram, strategy, lambda, gamma1, rho)?;
    let (psd_z, _) = gram.psd_ok();
    if !psd_z {
        return Err(Error::computation(
            "critic Gram K_z failed its PSD check; see bundle notes",
        ));
    }
    let mut notes = Vec::new();
    let m = middle_matrix(
        gram.k_z(),
        gram.cnt_z(),
        strategy,
        lambda,
        gamma1,
        "outcome-side middle matrix",
        &mut notes,
    )?;
    let yz = gram.sum_y_by_zcell(data);
    let (_, p_w, d_x) = gram.dims();

    let (class, h_cells) = match hypothesis {
        HypothesisClass::Sieve(fm) => {
            check_feature_arity(fm, "outcome hypothesis basis", p_w, d_x)?;
            let f = features_on_cells(fm, gram.w_points(), p_w)?;
            let nmat = gram.lift_w_matrix_to_z(&f);
            let a = nmat.transpose() * &m * &nmat;
            let rhs = nmat.transpose() * &m * &yz;
            let alpha = solve_normal(a, rhs, rho, &mut notes)?;
            let h_cells = &f * &alpha;
            (
                ClassDescriptor::Sieve {
                    feature: fm.clone(),
                    coeffs: alpha.iter().copied().collect(),
                },
                h_cells,
            )
        }
        HypothesisClass::Kernel(spec) => {
            spec.validate()?;
            if !(rho > 0.0) {
                return Err(Error::validation(
                    "kernel hypothesis class requires rho > 0 for a unique dual solution",
                ));
            }
            let kh = gram_matrix(spec, gram.w_points(), p_w, d_x);
            // Stationarity of (Yz − L Kh β)ᵀ M (…) + rho βᵀKh β reduces to
            // (LᵀM L Kh + rho I) β = LᵀM Yz.
            let l = l_matrix(gram);
            let ltm = l.transpose() * &m;
            let mut sys = &ltm * &l * &kh;
            for i in 0..sys.nrows() {
                sys[(i, i)] += rho;
            }
            let rhs = &ltm * &yz;
            let beta = sys
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::computation("kernel-hypothesis system is singular"))?;
            let h_cells = &kh * &beta;
            (
                ClassDescriptor::Rkhs {
                    kernel: spec.clone(),
                    anchors: anchors_from_points(gram.w_points(), p_w, d_x),
                    dual: beta.iter().copied().collect(),
                },
                h_cells,
            )
        }
    };

    let resid = &yz - gram.lift_w_to_z(&h_cells);
    let objective = resid.dot(&(&m * &resid));
    Ok(BridgeFit {
        kind: BridgeKind::Outcome,
        action_kind: data.action_kind().clone(),
        class,
        diagnostics: FitDiagnostics {
            objective,
            strategy,
            lambda: if strategy == Strategy::Stabilized { lambda } else { 0.0 },
            gamma: if strategy == Strategy::Stabilized { gamma1 } else { 0.0 },
            rho,
            n: data.n(),
            notes,
        },
    })
}

/// Fits the action bridge against the kernel critic recorded in `gram`.
/// The contrast must be the one the bundle was built with.
pub fn fit_q_kernel(
    data: &ObservationTable,
    gram: &GramBundle,
    hypothesis: &HypothesisClass,
    strategy: Strategy,
    lambda: f64,
    gamma2: f64,
    rho: f64,
    contrast: &ContrastSpec,
) -> Result<BridgeFit> {
    common_prechecks(data, gram, strategy, lambda, gamma2, rho)?;
    contrast.check_compatible(data.action_kind())?;
    if contrast.integration() != gram.integration() {
        return Err(Error::validation(
            "contrast integration rule differs from the one the gram bundle was built with",
        ));
    }
    let (_, psd_w) = gram.psd_ok();
    if !psd_w {
        return Err(Error::computation(
            "critic Gram K_w1 failed its PSD check; see bundle notes",
        ));
    }
    let mut notes = Vec::new();
    let m = middle_matrix(
        gram.k_w1(),
        gram.cnt_w(),
        strategy,
        lambda,
        gamma2,
        "action-side middle matrix",
        &mut notes,
    )?;
    let lin = q_linear_term(gram, strategy, lambda, gamma2)?;
    let (p_z, _, d_x) = gram.dims();
    let pi = DVector::from_column_slice(gram.pi_z());

    let (class, q_cells) = match hypothesis {
        HypothesisClass::Sieve(fm) => {
            check_feature_arity(fm, "action hypothesis basis", p_z, d_x)?;
            let f = features_on_cells(fm, gram.z_points(), p_z)?;
            let mut fpi = f.clone();
            for (i, &p) in gram.pi_z().iter().enumerate() {
                fpi.row_mut(i).scale_mut(p);
            }
            let b = gram.lift_z_matrix_to_w(&fpi);
            let a = b.transpose() * &m * &b;
            let rhs = b.transpose() * &lin;
            let alpha = solve_normal(a, rhs, rho, &mut notes)?;
            let q_cells = &f * &alpha;
            (
                ClassDescriptor::Sieve {
                    feature: fm.clone(),
                    coeffs: alpha.iter().copied().collect(),
                },
                q_cells,
            )
        }
        HypothesisClass::Kernel(spec) => {
            spec.validate()?;
            if !(rho > 0.0) {
                return Err(Error::validation(
                    "kernel hypothesis class requires rho > 0 for a unique dual solution",
                ));
            }
            let kq = gram_matrix(spec, gram.z_points(), p_z, d_x);
            let l = l_matrix(gram);
            // v(β) = Lᵀ Dπ Kq β; stationarity reduces to
            // (Gᵀ M G Kq + rho I) β = Gᵀ lin, with G = Lᵀ Dπ.
            let mut g = l.transpose();
            for (j, &p) in gram.pi_z().iter().enumerate() {
                g.column_mut(j).scale_mut(p);
            }
            let gtm = g.transpose() * &m;
            let mut sys = &gtm * &g * &kq;
            for i in 0..sys.nrows() {
                sys[(i, i)] += rho;
            }
            let rhs = g.transpose() * &lin;
            let beta = sys
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::computation("kernel-hypothesis system is singular"))?;
            let q_cells = &kq * &beta;
            (
                ClassDescriptor::Rkhs {
                    kernel: spec.clone(),
                    anchors: anchors_from_points(gram.z_points(), p_z, d_x),
                    dual: beta.iter().copied().collect(),
                },
                q_cells,
            )
        }
    };

    let phi = q_cells.component_mul(&pi);
    let v = gram.lift_z_to_w(&phi);
    let objective = v.dot(&(&m * &v)) - 2.0 * v.dot(&lin);
    Ok(BridgeFit {
        kind: BridgeKind::Action,
        action_kind: data.action_kind().clone(),
        class,
        diagnostics: FitDiagnostics {
            objective,
            strategy,
            lambda: if strategy == Strategy::Stabilized { lambda } else { 0.0 },
            gamma: if strategy == Strategy::Stabilized { gamma2 } else { 0.0 },
            rho,
            n: data.n(),
            notes,
        },
    })
}

/// Solved-game objective of an arbitrary outcome bridge under the kernel
/// critic in `gram`; equals ψᵀK_nψ (plain) or the stabilized sandwich in
/// row-indexed form.
pub fn objective_h_kernel(
    data: &ObservationTable,
    gram: &GramBundle,
    bridge: &BridgeFit,
    strategy: Strategy,
    lambda: f64,
    gamma: f64,
) -> Result<f64> {
    common_prechecks(data, gram, strategy, lambda, gamma, 0.0)?;
    if bridge.kind != BridgeKind::Outcome {
        return Err(Error::validation("objective_h_kernel expects an outcome bridge"));
    }
    let mut notes = Vec::new();
    let m = middle_matrix(
        gram.k_z(),
        gram.cnt_z(),
        strategy,
        lambda,
        gamma,
        "outcome-side middle matrix",
        &mut notes,
    )?;
    let (_, p_w, _) = gram.dims();
    let gw = gram.gw();
    let mut h_cells = DVector::zeros(gw);
    for c in 0..gw {
        let row = gram.w_points().row(c);
        h_cells[c] = bridge.eval(&row[..p_w], row[p_w], &row[p_w + 1..]);
    }
    let resid = gram.sum_y_by_zcell(data) - gram.lift_w_to_z(&h_cells);
    Ok(resid.dot(&(&m * &resid)))
}

/// Solved-game objective of an arbitrary action bridge (constant terms
/// independent of the bridge are dropped, as in the fit itself).
pub fn objective_q_kernel(
    data: &ObservationTable,
    gram: &GramBundle,
    bridge: &BridgeFit,
    strategy: Strategy,
    lambda: f64,
    gamma: f64,
) -> Result<f64> {
    common_prechecks(data, gram, strategy, lambda, gamma, 0.0)?;
    if bridge.kind != BridgeKind::Action {
        return Err(Error::validation("objective_q_kernel expects an action bridge"));
    }
    let mut notes = Vec::new();
    let m = middle_matrix(
        gram.k_w1(),
        gram.cnt_w(),
        strategy,
        lambda,
        gamma,
        "action-side middle matrix",
        &mut notes,
    )?;
    let lin = q_linear_term(gram, strategy, lambda, gamma)?;
    let (p_z, _, _) = gram.dims();
    let gz = gram.gz();
    let mut q_cells = DVector::zeros(gz);
    for c in 0..gz {
        let row = gram.z_points().row(c);
        q_cells[c] = bridge.eval(&row[..p_z], row[p_z], &row[p_z + 1..]);
    }
    let phi = q_cells.component_mul(&DVector::from_column_slice(gram.pi_z()));
    let v = gram.lift_z_to_w(&phi);
    Ok(v.dot(&(&m * &v)) - 2.0 * v.dot(&lin))
}

/// Dense joint-count matrix L (gz × gw).
fn l_matrix(gram: &GramBundle) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(gram.gz(), gram.gw());
    for j in gram.joint() {
        l[(j.z_cell, j.w_cell)] += j.count as f64;
    }
    l
}
