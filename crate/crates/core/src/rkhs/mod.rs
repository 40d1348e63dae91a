//! Kernel-critic implementations of the bridge games.
//!
//! The critic ranges over an RKHS on (z,a,x) (outcome side) or (w,a,x)
//! (action side), which turns both games into Gram-matrix algebra. Data
//! rows with identical points are grouped, so Gram matrices have one
//! row per distinct point; on discrete designs this keeps every solve at
//! cell scale no matter how large n is, and on continuous data it reduces
//! to the usual row-indexed matrices. All grouped computations are exact
//! rewrites of their row-indexed counterparts (see `gram::tests`).

mod fit;
mod gram;

pub use fit::{
    fit_h_kernel, fit_q_kernel, objective_h_kernel, objective_q_kernel, HypothesisClass,
};
pub use gram::{build_gram_bundle, gram_cache_key, GramBundle};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ObservationTable;

/// Positive-semidefinite kernel on (proxy, action, x) triples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSpec {
    /// exp(−‖u−v‖² / (2·bandwidth²)) on the concatenated coordinates.
    Rbf { bandwidth: f64 },
    /// (⟨u,v⟩ + offset)^degree on the concatenated coordinates; offset >= 0
    /// keeps it positive semidefinite.
    Polynomial { degree: u32, offset: f64 },
    /// 1 when all coordinates match after rounding, else 0. Intended for
    /// integer-coded blocks; its Gram is a permuted block identity.
    DiscreteMatch,
    /// Constantly 1: the critic space of constants.
    Constant,
    /// Product of one kernel per block; blocks may not nest products.
    Product {
        proxy: Box<KernelSpec>,
        action: Box<KernelSpec>,
        x: Box<KernelSpec>,
    },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::Rbf { bandwidth } => {
                if !bandwidth.is_finite() || *bandwidth <= 0.0 {
                    return Err(Error::validation("rbf bandwidth must be finite and > 0"));
                }
            }
            KernelSpec::Polynomial { degree, offset } => {
                if *degree == 0 {
                    return Err(Error::validation("polynomial kernel degree must be >= 1"));
                }
                if !offset.is_finite() || *offset < 0.0 {
                    return Err(Error::validation("polynomial kernel offset must be >= 0"));
                }
            }
            KernelSpec::DiscreteMatch | KernelSpec::Constant => {}
            KernelSpec::Product { proxy, action, x } => {
                for block in [proxy, action, x] {
                    if matches!(**block, KernelSpec::Product { .. }) {
                        return Err(Error::validation("product kernels may not nest"));
                    }
                    block.validate()?;
                }
            }
        }
        Ok(())
    }

    /// k((up, ua, ux), (vp, va, vx)). Allocation-free.
    pub fn eval(&self, up: &[f64], ua: f64, ux: &[f64], vp: &[f64], va: f64, vx: &[f64]) -> f64 {
        match self {
            KernelSpec::Rbf { bandwidth } => {
                let sq = sqdist(up, vp) + (ua - va) * (ua - va) + sqdist(ux, vx);
                (-sq / (2.0 * bandwidth * bandwidth)).exp()
            }
            KernelSpec::Polynomial { degree, offset } => {
                let d = dot(up, vp) + ua * va + dot(ux, vx);
                (d + offset).powi(*degree as i32)
            }
            KernelSpec::DiscreteMatch => {
                let m = rounded_eq(up, vp)
                    && ua.round() == va.round()
                    && rounded_eq(ux, vx);
                if m {
                    1.0
                } else {
                    0.0
                }
            }
            KernelSpec::Constant => 1.0,
            KernelSpec::Product { proxy, action, x } => {
                proxy.eval_block(up, vp)
                    * action.eval_block(&[ua], &[va])
                    * x.eval_block(ux, vx)
            }
        }
    }

    /// Single-block evaluation for product components.
    fn eval_block(&self, u: &[f64], v: &[f64]) -> f64 {
        match self {
            KernelSpec::Rbf { bandwidth } => {
                (-sqdist(u, v) / (2.0 * bandwidth * bandwidth)).exp()
            }
            KernelSpec::Polynomial { degree, offset } => {
                (dot(u, v) + offset).powi(*degree as i32)
            }
            KernelSpec::DiscreteMatch => {
                if rounded_eq(u, v) {
                    1.0
                } else {
                    0.0
                }
            }
            KernelSpec::Constant => 1.0,
            // validate() rejects nested products.
            KernelSpec::Product { .. } => unreachable!("nested product kernel"),
        }
    }
}

fn sqdist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn rounded_eq(u: &[f64], v: &[f64]) -> bool {
    u.iter().zip(v).all(|(a, b)| a.round() == b.round())
}

/// Which proxy block a kernel reads alongside (a, x).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProxyBlock {
    Z,
    W,
}

/// Median pairwise distance over the concatenated (proxy, a, x) points,
/// the usual default RBF bandwidth. Uses an evenly strided subsample of at
/// most 2000 rows (deterministic), ignores zero distances (ubiquitous on
/// discrete designs), and falls back to 1.0 if every pair coincides.
pub fn median_bandwidth(data: &ObservationTable, block: ProxyBlock) -> Result<f64> {
    if data.n() == 0 {
        return Err(Error::validation("median_bandwidth needs n >= 1"));
    }
    let cap = 2000usize;
    let stride = data.n().div_ceil(cap).max(1);
    let idx: Vec<usize> = (0..data.n()).step_by(stride).collect();
    let mut dists = Vec::with_capacity(idx.len() * (idx.len() - 1) / 2);
    for (i, &ri) in idx.iter().enumerate() {
        for &rj in idx.iter().skip(i + 1) {
            let (pi, pj) = match block {
                ProxyBlock::Z => (data.z_row(ri), data.z_row(rj)),
                ProxyBlock::W => (data.w_row(ri), data.w_row(rj)),
            };
            let sq = sqdist(pi, pj)
                + (data.a()[ri] - data.a()[rj]).powi(2)
                + sqdist(data.x_row(ri), data.x_row(rj));
            if sq > 0.0 {
                dists.push(sq.sqrt());
            }
        }
    }
    if dists.is_empty() {
        return Ok(1.0);
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(dists[dists.len() / 2])
}

/// Default ridge for a kernel hypothesis class: 1e-3 · trace(K) / n.
pub fn default_rho(k: &DMatrix<f64>, n: usize) -> f64 {
    1e-3 * k.trace() / n.max(1) as f64
}

/// Symmetric PSD square root by eigendecomposition; eigenvalues below zero
/// are clipped before rooting.
///
/// Errors if the input is asymmetric beyond 1e-8 relative, or if clipping
/// had to remove an eigenvalue more negative than 1e-8·‖K‖ (such a matrix
/// is not a rounding-error-PSD Gram).
pub fn matrix_sqrt_psd(k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = k.nrows();
    if k.ncols() != n {
        return Err(Error::validation("matrix_sqrt_psd expects a square matrix"));
    }
    let scale = k.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    for i in 0..n {
        for j in (i + 1)..n {
            if (k[(i, j)] - k[(j, i)]).abs() > 1e-8 * scale {
                return Err(Error::computation(format!(
                    "matrix asymmetric at ({i},{j}): {} vs {}",
                    k[(i, j)],
                    k[(j, i)]
                )));
            }
        }
    }
    let sym = (k + k.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -1e-8 * max_eig.max(1e-300) {
            return Err(Error::computation(format!(
                "matrix has eigenvalue {v} beyond the PSD clipping tolerance"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let mut scaled = eig.eigenvectors.clone();
    for (j, s) in vals.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*s);
    }
    Ok(&scaled * eig.eigenvectors.transpose())
}
