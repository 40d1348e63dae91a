//! Domain types: observation tables, contrast specifications, the action
//! integral operator T, and fitted bridge functions.
//!
//! The estimand throughout is J = E[∫ Y(a) π(a|X) dμ(a)] for a contrast or
//! policy weight π. The operator (T h)(w, x) = ∫ h(w, a, x) π(a|x) dμ(a)
//! integrates an outcome bridge over actions; μ is either the counting
//! measure on a discrete support or a caller-supplied quadrature rule.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rkhs::KernelSpec;
use crate::sieve::FeatureMap;

/// Dense row-major matrix with contiguous rows; the storage for proxy and
/// covariate columns. Zero columns and zero rows are both legal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowMatrix {
    data: Vec<f64>,
    ncols: usize,
}

impl RowMatrix {
    pub fn new(data: Vec<f64>, ncols: usize) -> Result<Self> {
        if ncols == 0 {
            if !data.is_empty() {
                return Err(Error::validation("RowMatrix with 0 columns must be empty"));
            }
            return Ok(RowMatrix { data, ncols });
        }
        if data.len() % ncols != 0 {
            return Err(Error::validation(format!(
                "RowMatrix data length {} not divisible by ncols {}",
                data.len(),
                ncols
            )));
        }
        Ok(RowMatrix { data, ncols })
    }

    pub fn zero_rows(ncols: usize) -> Self {
        RowMatrix { data: Vec::new(), ncols }
    }

    pub fn from_rows(rows: &[Vec<f64>], ncols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * ncols);
        for r in rows {
            if r.len() != ncols {
                return Err(Error::validation(format!(
                    "row has {} entries, expected {}",
                    r.len(),
                    ncols
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(RowMatrix { data, ncols })
    }

    pub fn nrows(&self) -> usize {
        if self.ncols == 0 {
            0
        } else {
            self.data.len() / self.ncols
        }
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn push_row(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.ncols);
        self.data.extend_from_slice(row);
    }

    /// Rows selected by index, in the given order.
    pub fn select(&self, idx: &[usize]) -> RowMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.ncols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        RowMatrix { data, ncols: self.ncols }
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.nrows()).map(move |i| self.row(i))
    }

    /// Row-major backing storage.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Declared action space of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    /// Actions are canonical indices 0..n_actions (stored as floats but
    /// validated integral). Avoids float-equality pitfalls in π lookups.
    Discrete { n_actions: usize },
    /// Real-valued actions within a declared closed range.
    Continuous { lo: f64, hi: f64 },
}

impl ActionKind {
    pub fn is_discrete(&self) -> bool {
        matches!(self, ActionKind::Discrete { .. })
    }
}

/// n i.i.d. records of (Y, W, Z, A, X).
///
/// Construction validates shapes and action values. An empty table (n = 0)
/// is representable for serialization round-trips; every fitting and
/// estimation routine requires n >= 1 and says so.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationTable {
    y: Vec<f64>,
    w: RowMatrix,
    z: RowMatrix,
    a: Vec<f64>,
    x: RowMatrix,
    action_kind: ActionKind,
}

impl ObservationTable {
    pub fn new(
        y: Vec<f64>,
        w: RowMatrix,
        z: RowMatrix,
        a: Vec<f64>,
        x: RowMatrix,
        action_kind: ActionKind,
    ) -> Result<Self> {
        let n = y.len();
        // A 0-column block carries no row count of its own; only blocks
        // with columns are checked against n.
        for (name, block) in [("w", &w), ("z", &z), ("x", &x)] {
            if block.ncols() > 0 && block.nrows() != n {
                return Err(Error::validation(format!(
                    "column block {name} has {} rows, expected {n}",
                    block.nrows()
                )));
            }
        }
        if a.len() != n {
            return Err(Error::validation(format!(
                "action column has {} rows, expected {}",
                a.len(),
                n
            )));
        }
        for (i, &yi) in y.iter().enumerate() {
            if !yi.is_finite() {
                return Err(Error::validation(format!("y[{i}] is not finite")));
            }
        }
        for (i, &ai) in a.iter().enumerate() {
            match &action_kind {
                ActionKind::Discrete { n_actions } => {
                    let r = ai.round();
                    if (ai - r).abs() > 1e-9 || r < 0.0 || (r as usize) >= *n_actions {
                        return Err(Error::validation(format!(
                            "a[{i}] = {ai} is not a valid index into a {n_actions}-action support"
                        )));
                    }
                }
                ActionKind::Continuous { lo, hi } => {
                    if !ai.is_finite() || ai < *lo || ai > *hi {
                        return Err(Error::validation(format!(
                            "a[{i}] = {ai} outside declared range [{lo}, {hi}]"
                        )));
                    }
                }
            }
        }
        for block in [&w, &z, &x] {
            if block.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation("non-finite value in w/z/x block"));
            }
        }
        Ok(ObservationTable { y, w, z, a, x, action_kind })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p_w(&self) -> usize {
        self.w.ncols()
    }

    pub fn p_z(&self) -> usize {
        self.z.ncols()
    }

    pub fn d_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn w_row(&self, i: usize) -> &[f64] {
        if self.w.ncols() == 0 {
            &[]
        } else {
            self.w.row(i)
        }
    }

    pub fn z_row(&self, i: usize) -> &[f64] {
        if self.z.ncols() == 0 {
            &[]
        } else {
            self.z.row(i)
        }
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        if self.x.ncols() == 0 {
            &[]
        } else {
            self.x.row(i)
        }
    }

    pub fn action_kind(&self) -> &ActionKind {
        &self.action_kind
    }

    /// Discrete action index of row `i`; panics on continuous kinds
    /// (callers check `action_kind` first).
    pub fn a_index(&self, i: usize) -> usize {
        debug_assert!(self.action_kind.is_discrete());
        self.a[i].round() as usize
    }

    /// Row subset in the given order (used by cross-fitting).
    pub fn subset(&self, idx: &[usize]) -> Result<ObservationTable> {
        let y: Vec<f64> = idx.iter().map(|&i| self.y[i]).collect();
        let a: Vec<f64> = idx.iter().map(|&i| self.a[i]).collect();
        ObservationTable::new(
            y,
            self.w.select(idx),
            self.z.select(idx),
            a,
            self.x.select(idx),
            self.action_kind.clone(),
        )
    }

    /// Writes `data_path` as CSV with header `y,w_1..w_pw,z_1..z_pz,a,x_1..x_dx`
    /// and `sidecar_path` as the dims JSON. Floats are written in shortest
    /// round-trip form, so rewriting the same table is byte-identical.
    pub fn write_csv(&self, data_path: &Path, sidecar_path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(data_path)?;
        let mut header: Vec<String> = vec!["y".to_string()];
        for j in 0..self.p_w() {
            header.push(format!("w_{}", j + 1));
        }
        for j in 0..self.p_z() {
            header.push(format!("z_{}", j + 1));
        }
        header.push("a".to_string());
        for j in 0..self.d_x() {
            header.push(format!("x_{}", j + 1));
        }
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = Vec::with_capacity(header.len());
            rec.push(format_f64(self.y[i]));
            for v in self.w_row(i) {
                rec.push(format_f64(*v));
            }
            for v in self.z_row(i) {
                rec.push(format_f64(*v));
            }
            rec.push(format_f64(self.a[i]));
            for v in self.x_row(i) {
                rec.push(format_f64(*v));
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;

        let sidecar = TableDims {
            n: self.n(),
            p_w: self.p_w(),
            p_z: self.p_z(),
            d_x: self.d_x(),
            action_kind: self.action_kind.clone(),
        };
        let json = serde_json::to_string_pretty(&sidecar)?;
        std::fs::write(sidecar_path, json + "\n")?;
        Ok(())
    }

    /// Reads a table written by [`ObservationTable::write_csv`], validating
    /// header names and row shapes against the sidecar dims.
    pub fn read_csv(data_path: &Path, sidecar_path: &Path) -> Result<ObservationTable> {
        let sidecar: TableDims = serde_json::from_str(&std::fs::read_to_string(sidecar_path)?)?;
        let mut expected: Vec<String> = vec!["y".to_string()];
        for j in 0..sidecar.p_w {
            expected.push(format!("w_{}", j + 1));
        }
        for j in 0..sidecar.p_z {
            expected.push(format!("z_{}", j + 1));
        }
        expected.push("a".to_string());
        for j in 0..sidecar.d_x {
            expected.push(format!("x_{}", j + 1));
        }

        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(data_path)?;
        let got: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
        for (k, name) in expected.iter().enumerate() {
            match got.get(k) {
                Some(g) if g == name => {}
                Some(g) => {
                    return Err(Error::validation(format!(
                        "CSV column {k} is named {g:?}, expected {name:?}"
                    )))
                }
                None => {
                    return Err(Error::validation(format!(
                        "CSV is missing column {name:?} at position {k}"
                    )))
                }
            }
        }
        if got.len() != expected.len() {
            return Err(Error::validation(format!(
                "CSV has {} columns, sidecar dims imply {}",
                got.len(),
                expected.len()
            )));
        }

        let mut y = Vec::new();
        let mut a = Vec::new();
        let mut w = RowMatrix::zero_rows(sidecar.p_w);
        let mut z = RowMatrix::zero_rows(sidecar.p_z);
        let mut x = RowMatrix::zero_rows(sidecar.d_x);
        let mut wbuf = vec![0.0; sidecar.p_w];
        let mut zbuf = vec![0.0; sidecar.p_z];
        let mut xbuf = vec![0.0; sidecar.d_x];
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |field: usize| -> Result<f64> {
                rec.get(field)
                    .ok_or_else(|| Error::validation(format!("row {line}: missing field {field}")))?
                    .parse::<f64>()
                    .map_err(|e| Error::validation(format!("row {line}, field {field}: {e}")))
            };
            let mut k = 0;
            y.push(parse(k)?);
            k += 1;
            for j in 0..sidecar.p_w {
                wbuf[j] = parse(k)?;
                k += 1;
            }
            w.push_row(&wbuf);
            for j in 0..sidecar.p_z {
                zbuf[j] = parse(k)?;
                k += 1;
            }
            z.push_row(&zbuf);
            a.push(parse(k)?);
            k += 1;
            for j in 0..sidecar.d_x {
                xbuf[j] = parse(k)?;
                k += 1;
            }
            x.push_row(&xbuf);
        }
        if y.len() != sidecar.n {
            return Err(Error::validation(format!(
                "CSV has {} data rows, sidecar declares n = {}",
                y.len(),
                sidecar.n
            )));
        }
        ObservationTable::new(y, w, z, a, x, sidecar.action_kind)
    }
}

fn format_f64(v: f64) -> String {
    // `{}` is the shortest representation that parses back to the same bits.
    format!("{v}")
}

/// Sidecar JSON schema declaring table dimensions.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableDims {
    pub n: usize,
    pub p_w: usize,
    pub p_z: usize,
    pub d_x: usize,
    pub action_kind: ActionKind,
}

/// Integration rule for the action integral in T.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integration {
    /// Counting measure over canonical indices 0..n_actions.
    Discrete { n_actions: usize },
    /// Fixed-node quadrature: ∫ g(a) dμ(a) ≈ Σ_k ω_k g(a_k), all ω_k > 0.
    Quadrature { nodes: Vec<f64>, weights: Vec<f64> },
}

/// Contrast/policy weight π(a|x) together with its integration rule.
///
/// π may be signed (e.g. the two-point treatment-effect contrast 2a−1) or a
/// proper policy density; the estimand J = E[∫ Y(a) π(a|X) dμ(a)] covers
/// both.
#[derive(Clone)]
pub struct ContrastSpec {
    name: String,
    pi: Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>,
    integration: Integration,
}

impl fmt::Debug for ContrastSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ContrastSpec")
            .field("name", &self.name)
            .field("integration", &self.integration)
            .finish()
    }
}

impl ContrastSpec {
    /// General discrete-support builder.
    pub fn from_fn_discrete(
        name: impl Into<String>,
        n_actions: usize,
        pi: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<ContrastSpec> {
        if n_actions == 0 {
            return Err(Error::validation("discrete contrast needs n_actions >= 1"));
        }
        Ok(ContrastSpec {
            name: name.into(),
            pi: Arc::new(pi),
            integration: Integration::Discrete { n_actions },
        })
    }

    /// Two-point treatment-effect contrast π(a|x) = 2a − 1 on a binary support.
    pub fn ate_binary() -> ContrastSpec {
        ContrastSpec {
            name: "ate_binary".to_string(),
            pi: Arc::new(|a, _x| 2.0 * a - 1.0),
            integration: Integration::Discrete { n_actions: 2 },
        }
    }

    /// Tabulated weights per (x-level, action); x is read as a single
    /// integer-coded column (or ignored when the table has one row).
    pub fn policy_table(table: Vec<Vec<f64>>) -> Result<ContrastSpec> {
        if table.is_empty() || table[0].is_empty() {
            return Err(Error::validation("policy table must be nonempty"));
        }
        let n_actions = table[0].len();
        for (r, row) in table.iter().enumerate() {
            if row.len() != n_actions {
                return Err(Error::validation(format!(
                    "policy table row {r} has {} entries, expected {n_actions}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("policy table row {r} has non-finite entry")));
            }
        }
        let shared = Arc::new(table);
        let t = shared.clone();
        Ok(ContrastSpec {
            name: "policy_table".to_string(),
            pi: Arc::new(move |a, x| {
                let xi = if t.len() == 1 || x.is_empty() { 0 } else { x[0].round() as usize };
                let xi = xi.min(t.len() - 1);
                t[xi][a.round() as usize]
            }),
            integration: Integration::Discrete { n_actions },
        })
    }

    /// Fixed-node quadrature rule with an arbitrary weight function.
    pub fn quadrature(
        name: impl Into<String>,
        nodes: Vec<f64>,
        weights: Vec<f64>,
        pi: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<ContrastSpec> {
        if nodes.is_empty() || nodes.len() != weights.len() {
            return Err(Error::validation("quadrature nodes/weights must be nonempty, equal length"));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::validation("quadrature weights must be positive and finite"));
        }
        if nodes.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("quadrature nodes must be finite"));
        }
        Ok(ContrastSpec {
            name: name.into(),
            pi: Arc::new(pi),
            integration: Integration::Quadrature { nodes, weights },
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn integration(&self) -> &Integration {
        &self.integration
    }

    /// Weight π(a|x).
    pub fn pi(&self, a: f64, x: &[f64]) -> f64 {
        (self.pi)(a, x)
    }

    /// Errors unless the integration rule matches the action kind
    /// (discrete rule with identical support size, or quadrature whose
    /// nodes lie inside the declared continuous range).
    pub fn check_compatible(&self, kind: &ActionKind) -> Result<()> {
        match (&self.integration, kind) {
            (Integration::Discrete { n_actions: ni }, ActionKind::Discrete { n_actions: nk }) => {
                if ni == nk {
                    Ok(())
                } else {
                    Err(Error::validation(format!(
                        "contrast integrates over {ni} actions but data declares {nk}"
                    )))
                }
            }
            (Integration::Quadrature { nodes, .. }, ActionKind::Continuous { lo, hi }) => {
                let tol = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
                for &nd in nodes {
                    if nd < lo - tol || nd > hi + tol {
                        return Err(Error::validation(format!(
                            "quadrature node {nd} outside declared action range [{lo}, {hi}]"
                        )));
                    }
                }
                Ok(())
            }
            (Integration::Discrete { .. }, ActionKind::Continuous { .. }) => Err(Error::validation(
                "discrete integration rule used with continuous actions",
            )),
            (Integration::Quadrature { .. }, ActionKind::Discrete { .. }) => Err(Error::validation(
                "quadrature integration rule used with discrete actions",
            )),
        }
    }

    /// ∫ π(a|x) g(a) dμ(a) under this contrast's rule; the workhorse behind
    /// `t_apply` and the kernel variant.
    pub fn integrate(&self, x: &[f64], mut g: impl FnMut(f64) -> f64) -> f64 {
        match &self.integration {
            Integration::Discrete { n_actions } => {
                let mut acc = 0.0;
                for ai in 0..*n_actions {
                    let a = ai as f64;
                    acc += self.pi(a, x) * g(a);
                }
                acc
            }
            Integration::Quadrature { nodes, weights } => {
                let mut acc = 0.0;
                for (nd, wt) in nodes.iter().zip(weights) {
                    acc += wt * self.pi(*nd, x) * g(*nd);
                }
                acc
            }
        }
    }
}

/// Which conditional moment a fitted bridge targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeKind {
    /// h(w, a, x): proxies the latent outcome regression.
    Outcome,
    /// q(z, a, x): proxies the inverse generalized propensity.
    Action,
}

/// Whether a minimax fit ran the plain squared-moment game or the
/// stabilized (penalized-critic) game.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Unstabilized,
    Stabilized,
}

/// Training points a kernel-class fit keeps as expansion anchors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub proxy: RowMatrix,
    pub action: Vec<f64>,
    pub x: RowMatrix,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.action.len()
    }

    pub fn is_empty(&self) -> bool {
        self.action.is_empty()
    }
}

/// How a fitted bridge evaluates: linear in explicit features, or a kernel
/// expansion over anchor points. Fully serializable; reloading reconstructs
/// the same function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassDescriptor {
    Sieve { feature: FeatureMap, coeffs: Vec<f64> },
    Rkhs { kernel: KernelSpec, anchors: AnchorSet, dual: Vec<f64> },
}

/// Fit metadata carried alongside every bridge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub objective: f64,
    pub strategy: Strategy,
    pub lambda: f64,
    pub gamma: f64,
    pub rho: f64,
    pub n: usize,
    /// Solver events worth auditing (jitter escalations, pinv rank drops).
    pub notes: Vec<String>,
}

/// A fitted bridge function ĥ or q̂.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeFit {
    pub kind: BridgeKind,
    pub action_kind: ActionKind,
    pub class: ClassDescriptor,
    pub diagnostics: FitDiagnostics,
}

impl BridgeFit {
    /// Evaluates the bridge at (proxy, a, x); proxy is W for outcome
    /// bridges and Z for action bridges.
    pub fn eval(&self, proxy: &[f64], a: f64, x: &[f64]) -> f64 {
        match &self.class {
            ClassDescriptor::Sieve { feature, coeffs } => feature.dot(proxy, a, x, coeffs),
            ClassDescriptor::Rkhs { kernel, anchors, dual } => {
                let mut acc = 0.0;
                for (j, dj) in dual.iter().enumerate() {
                    let ap = if anchors.proxy.ncols() == 0 { &[][..] } else { anchors.proxy.row(j) };
                    let ax = if anchors.x.ncols() == 0 { &[][..] } else { anchors.x.row(j) };
                    acc += dj * kernel.eval(proxy, a, x, ap, anchors.action[j], ax);
                }
                acc
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<BridgeFit> {
        Ok(serde_json::from_str(s)?)
    }
}

/// (T h)(w, x) = ∫ h(w, a, x) π(a|x) dμ(a) for a fitted outcome bridge.
pub fn t_apply(h: &BridgeFit, contrast: &ContrastSpec, w: &[f64], x: &[f64]) -> Result<f64> {
    if h.kind != BridgeKind::Outcome {
        return Err(Error::validation("t_apply expects an outcome bridge"));
    }
    contrast.check_compatible(&h.action_kind)?;
    Ok(contrast.integrate(x, |a| h.eval(w, a, x)))
}

/// T applied to the second argument of a kernel section:
/// ∫ π(a|x') k((w,a₀,x₀), (w',a,x')) dμ(a), the entries of the
/// contrast-integrated Gram matrix.
pub fn t_apply_kernel(
    kernel: &KernelSpec,
    contrast: &ContrastSpec,
    anchor: (&[f64], f64, &[f64]),
    target: (&[f64], &[f64]),
) -> f64 {
    let (w0, a0, x0) = anchor;
    let (w1, x1) = target;
    contrast.integrate(x1, |a| kernel.eval(w0, a0, x0, w1, a, x1))
}
