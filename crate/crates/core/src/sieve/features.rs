//! Linear sieve bases over (proxy, action, x) triples.
//!
//! A `FeatureMap` is a fixed-dimension map (proxy, a, x) -> R^d. The same
//! type serves hypothesis classes (features of (w,a,x) or (z,a,x)) and
//! critic classes; which proxy block it reads is decided by the caller.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on basis dimension; crossing it is almost always a config
/// typo (e.g. polynomial degree on a wide block).
const MAX_DIM: usize = 20_000;

/// Declarative basis description; the serializable half of [`FeatureMap`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSpec {
    /// The single feature 1.
    Constant,
    /// One indicator per joint level of (proxy coords, action, x coords).
    /// Coordinates are integer-coded 0..L; `proxy_levels[j]` is the level
    /// count of proxy coordinate j, likewise `x_levels`. Exactly one
    /// feature is 1 at any input.
    SaturatedIndicator {
        proxy_levels: Vec<usize>,
        n_actions: usize,
        x_levels: Vec<usize>,
    },
    /// All monomials of total degree <= `degree` in the concatenation of
    /// the first `proxy_dims` proxy coordinates, the action (when
    /// `include_action`), and the first `x_dims` covariates. Includes the
    /// constant term.
    Polynomial {
        degree: u32,
        proxy_dims: usize,
        include_action: bool,
        x_dims: usize,
    },
    /// Tensor product of piecewise-linear hat bases, one per coordinate.
    /// Each knot vector is strictly increasing; evaluation clamps inputs
    /// to the knot range. An empty `action_knots` means the action is not
    /// read. Hat bases sum to one, so the span contains constants.
    TensorSpline {
        proxy_knots: Vec<Vec<f64>>,
        action_knots: Vec<f64>,
        x_knots: Vec<Vec<f64>>,
    },
    /// Every feature of `inner` multiplied by `factor` (> 0). Spans the
    /// same space; useful for putting critic features on a common scale.
    Scaled { factor: f64, inner: Box<FeatureSpec> },
}

/// A validated, evaluable basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FeatureSpec", into = "FeatureSpec")]
pub struct FeatureMap {
    spec: FeatureSpec,
    dim: usize,
    /// Exponent table for the polynomial family, empty otherwise.
    monomials: Vec<Vec<u32>>,
    /// Built inner map for the scaled family, None otherwise.
    inner: Option<Box<FeatureMap>>,
}

impl TryFrom<FeatureSpec> for FeatureMap {
    type Error = Error;

    fn try_from(spec: FeatureSpec) -> Result<FeatureMap> {
        FeatureMap::build(spec)
    }
}

impl From<FeatureMap> for FeatureSpec {
    fn from(m: FeatureMap) -> FeatureSpec {
        m.spec
    }
}

impl FeatureMap {
    pub fn build(spec: FeatureSpec) -> Result<FeatureMap> {
        let mut inner = None;
        let (dim, monomials) = match &spec {
            FeatureSpec::Constant => (1, Vec::new()),
            FeatureSpec::SaturatedIndicator { proxy_levels, n_actions, x_levels } => {
                if *n_actions == 0 {
                    return Err(Error::validation("saturated basis needs n_actions >= 1"));
                }
                if proxy_levels.iter().chain(x_levels).any(|&l| l == 0) {
                    return Err(Error::validation("saturated basis level counts must be >= 1"));
                }
                let mut d = *n_actions;
                for &l in proxy_levels.iter().chain(x_levels) {
                    d = d.checked_mul(l).ok_or_else(|| {
                        Error::validation("saturated basis dimension overflows")
                    })?;
                }
                (d, Vec::new())
            }
            FeatureSpec::Polynomial { degree, proxy_dims, include_action, x_dims } => {
                let nvars = proxy_dims + usize::from(*include_action) + x_dims;
                let mono = enumerate_monomials(nvars, *degree);
                (mono.len(), mono)
            }
            FeatureSpec::TensorSpline { proxy_knots, action_knots, x_knots } => {
                let mut d = 1usize;
                for knots in proxy_knots
                    .iter()
                    .chain(std::iter::once(action_knots).filter(|k| !k.is_empty()))
                    .chain(x_knots.iter())
                {
                    validate_knots(knots)?;
                    d = d.checked_mul(knots.len()).ok_or_else(|| {
                        Error::validation("tensor-spline dimension overflows")
                    })?;
                }
                if proxy_knots.is_empty() && action_knots.is_empty() && x_knots.is_empty() {
                    return Err(Error::validation("tensor-spline basis reads no coordinate"));
                }
                (d, Vec::new())
            }
            FeatureSpec::Scaled { factor, inner: inner_spec } => {
                if !factor.is_finite() || *factor <= 0.0 {
                    return Err(Error::validation("scale factor must be finite and > 0"));
                }
                let built = FeatureMap::build((**inner_spec).clone())?;
                let d = built.dim;
                inner = Some(Box::new(built));
                (d, Vec::new())
            }
        };
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::validation(format!(
                "basis dimension {dim} outside 1..={MAX_DIM}"
            )));
        }
        Ok(FeatureMap { spec, dim, monomials, inner })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    /// (#proxy coords read, reads action?, #x coords read): used to check a
    /// basis against table dimensions before fitting.
    pub fn required_dims(&self) -> (usize, bool, usize) {
        match &self.spec {
            FeatureSpec::Constant => (0, false, 0),
            FeatureSpec::SaturatedIndicator { proxy_levels, x_levels, .. } => {
                (proxy_levels.len(), true, x_levels.len())
            }
            FeatureSpec::Polynomial { proxy_dims, include_action, x_dims, .. } => {
                (*proxy_dims, *include_action, *x_dims)
            }
            FeatureSpec::TensorSpline { proxy_knots, action_knots, x_knots } => {
                (proxy_knots.len(), !action_knots.is_empty(), x_knots.len())
            }
            FeatureSpec::Scaled { .. } => self.inner.as_ref().unwrap().required_dims(),
        }
    }

    /// Writes the feature vector at (proxy, a, x) into `out`.
    pub fn eval_into(&self, proxy: &[f64], a: f64, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        match &self.spec {
            FeatureSpec::Constant => out[0] = 1.0,
            FeatureSpec::SaturatedIndicator { proxy_levels, n_actions, x_levels } => {
                out.fill(0.0);
                let mut idx = 0usize;
                for (j, &levels) in proxy_levels.iter().enumerate() {
                    idx = idx * levels + clamp_level(proxy[j], levels);
                }
                idx = idx * n_actions + clamp_level(a, *n_actions);
                for (j, &levels) in x_levels.iter().enumerate() {
                    idx = idx * levels + clamp_level(x[j], levels);
                }
                out[idx] = 1.0;
            }
            FeatureSpec::Polynomial { proxy_dims, include_action, x_dims, .. } => {
                let mut vars = Vec::with_capacity(proxy_dims + 1 + x_dims);
                vars.extend_from_slice(&proxy[..*proxy_dims]);
                if *include_action {
                    vars.push(a);
                }
                vars.extend_from_slice(&x[..*x_dims]);
                for (k, expo) in self.monomials.iter().enumerate() {
                    let mut p = 1.0;
                    for (v, &e) in vars.iter().zip(expo) {
                        for _ in 0..e {
                            p *= v;
                        }
                    }
                    out[k] = p;
                }
            }
            FeatureSpec::TensorSpline { proxy_knots, action_knots, x_knots } => {
                let mut per_coord: Vec<Vec<f64>> = Vec::new();
                for (j, knots) in proxy_knots.iter().enumerate() {
                    per_coord.push(hat_basis(proxy[j], knots));
                }
                if !action_knots.is_empty() {
                    per_coord.push(hat_basis(a, action_knots));
                }
                for (j, knots) in x_knots.iter().enumerate() {
                    per_coord.push(hat_basis(x[j], knots));
                }
                tensor_product(&per_coord, out);
            }
            FeatureSpec::Scaled { factor, .. } => {
                self.inner.as_ref().unwrap().eval_into(proxy, a, x, out);
                for v in out.iter_mut() {
                    *v *= factor;
                }
            }
        }
    }

    pub fn eval_vec(&self, proxy: &[f64], a: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(proxy, a, x, &mut out);
        out
    }

    /// coeffs . features(proxy, a, x), allocating nothing for the trivial
    /// families.
    pub fn dot(&self, proxy: &[f64], a: f64, x: &[f64], coeffs: &[f64]) -> f64 {
        debug_assert_eq!(coeffs.len(), self.dim);
        match &self.spec {
            FeatureSpec::Constant => coeffs[0],
            FeatureSpec::SaturatedIndicator { proxy_levels, n_actions, x_levels } => {
                let mut idx = 0usize;
                for (j, &levels) in proxy_levels.iter().enumerate() {
                    idx = idx * levels + clamp_level(proxy[j], levels);
                }
                idx = idx * n_actions + clamp_level(a, *n_actions);
                for (j, &levels) in x_levels.iter().enumerate() {
                    idx = idx * levels + clamp_level(x[j], levels);
                }
                coeffs[idx]
            }
            FeatureSpec::Scaled { factor, .. } => {
                factor * self.inner.as_ref().unwrap().dot(proxy, a, x, coeffs)
            }
            _ => {
                let mut buf = vec![0.0; self.dim];
                self.eval_into(proxy, a, x, &mut buf);
                buf.iter().zip(coeffs).map(|(f, c)| f * c).sum()
            }
        }
    }
}

/// Errors unless `map` fits within a proxy block of `proxy_cols` columns
/// and `d_x` covariates; `name` labels the offending basis in messages.
pub(crate) fn check_feature_arity(
    map: &FeatureMap,
    name: &str,
    proxy_cols: usize,
    d_x: usize,
) -> Result<()> {
    let (p, _a, dx) = map.required_dims();
    if p > proxy_cols {
        return Err(Error::validation(format!(
            "{name} reads {p} proxy coordinates but the block has {proxy_cols}"
        )));
    }
    if dx > d_x {
        return Err(Error::validation(format!(
            "{name} reads {dx} covariates but the table has {d_x}"
        )));
    }
    Ok(())
}

fn clamp_level(v: f64, levels: usize) -> usize {
    let r = v.round();
    if r <= 0.0 {
        0
    } else {
        (r as usize).min(levels - 1)
    }
}

fn validate_knots(knots: &[f64]) -> Result<()> {
    if knots.is_empty() {
        return Err(Error::validation("knot vector must be nonempty"));
    }
    for pair in knots.windows(2) {
        if !(pair[0] < pair[1]) {
            return Err(Error::validation("knots must be strictly increasing"));
        }
    }
    if knots.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("knots must be finite"));
    }
    Ok(())
}

/// Piecewise-linear hat functions on `knots`, clamped outside the range.
/// basis[j](knots[j]) = 1, zero at all other knots; the values sum to one.
fn hat_basis(v: f64, knots: &[f64]) -> Vec<f64> {
    let m = knots.len();
    let mut out = vec![0.0; m];
    if m == 1 {
        out[0] = 1.0;
        return out;
    }
    let v = v.clamp(knots[0], knots[m - 1]);
    // Locate the segment [knots[s], knots[s+1]] containing v.
    let mut s = match knots.binary_search_by(|k| k.partial_cmp(&v).unwrap()) {
        Ok(j) => j.min(m - 2),
        Err(j) => j.saturating_sub(1).min(m - 2),
    };
    if v < knots[s] {
        s = s.saturating_sub(1);
    }
    let t = (v - knots[s]) / (knots[s + 1] - knots[s]);
    out[s] = 1.0 - t;
    out[s + 1] = t;
    out
}

/// Flattened outer product of per-coordinate basis vectors, mixed-radix
/// ordered with the first coordinate slowest.
fn tensor_product(per_coord: &[Vec<f64>], out: &mut [f64]) {
    out.fill(0.0);
    let dim: usize = per_coord.iter().map(|b| b.len()).product();
    debug_assert_eq!(out.len(), dim);
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        let mut val = 1.0;
        for b in per_coord.iter().rev() {
            let j = rem % b.len();
            rem /= b.len();
            val *= b[j];
        }
        *slot = val;
    }
}

/// Multi-indices of total degree <= `degree` over `nvars` variables,
/// graded (degree-major) then lexicographic; index 0 is the constant.
fn enumerate_monomials(nvars: usize, degree: u32) -> Vec<Vec<u32>> {
    let mut all = Vec::new();
    if nvars == 0 {
        all.push(Vec::new());
        return all;
    }
    for total in 0..=degree {
        let mut current = vec![0u32; nvars];
        fill_monomials(&mut current, 0, total, &mut all);
    }
    all
}

fn fill_monomials(current: &mut Vec<u32>, pos: usize, remaining: u32, all: &mut Vec<Vec<u32>>) {
    if pos == current.len() - 1 {
        current[pos] = remaining;
        all.push(current.clone());
        current[pos] = 0;
        return;
    }
    for e in (0..=remaining).rev() {
        current[pos] = e;
        fill_monomials(current, pos + 1, remaining - e, all);
        current[pos] = 0;
    }
}
