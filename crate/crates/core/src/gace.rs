//! Final-estimand computation: the three plug-in estimators of the
//! generalized policy value, the cross-fitted doubly robust estimator,
//! and influence-function confidence intervals.
//!
//! All three plug-ins consume fitted bridges and a contrast:
//!
//! * IPW form: Ĵ = E_n[π(A|X) q̂(Z,A,X) Y]
//! * REG form: Ĵ = E_n[(T ĥ)(W,X)]
//! * DR form:  Ĵ = E_n[π q̂ (Y − ĥ) + T ĥ]
//!
//! Only the DR form carries an asymptotic normality guarantee, so IPW and
//! REG reports flag their intervals as descriptive. The DR standard error
//! is the plug-in influence-function variance E_n[(φ_i − Ĵ)²] / n. When
//! the bridge sets are nonunique the asymptotic variance is defined at
//! projected bridge representatives; the plug-in at an unprojected fit is
//! reported as is, with no conservativeness claim attached.
//!
//! Variance convention: every report uses the n-denominator second moment
//! about Ĵ. One convention everywhere makes the degenerate reductions
//! exact: DR with q̂ ≡ 0 equals the REG report field for field, and DR
//! with ĥ ≡ 0 equals the IPW report.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{
    t_apply, BridgeFit, BridgeKind, ContrastSpec, FitDiagnostics, ObservationTable, Strategy,
};
use crate::rkhs::{build_gram_bundle, fit_h_kernel, fit_q_kernel, HypothesisClass, KernelSpec};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sieve::{default_gamma, fit_h_sieve, fit_q_sieve, FeatureMap, FeatureSpec, SieveConfig};

/// Miscoverage of the interval every estimator reports by default; use
/// [`EstimateReport::with_alpha`] for any other level.
pub const DEFAULT_ALPHA: f64 = 0.05;

/// Stream tag separating the fold shuffle from other uses of a seed.
const FOLD_SHUFFLE: u64 = 0x666f_6c64;

pub(crate) fn z_quantile(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::validation("alpha must lie strictly inside (0, 1)"));
    }
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal is well defined");
    Ok(std_normal.inverse_cdf(1.0 - alpha / 2.0))
}

fn var_about(scores: &[f64], center: f64) -> f64 {
    scores.iter().map(|s| (s - center) * (s - center)).sum::<f64>() / scores.len() as f64
}

/// Sample sizes and solver metadata for the nuisances behind one fold of
/// an estimate. Single-sample estimators report one pseudo-fold covering
/// the whole sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldDiagnostics {
    pub fold: usize,
    pub n_fit: usize,
    pub n_score: usize,
    pub h: Option<FitDiagnostics>,
    pub q: Option<FitDiagnostics>,
}

/// Everything one estimator run produces. Serializable as the report
/// artifact; `ci_lo <= j_hat <= ci_hi` and the interval half-width is
/// exactly `z_{1 - alpha/2} * se` by construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimator: String,
    pub j_hat: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Miscoverage: the interval is j_hat ± z_{1 − alpha/2} · se.
    pub alpha: f64,
    /// True when the interval has no coverage guarantee (IPW and REG
    /// forms); only the DR forms carry the normality result.
    pub descriptive_ci: bool,
    pub n: usize,
    pub folds: Vec<FoldDiagnostics>,
    /// Echo of what produced this report, for audit trails.
    pub config: serde_json::Value,
}

impl EstimateReport {
    fn assemble(
        estimator: &str,
        scores: &[f64],
        descriptive_ci: bool,
        folds: Vec<FoldDiagnostics>,
        config: serde_json::Value,
    ) -> Result<EstimateReport> {
        let n = scores.len();
        if n == 0 {
            return Err(Error::validation("cannot estimate from an empty sample"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::computation("non-finite score encountered; check bridge fits"));
        }
        let j_hat = scores.iter().sum::<f64>() / n as f64;
        let se = (var_about(scores, j_hat) / n as f64).sqrt();
        let z = z_quantile(DEFAULT_ALPHA)?;
        Ok(EstimateReport {
            estimator: estimator.to_string(),
            j_hat,
            se,
            ci_lo: j_hat - z * se,
            ci_hi: j_hat + z * se,
            alpha: DEFAULT_ALPHA,
            descriptive_ci,
            n,
            folds,
            config,
        })
    }

    /// Same point estimate and se, interval recomputed at miscoverage
    /// `alpha`. Larger alpha gives a strictly narrower interval.
    pub fn with_alpha(mut self, alpha: f64) -> Result<EstimateReport> {
        let z = z_quantile(alpha)?;
        self.alpha = alpha;
        self.ci_lo = self.j_hat - z * self.se;
        self.ci_hi = self.j_hat + z * self.se;
        Ok(self)
    }

    pub fn ci(&self) -> (f64, f64) {
        (self.ci_lo, self.ci_hi)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<EstimateReport> {
        Ok(serde_json::from_str(s)?)
    }
}

fn check_scoring_inputs(data: &ObservationTable, contrast: &ContrastSpec) -> Result<()> {
    if data.n() == 0 {
        return Err(Error::validation("cannot score an empty sample"));
    }
    contrast.check_compatible(data.action_kind())
}

/// Per-row IPW scores π(A_i|X_i) q̂(Z_i, A_i, X_i) Y_i.
pub fn ipw_scores(
    q_hat: &BridgeFit,
    data: &ObservationTable,
    contrast: &ContrastSpec,
) -> Result<Vec<f64>> {
    if q_hat.kind != BridgeKind::Action {
        return Err(Error::validation("the IPW form needs an action bridge"));
    }
    check_scoring_inputs(data, contrast)?;
    contrast.check_compatible(&q_hat.action_kind)?;
    let mut scores = Vec::with_capacity(data.n());
    for i in 0..data.n() {
        let a = data.a()[i];
        let x = data.x_row(i);
        scores.push(contrast.pi(a, x) * q_hat.eval(data.z_row(i), a, x) * data.y()[i]);
    }
    Ok(scores)
}

/// Per-row REG scores (T ĥ)(W_i, X_i).
pub fn reg_scores(
    h_hat: &BridgeFit,
    data: &ObservationTable,
    contrast: &ContrastSpec,
) -> Result<Vec<f64>> {
    check_scoring_inputs(data, contrast)?;
    let mut scores = Vec::with_capacity(data.n());
    for i in 0..data.n() {
        scores.push(t_apply(h_hat, contrast, data.w_row(i), data.x_row(i))?);
    }
    Ok(scores)
}

/// Per-row DR scores π q̂ (Y − ĥ) + T ĥ; the influence-function summand.
pub fn dr_scores(
    h_hat: &BridgeFit,
    q_hat: &BridgeFit,
    data: &ObservationTable,
    contrast: &ContrastSpec,
) -> Result<Vec<f64>> {
    if h_hat.kind != BridgeKind::Outcome {
        return Err(Error::validation("the DR form needs an outcome bridge for h"));
    }
    if q_hat.kind != BridgeKind::Action {
        return Err(Error::validation("the DR form needs an action bridge for q"));
    }
    check_scoring_inputs(data, contrast)?;
    contrast.check_compatible(&q_hat.action_kind)?;
    let mut scores = Vec::with_capacity(data.n());
    for i in 0..data.n() {
        let a = data.a()[i];
        let x = data.x_row(i);
        let w = data.w_row(i);
        let th = t_apply(h_hat, contrast, w, x)?;
        let resid = data.y()[i] - h_hat.eval(w, a, x);
        scores.push(contrast.pi(a, x) * q_hat.eval(data.z_row(i), a, x) * resid + th);
    }
    Ok(scores)
}

fn config_echo(estimator: &str, contrast: &ContrastSpec, extra: serde_json::Value) -> serde_json::Value {
    let mut obj = serde_json::json!({
        "estimator": estimator,
        "contrast": contrast.name(),
        "alpha": DEFAULT_ALPHA,
        "se_method": "plug_in_influence_function",
    });
    if let serde_json::Value::Object(m) = extra {
        obj.as_object_mut().expect("literal object").extend(m);
    }
    obj
}

fn whole_sample_fold(
    n_score: usize,
    h: Option<&FitDiagnostics>,
    q: Option<&FitDiagnostics>,
) -> FoldDiagnostics {
    let n_fit = h.map_or(0, |d| d.n).max(q.map_or(0, |d| d.n));
    FoldDiagnostics { fold: 0, n_fit, n_score, h: h.cloned(), q: q.cloned() }
}

/// Ĵ_IPW = E_n[π q̂ Y]. The interval is descriptive: this form has no
/// normality result of its own.
pub fn estimate_ipw(
    q_hat: &BridgeFit,
    data: &ObservationTable,
    contrast: &ContrastSpec,
) -> Result<EstimateReport> {
    let scores = ipw_scores(q_hat, data, contrast)?;
    let folds = vec![whole_sample_fold(data.n(), None, Some(&q_hat.diagnostics))];
    EstimateReport::assemble("ipw", &scores, true, folds, config_echo("ipw", contrast, serde_json::json!({})))
}

/// Ĵ_REG = E_n[(T ĥ)(W, X)]. The interval is descriptive.
pub fn estimate_reg(
    h_hat: &BridgeFit,
    data: &ObservationTable,
    contrast: &ContrastSpec,
) -> Result<EstimateReport> {
    let scores = reg_scores(h_hat, data, contrast)?;
    let folds = vec![whole_sample_fold(data.n(), Some(&h_hat.diagnostics), None)];
    EstimateReport::assemble("reg", &scores, true, folds, config_echo("reg", contrast, serde_json::json!({})))
}

/// Ĵ_DR = E_n[π q̂ (Y − ĥ) + T ĥ], se from the influence-function
/// variance at the fitted bridges.
pub fn estimate_dr(
    h_hat: &BridgeFit,
    q_hat: &BridgeFit,
    data: &ObservationTable,
    contrast: &ContrastSpec,
) -> Result<EstimateReport> {
    let scores = dr_scores(h_hat, q_hat, data, contrast)?;
    let folds =
        vec![whole_sample_fold(data.n(), Some(&h_hat.diagnostics), Some(&q_hat.diagnostics))];
    EstimateReport::assemble("dr", &scores, false, folds, config_echo("dr", contrast, serde_json::json!({})))
}

/// V̂ = E_n[(φ_i − Ĵ)²] with φ the DR score at the supplied bridges.
/// se = sqrt(V̂ / n).
pub fn eif_variance(
    h_hat: &BridgeFit,
    q_hat: &BridgeFit,
    j_hat: f64,
    data: &ObservationTable,
    contrast: &ContrastSpec,
) -> Result<f64> {
    if !j_hat.is_finite() {
        return Err(Error::validation("j_hat must be finite"));
    }
    let scores = dr_scores(h_hat, q_hat, data, contrast)?;
    Ok(var_about(&scores, j_hat))
}

/// Hyperparameters of one minimax game. `lambda = 0` plays the plain
/// game. `lambda > 0` plays the stabilized game, where `gamma = 0` means
/// "use the recommended critic ridge computed from the fit sample"
/// (sieve family only; kernel fits need an explicit positive gamma).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GamePlan {
    pub lambda: f64,
    pub gamma: f64,
    pub rho: f64,
}

impl GamePlan {
    pub fn plain() -> GamePlan {
        GamePlan { lambda: 0.0, gamma: 0.0, rho: 0.0 }
    }

    /// Stabilized game with the per-sample automatic critic ridge.
    pub fn stabilized(lambda: f64) -> GamePlan {
        GamePlan { lambda, gamma: 0.0, rho: 0.0 }
    }

    pub fn with_gamma(mut self, gamma: f64) -> GamePlan {
        self.gamma = gamma;
        self
    }

    pub fn with_rho(mut self, rho: f64) -> GamePlan {
        self.rho = rho;
        self
    }
}

/// Hypothesis class for one side of a kernel-critic fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum HypothesisSpec {
    Sieve { feature: FeatureSpec },
    Kernel { kernel: KernelSpec },
}

impl HypothesisSpec {
    fn to_class(&self) -> Result<HypothesisClass> {
        Ok(match self {
            HypothesisSpec::Sieve { feature } => {
                HypothesisClass::Sieve(FeatureMap::build(feature.clone())?)
            }
            HypothesisSpec::Kernel { kernel } => {
                kernel.validate()?;
                HypothesisClass::Kernel(kernel.clone())
            }
        })
    }

    fn min_fit_size(&self) -> Result<usize> {
        Ok(match self {
            HypothesisSpec::Sieve { feature } => FeatureMap::build(feature.clone())?.dim(),
            HypothesisSpec::Kernel { .. } => 2,
        })
    }
}

/// Recipe for fitting both nuisances on a sample. Cross-fitting reuses
/// one recipe on every fold complement; [`NuisanceConfig::fit`] is also
/// the single-sample entry point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum NuisanceConfig {
    /// Both bridges by the closed-form sieve game.
    Sieve {
        h_hypothesis: FeatureSpec,
        h_critic: FeatureSpec,
        q_hypothesis: FeatureSpec,
        q_critic: FeatureSpec,
        h_game: GamePlan,
        q_game: GamePlan,
    },
    /// Both bridges against kernel critics; hypotheses may be sieve or
    /// kernel classes. `gamma1` regularizes the outcome-side critic,
    /// `gamma2` the action side.
    Rkhs {
        kernel_z: KernelSpec,
        kernel_w: KernelSpec,
        h_hypothesis: HypothesisSpec,
        q_hypothesis: HypothesisSpec,
        strategy: Strategy,
        lambda: f64,
        gamma1: f64,
        gamma2: f64,
        rho: f64,
    },
    /// Pre-fitted bridges; the fit sample is ignored. Lets oracle or
    /// externally fitted nuisances ride the same scoring path.
    Fixed { h: BridgeFit, q: BridgeFit },
}

fn sieve_config(
    hypothesis: &FeatureSpec,
    critic: &FeatureSpec,
    game: &GamePlan,
    data: &ObservationTable,
    kind: BridgeKind,
) -> Result<SieveConfig> {
    let hypothesis = FeatureMap::build(hypothesis.clone())?;
    let critic = FeatureMap::build(critic.clone())?;
    let gamma = if game.lambda > 0.0 && game.gamma == 0.0 {
        default_gamma(data, &critic, kind)?
    } else {
        game.gamma
    };
    let cfg = SieveConfig { hypothesis, critic, lambda: game.lambda, gamma, rho: game.rho };
    cfg.validate()?;
    Ok(cfg)
}

impl NuisanceConfig {
    /// Smallest fit sample this recipe is solvable on: the largest basis
    /// dimension involved, or trivial bounds for kernel and fixed routes.
    pub fn min_fit_size(&self) -> Result<usize> {
        Ok(match self {
            NuisanceConfig::Sieve { h_hypothesis, h_critic, q_hypothesis, q_critic, .. } => {
                let mut d = 2;
                for spec in [h_hypothesis, h_critic, q_hypothesis, q_critic] {
                    d = d.max(FeatureMap::build(spec.clone())?.dim());
                }
                d
            }
            NuisanceConfig::Rkhs { h_hypothesis, q_hypothesis, .. } => {
                h_hypothesis.min_fit_size()?.max(q_hypothesis.min_fit_size()?).max(2)
            }
            NuisanceConfig::Fixed { .. } => 1,
        })
    }

    /// Fits (ĥ, q̂) on `data` for `contrast`.
    pub fn fit(
        &self,
        data: &ObservationTable,
        contrast: &ContrastSpec,
    ) -> Result<(BridgeFit, BridgeFit)> {
        match self {
            NuisanceConfig::Sieve {
                h_hypothesis,
                h_critic,
                q_hypothesis,
                q_critic,
                h_game,
                q_game,
            } => {
                let h_cfg = sieve_config(h_hypothesis, h_critic, h_game, data, BridgeKind::Outcome)?;
                let q_cfg = sieve_config(q_hypothesis, q_critic, q_game, data, BridgeKind::Action)?;
                Ok((fit_h_sieve(data, &h_cfg)?, fit_q_sieve(data, &q_cfg, contrast)?))
            }
            NuisanceConfig::Rkhs {
                kernel_z,
                kernel_w,
                h_hypothesis,
                q_hypothesis,
                strategy,
                lambda,
                gamma1,
                gamma2,
                rho,
            } => {
                let gram = build_gram_bundle(data, kernel_z, kernel_w, contrast)?;
                let h = fit_h_kernel(
                    data,
                    &gram,
                    &h_hypothesis.to_class()?,
                    *strategy,
                    *lambda,
                    *gamma1,
                    *rho,
                )?;
                let q = fit_q_kernel(
                    data,
                    &gram,
                    &q_hypothesis.to_class()?,
                    *strategy,
                    *lambda,
                    *gamma2,
                    *rho,
                    contrast,
                )?;
                Ok((h, q))
            }
            NuisanceConfig::Fixed { h, q } => {
                if h.kind != BridgeKind::Outcome || q.kind != BridgeKind::Action {
                    return Err(Error::validation(
                        "fixed nuisances must pair an outcome bridge with an action bridge",
                    ));
                }
                Ok((h.clone(), q.clone()))
            }
        }
    }

    /// Fits the outcome bridge alone; the kernel route still builds the full
    /// Gram bundle, so prefer [`NuisanceConfig::fit`] when both are needed.
    pub fn fit_h(&self, data: &ObservationTable, contrast: &ContrastSpec) -> Result<BridgeFit> {
        match self {
            NuisanceConfig::Sieve { h_hypothesis, h_critic, h_game, .. } => {
                let cfg = sieve_config(h_hypothesis, h_critic, h_game, data, BridgeKind::Outcome)?;
                fit_h_sieve(data, &cfg)
            }
            NuisanceConfig::Rkhs {
                kernel_z, kernel_w, h_hypothesis, strategy, lambda, gamma1, rho, ..
            } => {
                let gram = build_gram_bundle(data, kernel_z, kernel_w, contrast)?;
                fit_h_kernel(data, &gram, &h_hypothesis.to_class()?, *strategy, *lambda, *gamma1, *rho)
            }
            NuisanceConfig::Fixed { h, .. } => {
                if h.kind != BridgeKind::Outcome {
                    return Err(Error::validation("fixed h nuisance must be an outcome bridge"));
                }
                Ok(h.clone())
            }
        }
    }

    /// Fits the action bridge alone; same Gram caveat as [`NuisanceConfig::fit_h`].
    pub fn fit_q(&self, data: &ObservationTable, contrast: &ContrastSpec) -> Result<BridgeFit> {
        match self {
            NuisanceConfig::Sieve { q_hypothesis, q_critic, q_game, .. } => {
                let cfg = sieve_config(q_hypothesis, q_critic, q_game, data, BridgeKind::Action)?;
                fit_q_sieve(data, &cfg, contrast)
            }
            NuisanceConfig::Rkhs {
                kernel_z, kernel_w, q_hypothesis, strategy, lambda, gamma2, rho, ..
            } => {
                let gram = build_gram_bundle(data, kernel_z, kernel_w, contrast)?;
                fit_q_kernel(
                    data,
                    &gram,
                    &q_hypothesis.to_class()?,
                    *strategy,
                    *lambda,
                    *gamma2,
                    *rho,
                    contrast,
                )
            }
            NuisanceConfig::Fixed { q, .. } => {
                if q.kind != BridgeKind::Action {
                    return Err(Error::validation("fixed q nuisance must be an action bridge"));
                }
                Ok(q.clone())
            }
        }
    }
}

/// Cross-fitted DR: a seeded uniform shuffle splits rows into `folds`
/// contiguous blocks; each block is scored with nuisances fit on its
/// complement, and Ĵ pools all n scores. Deterministic given the seed;
/// fold fits run in parallel but are reduced in fold order.
pub fn estimate_dr_crossfit(
    data: &ObservationTable,
    contrast: &ContrastSpec,
    nuisance: &NuisanceConfig,
    folds: usize,
    seed: u64,
) -> Result<EstimateReport> {
    if folds < 2 {
        return Err(Error::validation("cross-fitting needs folds >= 2"));
    }
    let n = data.n();
    if n < folds {
        return Err(Error::validation(format!("n = {n} cannot fill {folds} folds")));
    }
    contrast.check_compatible(data.action_kind())?;
    let min_fit = nuisance.min_fit_size()?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(derive_seed(seed, &[FOLD_SHUFFLE])));
    let bounds: Vec<usize> = (0..=folds).map(|f| f * n / folds).collect();
    for f in 0..folds {
        let fit_size = n - (bounds[f + 1] - bounds[f]);
        if fit_size < min_fit {
            return Err(Error::validation(format!(
                "fold {f} leaves a fit sample of {fit_size} rows but the nuisance config \
                 needs at least {min_fit}; lower the fold count or the basis dimensions"
            )));
        }
    }

    let per_fold: Result<Vec<(Vec<f64>, FoldDiagnostics)>> = (0..folds)
        .into_par_iter()
        .map(|f| {
            let score_idx = &order[bounds[f]..bounds[f + 1]];
            let fit_idx: Vec<usize> = order[..bounds[f]]
                .iter()
                .chain(order[bounds[f + 1]..].iter())
                .copied()
                .collect();
            let fit_data = data.subset(&fit_idx)?;
            let (h, q) = nuisance.fit(&fit_data, contrast)?;
            let score_data = data.subset(score_idx)?;
            let scores = dr_scores(&h, &q, &score_data, contrast)?;
            Ok((
                scores,
                FoldDiagnostics {
                    fold: f,
                    n_fit: fit_idx.len(),
                    n_score: score_idx.len(),
                    h: Some(h.diagnostics),
                    q: Some(q.diagnostics),
                },
            ))
        })
        .collect();
    let per_fold = per_fold?;

    let mut scores = Vec::with_capacity(n);
    let mut fold_diag = Vec::with_capacity(folds);
    for (s, d) in per_fold {
        scores.extend_from_slice(&s);
        fold_diag.push(d);
    }

    let config = config_echo(
        "dr_crossfit",
        contrast,
        serde_json::json!({
            "folds": folds,
            "seed": seed,
            "nuisance": serde_json::to_value(nuisance)?,
        }),
    );
    EstimateReport::assemble("dr_crossfit", &scores, false, fold_diag, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ActionKind, ClassDescriptor, RowMatrix};
    use crate::synthetic::bundled::{dgp_nonunique, dgp_unique};
    use crate::synthetic::{
        generate_discrete, oracle_discrete_bridge_sets, oracle_discrete_j, saturated_bridge_fit,
        DiscreteDgp,
    };

    fn constant_bridge(kind: BridgeKind, c: f64, action_kind: ActionKind) -> BridgeFit {
        BridgeFit {
            kind,
            action_kind,
            class: ClassDescriptor::Sieve {
                feature: FeatureMap::build(FeatureSpec::Constant).unwrap(),
                coeffs: vec![c],
            },
            diagnostics: FitDiagnostics {
                objective: 0.0,
                strategy: Strategy::Unstabilized,
                lambda: 0.0,
                gamma: 0.0,
                rho: 0.0,
                n: 0,
                notes: vec![],
            },
        }
    }

    fn oracle_fits(dgp: &DiscreteDgp) -> (BridgeFit, BridgeFit) {
        let sets = oracle_discrete_bridge_sets(dgp).unwrap();
        let h = saturated_bridge_fit(dgp, BridgeKind::Outcome, |w, a, x| sets.h0(w, a, x)).unwrap();
        let q = saturated_bridge_fit(dgp, BridgeKind::Action, |z, a, x| sets.q0(z, a, x)).unwrap();
        (h, q)
    }

    fn saturated_spec(dgp: &DiscreteDgp, kind: BridgeKind) -> FeatureSpec {
        let levels = match kind {
            BridgeKind::Outcome => dgp.n_w(),
            BridgeKind::Action => dgp.n_z(),
        };
        FeatureSpec::SaturatedIndicator {
            proxy_levels: vec![levels],
            n_actions: dgp.n_a(),
            x_levels: vec![dgp.n_x()],
        }
    }

    fn saturated_nuisance(dgp: &DiscreteDgp) -> NuisanceConfig {
        NuisanceConfig::Sieve {
            h_hypothesis: saturated_spec(dgp, BridgeKind::Outcome),
            h_critic: saturated_spec(dgp, BridgeKind::Action),
            q_hypothesis: saturated_spec(dgp, BridgeKind::Action),
            q_critic: saturated_spec(dgp, BridgeKind::Outcome),
            h_game: GamePlan::plain(),
            q_game: GamePlan::plain(),
        }
    }

    /// Population DR functional by enumeration of the full joint law;
    /// independent of the score-based code above. W and Z are
    /// conditionally independent given (U, A, X) under this DGP family,
    /// and the outcome noise has mean zero, so both cross terms factor.
    fn population_dr(
        dgp: &DiscreteDgp,
        h: &dyn Fn(usize, usize, usize) -> f64,
        q: &dyn Fn(usize, usize, usize) -> f64,
    ) -> f64 {
        let mut total = 0.0;
        for x in 0..dgp.n_x() {
            for u in 0..dgp.n_u() {
                let p_ux = dgp.p_x_at(x) * dgp.p_u_at(u, x);
                for a in 0..dgp.n_a() {
                    let mut q_mean = 0.0;
                    for z in 0..dgp.n_z() {
                        q_mean += dgp.p_z_at(z, u, a, x) * q(z, a, x);
                    }
                    let mut h_mean = 0.0;
                    for w in 0..dgp.n_w() {
                        h_mean += dgp.p_w_at(w, u, x) * h(w, a, x);
                    }
                    total += p_ux
                        * dgp.f_at(a, u, x)
                        * dgp.pi_at(a, x)
                        * q_mean
                        * (dgp.mean_y(u, a, x) - h_mean);
                }
                for w in 0..dgp.n_w() {
                    let mut th = 0.0;
                    for a in 0..dgp.n_a() {
                        th += dgp.pi_at(a, x) * h(w, a, x);
                    }
                    total += p_ux * dgp.p_w_at(w, u, x) * th;
                }
            }
        }
        total
    }

    fn population_ipw(dgp: &DiscreteDgp, q: &dyn Fn(usize, usize, usize) -> f64) -> f64 {
        population_dr(dgp, &|_, _, _| 0.0, q)
    }

    fn population_reg(dgp: &DiscreteDgp, h: &dyn Fn(usize, usize, usize) -> f64) -> f64 {
        population_dr(dgp, h, &|_, _, _| 0.0)
    }

    #[test]
    fn zero_bridges_reduce_dr_to_the_other_form() {
        let dgp = dgp_unique();
        let data = generate_discrete(&dgp, 400, 31);
        let contrast = dgp.contrast();
        let (h, q) = oracle_fits(&dgp);
        let zero_h = constant_bridge(BridgeKind::Outcome, 0.0, dgp.action_kind());
        let zero_q = constant_bridge(BridgeKind::Action, 0.0, dgp.action_kind());

        let dr_no_q = estimate_dr(&h, &zero_q, &data, &contrast).unwrap();
        let reg = estimate_reg(&h, &data, &contrast).unwrap();
        assert_eq!(dr_no_q.j_hat, reg.j_hat);
        assert_eq!(dr_no_q.se, reg.se);
        assert_eq!(dr_no_q.ci(), reg.ci());

        let dr_no_h = estimate_dr(&zero_h, &q, &data, &contrast).unwrap();
        let ipw = estimate_ipw(&q, &data, &contrast).unwrap();
        assert_eq!(dr_no_h.j_hat, ipw.j_hat);
        assert_eq!(dr_no_h.se, ipw.se);
        assert_eq!(dr_no_h.ci(), ipw.ci());
        assert!(ipw.descriptive_ci);
        assert!(!dr_no_h.descriptive_ci);

        let ipw_zero = estimate_ipw(&zero_q, &data, &contrast).unwrap();
        assert_eq!(ipw_zero.j_hat, 0.0);
    }

    #[test]
    fn constant_h_under_probability_contrast_returns_the_constant() {
        let dgp = dgp_nonunique();
        let data = generate_discrete(&dgp, 200, 5);
        let contrast = dgp.contrast();
        let h = constant_bridge(BridgeKind::Outcome, 2.5, dgp.action_kind());
        let reg = estimate_reg(&h, &data, &contrast).unwrap();
        assert!((reg.j_hat - 2.5).abs() < 1e-12, "got {}", reg.j_hat);
        assert!(reg.se == 0.0);

        let zero_pi = ContrastSpec::from_fn_discrete("zero", dgp.n_a(), |_, _| 0.0).unwrap();
        let reg0 = estimate_reg(&h, &data, &zero_pi).unwrap();
        assert_eq!(reg0.j_hat, 0.0);
    }

    #[test]
    fn additivity_identity_holds_on_arbitrary_bridges() {
        let dgp = dgp_unique();
        let data = generate_discrete(&dgp, 700, 12);
        let contrast = dgp.contrast();
        let h = saturated_bridge_fit(&dgp, BridgeKind::Outcome, |w, a, x| {
            0.4 + 0.9 * w as f64 - 0.6 * a as f64 + 0.3 * x as f64
        })
        .unwrap();
        let q = saturated_bridge_fit(&dgp, BridgeKind::Action, |z, a, x| {
            1.1 - 0.5 * z as f64 + 0.2 * a as f64 - 0.7 * x as f64
        })
        .unwrap();

        let dr = estimate_dr(&h, &q, &data, &contrast).unwrap();
        let ipw = estimate_ipw(&q, &data, &contrast).unwrap();
        let reg = estimate_reg(&h, &data, &contrast).unwrap();
        let mut cross = 0.0;
        for i in 0..data.n() {
            let a = data.a()[i];
            let x = data.x_row(i);
            cross += contrast.pi(a, x)
                * q.eval(data.z_row(i), a, x)
                * h.eval(data.w_row(i), a, x);
        }
        cross /= data.n() as f64;
        let lhs = dr.j_hat;
        let rhs = ipw.j_hat + reg.j_hat - cross;
        assert!((lhs - rhs).abs() < 1e-12, "additivity: {lhs} vs {rhs}");
    }

    #[test]
    fn population_double_robustness_by_enumeration() {
        for dgp in [dgp_unique(), dgp_nonunique()] {
            let j = oracle_discrete_j(&dgp, &dgp.contrast()).unwrap();
            let sets = oracle_discrete_bridge_sets(&dgp).unwrap();
            let h0 = |w: usize, a: usize, x: usize| sets.h0(w, a, x);
            let q0 = |z: usize, a: usize, x: usize| sets.q0(z, a, x);
            let wild_q =
                |z: usize, a: usize, x: usize| 0.3 - 0.8 * z as f64 + 0.5 * a as f64 + x as f64;
            let wild_h =
                |w: usize, a: usize, x: usize| -1.2 + 0.4 * w as f64 + a as f64 - 0.6 * x as f64;

            let dr_good_h = population_dr(&dgp, &h0, &wild_q);
            assert!((dr_good_h - j).abs() < 1e-10, "h-side: {dr_good_h} vs {j}");
            let dr_good_q = population_dr(&dgp, &wild_h, &q0);
            assert!((dr_good_q - j).abs() < 1e-10, "q-side: {dr_good_q} vs {j}");
        }
    }

    #[test]
    fn population_values_are_indifferent_to_bridge_choice() {
        let dgp = dgp_nonunique();
        let j = oracle_discrete_j(&dgp, &dgp.contrast()).unwrap();
        let sets = oracle_discrete_bridge_sets(&dgp).unwrap();
        assert!(sets.h_null_dim(0, 0) >= 1 && sets.q_null_dim(0, 0) >= 1);

        for t in [0.0, 0.7, -1.3] {
            let h = |w: usize, a: usize, x: usize| {
                sets.h0(w, a, x) + t * sets.h_null[x][a][0][w]
            };
            let q = |z: usize, a: usize, x: usize| {
                sets.q0(z, a, x) + t * sets.q_null[x][a][0][z]
            };
            assert!((population_reg(&dgp, &h) - j).abs() < 1e-10);
            assert!((population_ipw(&dgp, &q) - j).abs() < 1e-10);
            assert!((population_dr(&dgp, &h, &q) - j).abs() < 1e-10);
        }
    }

    #[test]
    fn oracle_bridges_estimate_j_at_scale() {
        let dgp = dgp_unique();
        let j = oracle_discrete_j(&dgp, &dgp.contrast()).unwrap();
        let data = generate_discrete(&dgp, 100_000, 2024);
        let contrast = dgp.contrast();
        let (h, q) = oracle_fits(&dgp);

        let ipw = estimate_ipw(&q, &data, &contrast).unwrap();
        assert!((ipw.j_hat - j).abs() <= 4.0 * ipw.se, "ipw {} vs {j} (se {})", ipw.j_hat, ipw.se);
        let reg = estimate_reg(&h, &data, &contrast).unwrap();
        assert!((reg.j_hat - j).abs() <= 4.0 * reg.se, "reg {} vs {j} (se {})", reg.j_hat, reg.se);
        let dr = estimate_dr(&h, &q, &data, &contrast).unwrap();
        assert!((dr.j_hat - j).abs() <= 4.0 * dr.se, "dr {} vs {j} (se {})", dr.j_hat, dr.se);
        assert!(dr.se > 0.0 && dr.se < 0.1, "se should be O(n^-1/2) here, got {}", dr.se);
    }

    #[test]
    fn eif_variance_matches_hand_values() {
        // One action with pi = 1, q ≡ 1, h ≡ 0: the DR score is y + 0 = y.
        let data = ObservationTable::new(
            vec![0.0, 2.0],
            RowMatrix::from_rows(&[vec![0.0], vec![0.0]], 1).unwrap(),
            RowMatrix::from_rows(&[vec![0.0], vec![0.0]], 1).unwrap(),
            vec![0.0, 0.0],
            RowMatrix::from_rows(&[vec![0.0], vec![0.0]], 1).unwrap(),
            ActionKind::Discrete { n_actions: 1 },
        )
        .unwrap();
        let contrast = ContrastSpec::from_fn_discrete("point_mass", 1, |_, _| 1.0).unwrap();
        let kind = ActionKind::Discrete { n_actions: 1 };
        let h = constant_bridge(BridgeKind::Outcome, 0.0, kind.clone());
        let q = constant_bridge(BridgeKind::Action, 1.0, kind.clone());

        let v = eif_variance(&h, &q, 1.0, &data, &contrast).unwrap();
        assert!((v - 1.0).abs() < 1e-15, "scores {{0, 2}} about 1 give 1, got {v}");

        // Identical scores: h ≡ c makes Th the only term when q ≡ 0.
        let hc = constant_bridge(BridgeKind::Outcome, 3.0, kind.clone());
        let q0 = constant_bridge(BridgeKind::Action, 0.0, kind);
        let v0 = eif_variance(&hc, &q0, 3.0, &data, &contrast).unwrap();
        assert_eq!(v0, 0.0);
    }

    #[test]
    fn crossfit_with_fixed_nuisances_matches_plain_dr() {
        let dgp = dgp_unique();
        let data = generate_discrete(&dgp, 503, 77);
        let contrast = dgp.contrast();
        let (h, q) = oracle_fits(&dgp);
        let plain = estimate_dr(&h, &q, &data, &contrast).unwrap();
        let cfg = NuisanceConfig::Fixed { h, q };

        for folds in [2usize, 3, 5] {
            let cf = estimate_dr_crossfit(&data, &contrast, &cfg, folds, 9).unwrap();
            // Every row is scored exactly once with the same bridges, so
            // only summation order differs from the plain estimate.
            assert!(
                (cf.j_hat - plain.j_hat).abs() < 1e-12,
                "folds {folds}: {} vs {}",
                cf.j_hat,
                plain.j_hat
            );
            assert_eq!(cf.folds.len(), folds);
            let scored: usize = cf.folds.iter().map(|f| f.n_score).sum();
            assert_eq!(scored, data.n());
        }
    }

    #[test]
    fn crossfit_is_deterministic_in_the_seed() {
        let dgp = dgp_unique();
        let data = generate_discrete(&dgp, 600, 3);
        let contrast = dgp.contrast();
        let cfg = saturated_nuisance(&dgp);

        let r1 = estimate_dr_crossfit(&data, &contrast, &cfg, 3, 42).unwrap();
        let r2 = estimate_dr_crossfit(&data, &contrast, &cfg, 3, 42).unwrap();
        assert_eq!(r1, r2);

        let r3 = estimate_dr_crossfit(&data, &contrast, &cfg, 3, 43).unwrap();
        assert_ne!(r1.j_hat, r3.j_hat, "a different seed reshuffles the folds");
    }

    #[test]
    fn crossfit_learns_nuisances_well_enough_to_recover_j() {
        let dgp = dgp_unique();
        let j = oracle_discrete_j(&dgp, &dgp.contrast()).unwrap();
        let data = generate_discrete(&dgp, 20_000, 8);
        let contrast = dgp.contrast();
        let cfg = saturated_nuisance(&dgp);
        let report = estimate_dr_crossfit(&data, &contrast, &cfg, 2, 1).unwrap();
        assert!(
            (report.j_hat - j).abs() <= 4.0 * report.se,
            "{} vs {j} (se {})",
            report.j_hat,
            report.se
        );
        assert!(report.folds.iter().all(|f| f.h.is_some() && f.q.is_some()));
    }

    #[test]
    fn crossfit_rejects_bad_fold_configurations() {
        let dgp = dgp_unique();
        let data = generate_discrete(&dgp, 12, 1);
        let contrast = dgp.contrast();
        let cfg = saturated_nuisance(&dgp);

        let err = estimate_dr_crossfit(&data, &contrast, &cfg, 1, 0).unwrap_err();
        assert!(err.to_string().contains("folds >= 2"), "{err}");

        let err = estimate_dr_crossfit(&data, &contrast, &cfg, 13, 0).unwrap_err();
        assert!(err.to_string().contains("cannot fill"), "{err}");

        // Saturated bases over this DGP have dimension 8; two folds on 12
        // rows leave 6-row fit samples, below the basis dimension.
        let err = estimate_dr_crossfit(&data, &contrast, &cfg, 2, 0).unwrap_err();
        assert!(err.to_string().contains("fit sample"), "{err}");
    }

    #[test]
    fn intervals_shrink_as_alpha_grows() {
        let dgp = dgp_unique();
        let data = generate_discrete(&dgp, 500, 21);
        let contrast = dgp.contrast();
        let (h, q) = oracle_fits(&dgp);
        let report = estimate_dr(&h, &q, &data, &contrast).unwrap();
        assert!(report.se > 0.0);

        let narrow = report.clone().with_alpha(0.32).unwrap();
        let wide = report.clone().with_alpha(0.01).unwrap();
        let width = |r: &EstimateReport| r.ci_hi - r.ci_lo;
        assert!(width(&narrow) < width(&report));
        assert!(width(&report) < width(&wide));
        for r in [&narrow, &report, &wide] {
            assert!(r.ci_lo <= r.j_hat && r.j_hat <= r.ci_hi);
            let z = z_quantile(r.alpha).unwrap();
            assert!((width(r) - 2.0 * z * r.se).abs() < 1e-12);
        }
        assert!(report.clone().with_alpha(0.0).is_err());
        assert!(report.with_alpha(1.0).is_err());
    }

    #[test]
    fn reports_and_nuisance_configs_round_trip_through_json() {
        let dgp = dgp_unique();
        let data = generate_discrete(&dgp, 300, 60);
        let contrast = dgp.contrast();
        let cfg = saturated_nuisance(&dgp);
        let report = estimate_dr_crossfit(&data, &contrast, &cfg, 2, 5).unwrap();
        let back = EstimateReport::from_json(&report.to_json().unwrap()).unwrap();
        assert_eq!(report, back);

        let cfg_json = serde_json::to_string(&cfg).unwrap();
        let cfg_back: NuisanceConfig = serde_json::from_str(&cfg_json).unwrap();
        assert_eq!(cfg, cfg_back);

        let (h, q) = oracle_fits(&dgp);
        let fixed = NuisanceConfig::Fixed { h, q };
        let fixed_json = serde_json::to_string(&fixed).unwrap();
        let fixed_back: NuisanceConfig = serde_json::from_str(&fixed_json).unwrap();
        assert_eq!(fixed, fixed_back);
    }

    #[test]
    fn kind_mismatches_are_rejected() {
        let dgp = dgp_unique();
        let data = generate_discrete(&dgp, 50, 4);
        let contrast = dgp.contrast();
        let (h, q) = oracle_fits(&dgp);
        assert!(estimate_ipw(&h, &data, &contrast).is_err());
        assert!(estimate_reg(&q, &data, &contrast).is_err());
        assert!(estimate_dr(&q, &h, &data, &contrast).is_err());
        let fixed = NuisanceConfig::Fixed { h: q.clone(), q: h.clone() };
        assert!(fixed.fit(&data, &contrast).is_err());
    }
}
