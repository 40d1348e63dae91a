//! Proximal bridge-function estimation for generalized average causal
//! effects under unmeasured confounding.
//!
//! The estimand is J = E[∫ Y(a) π(a|X) dμ(a)] for a user-supplied
//! contrast π; binary treatment effects and policy values are special
//! cases. With negative-control proxies (action proxies Z, outcome
//! proxies W) the estimand is reachable through two bridge functions:
//! an outcome bridge h₀(W, A, X) with E[Y − h₀ | Z, A, X] = 0 and an
//! action bridge q₀(Z, A, X) with E[π q₀ | W, A, X] acting as the
//! contrast's formal importance weight. Neither function is a
//! regression or a propensity; both are solutions of conditional
//! moment restrictions, estimated here by minimax games against sieve
//! or kernel critic classes, all with closed-form inner players.
//!
//! Layout:
//! * [`model`]: observation tables, contrasts, fitted-bridge values;
//! * [`sieve`] / [`rkhs`]: the two critic families and their fits;
//! * [`synthetic`]: data generators with enumerable ground truth;
//! * [`gace`]: plug-in and cross-fit estimators with EIF intervals;
//! * [`diagnostics`]: replication studies, rate and coverage checks,
//!   ill-posedness measures.

/// Library version, embedded in reports and manifests for audit trails.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod diagnostics;
pub mod error;
pub mod gace;
pub mod linalg;
pub mod model;
pub mod rkhs;
pub mod rng;
pub mod sieve;
pub mod synthetic;

pub use diagnostics::{
    check_identification_identities, ill_posedness_discrete, ill_posedness_random_search,
    projected_mse_curve, run_coverage_study, run_rate_study, run_replication_study,
    CoverageReport, EstimatorSpec, IdentityReport, MseCurve, RateReport, ReplicationStudy,
    StudyResult, TauKind, TauValue,
};
pub use error::{Error, Result};
pub use gace::{EstimateReport, FoldDiagnostics, GamePlan, HypothesisSpec, NuisanceConfig};
pub use model::{
    ActionKind, AnchorSet, BridgeFit, BridgeKind, ClassDescriptor, ContrastSpec, FitDiagnostics,
    Integration, ObservationTable, RowMatrix, Strategy,
};
