//! Synthetic data-generating processes with exact oracles.
//!
//! Two DGP families: fully tabulated finite-support laws ([`discrete`]) and
//! a linear structural equation model with a latent confounder and uniform
//! action density ([`linear`]). Both expose closed-form bridge functions
//! and the true J, so every estimator in this crate can be tested against
//! ground truth rather than against itself. [`bundled`] pins the named
//! instances the test suites and the CLI refer to.
//!
//! Generators are pure functions of (dgp, n, seed); replication harnesses
//! derive per-replication seeds with [`crate::rng::derive_seed`] so streams
//! never overlap.

pub mod bundled;
pub mod discrete;
pub mod linear;

pub use discrete::{
    completeness_rank_check, generate_discrete, generate_discrete_with_latent_u,
    oracle_discrete_bridge_sets, oracle_discrete_j, oracle_residual_h, oracle_residual_q,
    p_w_given_z_matrix, random_dgp, saturated_bridge_fit, CompletenessReport, DiscreteBridgeSets,
    DiscreteDgp, ORACLE_RCOND,
};
pub use linear::{
    generate_linear_sem, oracle_linear_sem_bridges, oracle_linear_sem_j, uniform_density_contrast,
    AffineBridge, LinearSemDgp,
};
