//! Named DGP instances shared by the test suites and the CLI.
//!
//! Each instance pins one structural regime: unique bridges, nonunique
//! bridges, identity proxies, or an unconfounded action with a constant
//! pi q0 product. Tables are hand-written so their rank structure is by
//! design rather than by accident.

use crate::error::{Error, Result};
use crate::synthetic::discrete::DiscreteDgp;
use crate::synthetic::linear::LinearSemDgp;

/// Square invertible proxy tables, strong confounding, treatment-effect
/// contrast (weights -1, +1). Both bridges exist and are unique; the
/// workhorse for rate and coverage studies.
pub fn dgp_unique() -> DiscreteDgp {
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
    .expect("hand-built tables are valid")
}

/// Three proxy levels over two confounder levels on both sides: every
/// bridge equation has a one-dimensional null space per cell, so bridge
/// functions exist but are nonunique. Contrast is a proper policy density.
pub fn dgp_nonunique() -> DiscreteDgp {
    DiscreteDgp::new(
        vec![1.0],
        vec![vec![0.55, 0.45]],
        vec![vec![vec![0.65, 0.35], vec![0.25, 0.75]]],
        vec![vec![vec![0.6, 0.3, 0.1], vec![0.15, 0.35, 0.5]]],
        vec![vec![
            vec![vec![0.55, 0.3, 0.15], vec![0.6, 0.25, 0.15]],
            vec![vec![0.2, 0.3, 0.5], vec![0.15, 0.3, 0.55]],
        ]],
        vec![vec![vec![0.3, 1.5], vec![-0.8, 0.6]]],
        0.5,
        vec![vec![0.4, 0.6]],
    )
    .expect("hand-built tables are valid")
}

/// Action independent of U given X and contrast equal to the action law,
/// so pi(a) q0(z, a) is identically 1: the one-dimensional constant critic
/// is then exactly the critic the identification argument needs, while
/// leaving the outcome bridge itself badly underdetermined. Y still loads
/// on U, so the outcome mean spread is wide.
pub fn dgp_unconfounded_action() -> DiscreteDgp {
    DiscreteDgp::new(
        vec![1.0],
        vec![vec![0.5, 0.5]],
        vec![vec![vec![0.5, 0.5], vec![0.5, 0.5]]],
        vec![vec![vec![0.9, 0.1], vec![0.2, 0.8]]],
        vec![vec![
            vec![vec![0.85, 0.15], vec![0.85, 0.15]],
            vec![vec![0.25, 0.75], vec![0.25, 0.75]],
        ]],
        vec![vec![vec![0.0, 2.0], vec![1.0, 3.5]]],
        0.4,
        vec![vec![0.5, 0.5]],
    )
    .expect("hand-built tables are valid")
}

/// Identity proxy tables: W and Z copy U exactly. The outcome bridge is
/// the latent outcome mean itself; useful as the most transparent sanity
/// instance.
pub fn dgp_identity_proxies() -> DiscreteDgp {
    DiscreteDgp::new(
        vec![1.0],
        vec![vec![0.5, 0.5]],
        vec![vec![vec![0.6, 0.4], vec![0.35, 0.65]]],
        vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]],
        vec![vec![
            vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            vec![vec![0.0, 1.0], vec![0.0, 1.0]],
        ]],
        vec![vec![vec![0.0, 1.0], vec![0.5, 2.0]]],
        0.3,
        vec![vec![-1.0, 1.0]],
    )
    .expect("hand-built tables are valid")
}

/// Scalar confounder, two proxies on each side, one covariate, moderate
/// noise: the default linear SEM instance.
pub fn sem_default() -> LinearSemDgp {
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
    .expect("hand-built coefficients are valid")
}

/// All bundled discrete instances with their registry names.
pub fn bundled_discrete() -> Vec<(&'static str, DiscreteDgp)> {
    vec![
        ("unique", dgp_unique()),
        ("nonunique", dgp_nonunique()),
        ("unconfounded_action", dgp_unconfounded_action()),
        ("identity_proxies", dgp_identity_proxies()),
    ]
}

/// Looks up a bundled discrete DGP by registry name.
pub fn discrete_by_name(name: &str) -> Result<DiscreteDgp> {
    bundled_discrete()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, d)| d)
        .ok_or_else(|| {
            let names: Vec<&str> = bundled_discrete().iter().map(|(n, _)| *n).collect();
            Error::validation(format!("unknown DGP {name:?}; bundled: {names:?}"))
        })
}
