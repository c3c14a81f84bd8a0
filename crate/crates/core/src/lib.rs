//! Identification-robust Anderson-Rubin and score tests for moment condition
//! models with many moments.
//!
//! The AR statistic of the continuous-updating objective is recentred by k and
//! rescaled by a leverage-based variance so that the test keeps its size when
//! the number of moments grows with the sample. Moment conditions only need to
//! be invariant to independent sign flips of the observations (or clusters).

pub mod ar;
pub mod cluster;
pub mod confidence;
pub mod dist;
pub mod error;
pub mod iv;
pub mod linalg;
pub mod moments;
pub mod rademacher;
pub mod sim;

pub use ar::{
    ar_statistic, build_projector, corollary1_threshold, fixed_k_ar_test, mi_ar_critical,
    mi_ar_p_value, mi_ar_test, sigma_n_sq, Method, MomentSet, Projector, TestResult,
};
pub use cluster::{cluster_aggregate, cluster_fixed_k_ar_test, cluster_mi_ar_test, ClusterMap};
pub use confidence::{invert_profiled, invert_test, profile_minimize, ConfidenceSet, GridSpec};
pub use error::{Error, Result};
pub use iv::{partial_out_controls, LinearIVModel};
pub use iv::run_methods;
pub use moments::{PanelData, Psi, QuantileSpec};

pub use sim::{run_rejection_rates, SimConfig, SimResult, DEFAULT_SEED};

pub use nalgebra::{DMatrix, DVector};
