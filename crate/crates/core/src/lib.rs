//! Analytic permutation testing.
//!
//! A permutation test computes the proportion of label rearrangements whose
//! test statistic meets or exceeds the observed one. Simulating that
//! distribution is expensive for operator-valued data, where every draw costs
//! a singular value decomposition. This crate instead bounds the permutation
//! tail probability analytically with Kahane–Khintchine-type sub-Gaussian
//! concentration inequalities, then restores statistical power by mapping the
//! conservative bound through a fitted Beta distribution.
//!
//! The pieces:
//!
//! - [`specfun`]: log-gamma and the regularized incomplete beta function,
//!   the machinery behind the beta calibration layer.
//! - [`linalg`]: symmetric eigendecompositions, Schatten and discretized
//!   `L^q` norms, empirical covariance operators, and the Procrustes
//!   covariance interpolation path used to generate planted alternatives.
//! - [`bounds`]: the test statistics (univariate, Banach-space sum,
//!   synchronized k-sample) and their sub-Gaussian tail bounds.
//! - [`betacal`]: the closed-form beta adjustment for univariate tests and
//!   the empirical beta transform for everything else.
//! - [`mc_oracle`]: seeded Monte-Carlo and exhaustive permutation p-values,
//!   the ground truth the analytic bounds are validated against.
//! - [`designs`]: k-sample, Latin-square stepdown, and complete randomized
//!   block analyses with multiple-testing corrections.
//! - [`ingest`]: curve/operator file formats and synthetic data generation.
//! - [`scenarios`]: replication studies and the analytic-vs-simulation
//!   benchmark harness.

pub mod betacal;
pub mod bounds;
pub mod designs;
pub mod error;
pub mod ingest;
pub mod linalg;
pub mod mc_oracle;
pub mod scenarios;
pub mod specfun;
pub mod stats;

pub use error::{Error, Result};
