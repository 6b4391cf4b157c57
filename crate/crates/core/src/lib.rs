//! Latent-variable mediation analysis that stays consistent under
//! unmeasured mediator–outcome confounding.
//!
//! The estimator runs in two stages. A confirmatory factor model is fitted
//! to the indicators and turned into per-subject factor scores together with
//! the covariance of their estimation error ([`measurement`]). The
//! structural parameters are then obtained by g-estimation: the treatment
//! and a mediator weight built from treatment–covariate interactions act as
//! instruments, and the moment matrices are corrected for factor-score error
//! and regularized ([`structural`]). Bootstrap inference, a synthetic data
//! generator and a Monte Carlo harness complete the crate.

pub mod data;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod mc;
pub mod measurement;
pub mod optim;
pub mod pipeline;
pub mod simgen;
pub mod spec;
pub mod structural;

pub use data::Dataset;
pub use error::{Error, ErrorCategory, Result};
pub use spec::{CovariateRef, FactorSpec, ModelSpec, Role};
