//! Structural stage: mediator model, g-estimation weights, error-corrected
//! moment matrices and the ridge-stabilized estimate of
//! `θ = (θ_r, θ_m, θ_x1..θ_xK)`.
//!
//! Both estimators consume a [`FactorScorePanel`] as given; callers that
//! start from raw scores center them first (see [`FactorScorePanel::centered`]).

mod mediator;
mod moments;

pub use mediator::{fit_mediator, MediatorEstimate, MEDIATOR_MAX_CONDITION};
pub use moments::{
    largest_relative_eigenvalue, mediator_weight, modified_moments, score_error_correction,
    shrink_factor, treatment_weight, weighted_moments, ModifiedMoments, MomentPair,
};

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::measurement::FactorScorePanel;
use moments::{corrected_cross_moments, Term};

/// `M̌ + vI` with a condition number above this is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;
/// Sine of the angle between `w_m` and `w_r` below which the mediator
/// weight carries no information beyond the treatment weight.
pub const COLLINEARITY_TOL: f64 = 1e-6;
/// Interaction Wald statistic per degree of freedom below which the
/// estimate is flagged as weakly identified.
pub const WEAK_INTERACTION_F: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "g-estimation")]
    GEstimation,
    #[serde(rename = "corrected-regression")]
    CorrectedRegression,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::GEstimation, Method::CorrectedRegression];

    pub fn label(self) -> &'static str {
        match self {
            Method::GEstimation => "g-estimation",
            Method::CorrectedRegression => "corrected-regression",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructuralOptions {
    /// Shrinkage tuning constant, in `[0, 6]`.
    pub tau: f64,
    /// Ridge term added to the diagonal of `M̌`.
    pub ridge: f64,
}

impl Default for StructuralOptions {
    fn default() -> Self {
        StructuralOptions {
            tau: 5.0,
            ridge: 1e-4,
        }
    }
}

impl StructuralOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=6.0).contains(&self.tau) {
            return Err(Error::InvalidArgument(format!(
                "tau = {} outside [0, 6]",
                self.tau
            )));
        }
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "ridge = {} must be finite and non-negative",
                self.ridge
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    /// Condition number of `M̌ + vI`.
    pub condition_number: f64,
    /// Sine of the angle between `w_m` and `w_r` (g-estimation only).
    pub collinearity_sin: Option<f64>,
    /// Interaction Wald statistic per degree of freedom from the mediator
    /// model (g-estimation only).
    pub interaction_f: Option<f64>,
    /// Treatment–covariate interactions too weak to separate `w_m` from
    /// `w_r` reliably.
    pub weak_interaction: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuralEstimate {
    pub method: Method,
    /// `(θ_r, θ_m, θ_x1..θ_xK)`.
    pub theta: DVector<f64>,
    pub correction_eigenvalue: f64,
    pub shrink_factor: f64,
    pub ridge: f64,
    pub tau: f64,
    pub mediator: Option<MediatorEstimate>,
    pub diagnostics: Diagnostics,
}

impl StructuralEstimate {
    pub fn theta_r(&self) -> f64 {
        self.theta[0]
    }

    pub fn theta_m(&self) -> f64 {
        self.theta[1]
    }

    pub fn parameter_names(&self) -> Vec<String> {
        parameter_names(self.theta.len() - 2)
    }
}

pub fn parameter_names(n_covariates: usize) -> Vec<String> {
    let mut names = vec!["theta_r".to_owned(), "theta_m".to_owned()];
    names.extend((1..=n_covariates).map(|j| format!("theta_x{j}")));
    names
}

/// `θ̌ = (M̌ + vI)⁻¹ m̌`, with the condition number of the regularized matrix.
pub fn solve_regularized(mm: &ModifiedMoments, ridge: f64) -> Result<(DVector<f64>, f64)> {
    let q = mm.matrix.nrows();
    let mut m = mm.matrix.clone();
    for i in 0..q {
        m[(i, i)] += ridge;
    }
    let cond = linalg::condition_number(&m);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::Singular(format!(
            "regularized moment matrix has condition number {cond:.3e} (limit {MAX_CONDITION:.0e})"
        )));
    }
    let theta = m
        .lu()
        .solve(&mm.vector)
        .ok_or_else(|| Error::Singular("regularized moment matrix could not be solved".into()))?;
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite structural estimate".into()));
    }
    Ok((theta, cond))
}

/// Final g-estimation step: solves the regularized system and runs the
/// identification checks on the weights that produced it.
pub fn g_estimate(
    mm: &ModifiedMoments,
    ridge: f64,
    w_r: &DVector<f64>,
    w_m: &DVector<f64>,
) -> Result<(DVector<f64>, Diagnostics)> {
    let sin = linalg::sin_angle(w_m, w_r);
    if sin < COLLINEARITY_TOL {
        return Err(Error::RankDeficient {
            detail: format!("sin(angle(w_m, w_r)) = {sin:.2e}"),
        });
    }
    let (theta, cond) = solve_regularized(mm, ridge).map_err(|e| match e {
        Error::Singular(detail) => Error::RankDeficient { detail },
        other => other,
    })?;
    Ok((
        theta,
        Diagnostics {
            condition_number: cond,
            collinearity_sin: Some(sin),
            interaction_f: None,
            weak_interaction: false,
        },
    ))
}

/// Full g-estimation pipeline on a score panel.
pub fn g_estimation(
    panel: &FactorScorePanel,
    score_error_cov: &DMatrix<f64>,
    interactions: &[usize],
    opts: &StructuralOptions,
) -> Result<StructuralEstimate> {
    opts.validate()?;
    let w_r = treatment_weight(&panel.treatment)?;
    let gamma = fit_mediator(panel, score_error_cov, interactions)?;
    let w_m = mediator_weight(&gamma, panel, &w_r)?;
    let a0 = weighted_moments(panel, &w_r, &w_m)?;
    let a1 = score_error_correction(&gamma, score_error_cov, &w_r)?;
    let y = panel.n_factors() - 1;
    let pair = MomentPair::from_terms(
        &a0,
        &a1,
        panel.outcome().norm_squared() / panel.nrows() as f64,
        score_error_cov[(y, y)],
    )?;
    let mm = modified_moments(&pair, opts.tau, panel.nrows())?;
    let (theta, mut diagnostics) = g_estimate(&mm, opts.ridge, &w_r, &w_m)?;
    diagnostics.interaction_f = gamma.interaction_f;
    diagnostics.weak_interaction = gamma
        .interaction_f
        .map_or(true, |f| !(f >= WEAK_INTERACTION_F));
    Ok(StructuralEstimate {
        method: Method::GEstimation,
        theta,
        correction_eigenvalue: mm.correction_eigenvalue,
        shrink_factor: mm.shrink_factor,
        ridge: opts.ridge,
        tau: opts.tau,
        mediator: Some(gamma),
        diagnostics,
    })
}

/// Moments for the regression baseline: weights equal the predictors
/// `(r, η̂_m, η̂_x')`, every latent–latent product corrected by `Σ_ee`.
pub fn regression_moments(
    panel: &FactorScorePanel,
    score_error_cov: &DMatrix<f64>,
) -> Result<MomentPair> {
    let k = panel.n_factors();
    let mut cols = vec![Term::treatment()];
    cols.extend((0..k).map(Term::factor));
    let rows = &cols[..k];
    let (raw, corr) = corrected_cross_moments(panel, score_error_cov, rows, &cols)?;
    MomentPair::from_terms(
        &raw,
        &corr,
        panel.outcome().norm_squared() / panel.nrows() as f64,
        score_error_cov[(k - 1, k - 1)],
    )
}

/// Error-corrected least squares of `η̂_y` on `(r, η̂_m, η̂_x)`, stabilized
/// exactly like the g-estimator. Consistent only without unmeasured
/// mediator–outcome confounding.
pub fn corrected_regression(
    panel: &FactorScorePanel,
    score_error_cov: &DMatrix<f64>,
    opts: &StructuralOptions,
) -> Result<StructuralEstimate> {
    opts.validate()?;
    mediator::check_two_levels(&panel.treatment)?;
    let pair = regression_moments(panel, score_error_cov)?;
    let mm = modified_moments(&pair, opts.tau, panel.nrows())?;
    let (theta, cond) = solve_regularized(&mm, opts.ridge)?;
    Ok(StructuralEstimate {
        method: Method::CorrectedRegression,
        theta,
        correction_eigenvalue: mm.correction_eigenvalue,
        shrink_factor: mm.shrink_factor,
        ridge: opts.ridge,
        tau: opts.tau,
        mediator: None,
        diagnostics: Diagnostics {
            condition_number: cond,
            collinearity_sin: None,
            interaction_f: None,
            weak_interaction: false,
        },
    })
}
