//! Synthetic data from the two-covariate structural model with a latent
//! confounder, three unit-loading indicators per latent variable.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::spec::{CovariateRef, FactorSpec, ModelSpec, Role};

pub const INDICATORS_PER_FACTOR: usize = 3;
pub const TREATMENT_COLUMN: &str = "r";
/// Latent variables with indicators, in model factor order.
pub const FACTOR_NAMES: [&str; 4] = ["m", "x1", "x2", "y"];
pub const TRUE_SCORE_COLUMNS: [&str; 5] = ["eta_m", "eta_x1", "eta_x2", "eta_y", "u"];

/// What to do when the fixed coefficients already explain more than unit
/// variance of a latent outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExcessVariance {
    #[default]
    Reject,
    /// Use a zero residual; the latent variance then exceeds one.
    ZeroResidual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyCondition {
    pub n: usize,
    pub delta_u: f64,
    pub delta_ur: f64,
    pub kappa: f64,
    pub theta_m: f64,
    /// Common value of both treatment-covariate interactions in the
    /// mediator equation.
    pub gamma_xr: f64,
    pub rho: f64,
    pub theta_r: f64,
    pub theta_x: [f64; 2],
    pub gamma_r: f64,
    pub gamma_x: [f64; 2],
    pub excess_variance: ExcessVariance,
    pub seed: u64,
}

impl StudyCondition {
    pub fn new(
        n: usize,
        delta_u: f64,
        delta_ur: f64,
        kappa: f64,
        theta_m: f64,
        gamma_xr: f64,
    ) -> Self {
        StudyCondition {
            n,
            delta_u,
            delta_ur,
            kappa,
            theta_m,
            gamma_xr,
            rho: 0.2,
            theta_r: 0.125,
            theta_x: [0.226, 0.226],
            gamma_r: 0.3,
            gamma_x: [0.3, 0.3],
            excess_variance: ExcessVariance::Reject,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_excess_variance(mut self, policy: ExcessVariance) -> Self {
        self.excess_variance = policy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("N must be at least 1".into()));
        }
        if !(self.kappa > 0.1 && self.kappa < 0.9) {
            return Err(Error::InvalidArgument(format!(
                "kappa = {} must lie in (0.1, 0.9) so that item reliabilities stay in (0, 1)",
                self.kappa
            )));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "covariate correlation {} outside (-1, 1)",
                self.rho
            )));
        }
        let coefficients = [
            self.delta_u,
            self.delta_ur,
            self.theta_m,
            self.gamma_xr,
            self.theta_r,
            self.gamma_r,
            self.theta_x[0],
            self.theta_x[1],
            self.gamma_x[0],
            self.gamma_x[1],
        ];
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite coefficient".into()));
        }
        Ok(())
    }

    fn quad_x(&self, a: [f64; 2], b: [f64; 2]) -> f64 {
        a[0] * b[0] + a[1] * b[1] + self.rho * (a[0] * b[1] + a[1] * b[0])
    }

    /// Variance of the mediator equation without its residual.
    pub fn mediator_explained_variance(&self) -> f64 {
        let g = self.gamma_x;
        let gi = [self.gamma_xr, self.gamma_xr];
        // r² = 1, so Var(r·η_x) = Var(η_x) and r·η_x is uncorrelated with r and η_x.
        self.gamma_r.powi(2) + self.quad_x(g, g) + self.quad_x(gi, gi) + self.delta_u.powi(2)
    }

    /// Variance of the outcome equation without its residual, taking the
    /// mediator at unit variance.
    pub fn outcome_explained_variance(&self, var_m: f64) -> f64 {
        let t = self.theta_x;
        let cov_m_r = self.gamma_r;
        let cov_m_x = [
            self.gamma_x[0] + self.rho * self.gamma_x[1],
            self.gamma_x[1] + self.rho * self.gamma_x[0],
        ];
        let cov_m_u = self.delta_u;
        self.theta_r.powi(2)
            + self.theta_m.powi(2) * var_m
            + self.quad_x(t, t)
            + self.delta_u.powi(2)
            + self.delta_ur.powi(2)
            + 2.0 * self.theta_r * self.theta_m * cov_m_r
            + 2.0 * self.theta_m * (t[0] * cov_m_x[0] + t[1] * cov_m_x[1])
            + 2.0 * self.theta_m * self.delta_u * cov_m_u
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualVariances {
    pub mediator: f64,
    pub outcome: f64,
}

/// Residual variances giving the mediator and the outcome unit variance.
pub fn solve_residual_variances(cond: &StudyCondition) -> Result<ResidualVariances> {
    cond.validate()?;
    let resolve = |explained: f64, what: &str| -> Result<f64> {
        let v = 1.0 - explained;
        if v >= 0.0 {
            Ok(v)
        } else if cond.excess_variance == ExcessVariance::ZeroResidual {
            Ok(0.0)
        } else {
            Err(Error::InvalidArgument(format!(
                "{what} equation explains variance {explained:.4} > 1; no residual variance gives unit variance"
            )))
        }
    };
    let mediator = resolve(cond.mediator_explained_variance(), "mediator")?;
    let var_m = cond.mediator_explained_variance() + mediator;
    let outcome = resolve(cond.outcome_explained_variance(var_m), "outcome")?;
    Ok(ResidualVariances { mediator, outcome })
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    /// Indicator columns in factor order followed by the treatment column.
    pub data: Dataset,
    /// `N × 5`: `η_m, η_x1, η_x2, η_y, u`.
    pub true_scores: DMatrix<f64>,
    pub treatment: DVector<f64>,
    /// Item reliabilities, one per indicator column.
    pub reliabilities: Vec<f64>,
    pub intercepts: Vec<f64>,
    pub residual_variances: ResidualVariances,
}

impl GeneratedDataset {
    pub fn true_scores_dataset(&self) -> Dataset {
        Dataset::new(
            TRUE_SCORE_COLUMNS.iter().map(|s| s.to_string()).collect(),
            self.true_scores.clone(),
        )
        .expect("fixed distinct column names")
    }

    pub fn write(
        &self,
        data_path: impl AsRef<Path>,
        true_scores_path: Option<&Path>,
    ) -> Result<()> {
        self.data.write_csv_path(data_path)?;
        if let Some(path) = true_scores_path {
            self.true_scores_dataset().write_csv_path(path)?;
        }
        Ok(())
    }
}

pub fn indicator_names() -> Vec<String> {
    FACTOR_NAMES
        .iter()
        .flat_map(|f| (1..=INDICATORS_PER_FACTOR).map(move |i| indicator_name(f, i)))
        .collect()
}

fn indicator_name(factor: &str, i: usize) -> String {
    if factor.len() == 1 {
        format!("{factor}{i}")
    } else {
        format!("{factor}_{i}")
    }
}

/// Model specification matching the generated files: first indicator of each
/// factor is the reference, both covariates interact with treatment.
pub fn default_model_spec() -> ModelSpec {
    let roles = [
        Role::Mediator,
        Role::Covariate,
        Role::Covariate,
        Role::Outcome,
    ];
    let factors = FACTOR_NAMES
        .iter()
        .zip(roles)
        .map(|(name, role)| FactorSpec {
            name: name.to_string(),
            role,
            indicators: (1..=INDICATORS_PER_FACTOR)
                .map(|i| indicator_name(name, i))
                .collect(),
            reference: indicator_name(name, 1),
        })
        .collect();
    ModelSpec::new(
        factors,
        TREATMENT_COLUMN,
        vec![CovariateRef::Index(0), CovariateRef::Index(1)],
    )
    .expect("built-in specification is valid")
}

pub fn generate(cond: &StudyCondition) -> Result<GeneratedDataset> {
    let resid = solve_residual_variances(cond)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cond.seed);
    let n_ind = FACTOR_NAMES.len() * INDICATORS_PER_FACTOR;

    // Item parameters first so that they depend on the seed only.
    let reliabilities: Vec<f64> = (0..n_ind)
        .map(|_| rng.gen_range(cond.kappa - 0.1..cond.kappa + 0.1))
        .collect();
    let intercepts: Vec<f64> = (0..n_ind).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let error_sd: Vec<f64> = reliabilities
        .iter()
        .map(|k| (1.0 / k - 1.0).sqrt())
        .collect();

    let n = cond.n;
    let sd_zeta_m = resid.mediator.sqrt();
    let sd_zeta_y = resid.outcome.sqrt();
    let rho_c = (1.0 - cond.rho * cond.rho).sqrt();
    let mut truth = DMatrix::zeros(n, TRUE_SCORE_COLUMNS.len());
    let mut treatment = DVector::zeros(n);
    let mut values = DMatrix::zeros(n, n_ind + 1);
    for i in 0..n {
        let r = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let x1 = z1;
        let x2 = cond.rho * z1 + rho_c * z2;
        let u: f64 = rng.sample(StandardNormal);
        let zeta_m: f64 = rng.sample(StandardNormal);
        let zeta_y: f64 = rng.sample(StandardNormal);
        let m = cond.gamma_r * r
            + cond.gamma_x[0] * x1
            + cond.gamma_x[1] * x2
            + cond.gamma_xr * r * x1
            + cond.gamma_xr * r * x2
            + cond.delta_u * u
            + sd_zeta_m * zeta_m;
        let y = cond.theta_r * r
            + cond.theta_m * m
            + cond.theta_x[0] * x1
            + cond.theta_x[1] * x2
            + cond.delta_u * u
            + cond.delta_ur * u * r
            + sd_zeta_y * zeta_y;
        let latent = [m, x1, x2, y];
        for (c, v) in latent.iter().chain(std::iter::once(&u)).enumerate() {
            truth[(i, c)] = *v;
        }
        treatment[i] = r;
        for j in 0..n_ind {
            let eps: f64 = rng.sample(StandardNormal);
            values[(i, j)] = intercepts[j] + latent[j / INDICATORS_PER_FACTOR] + error_sd[j] * eps;
        }
        values[(i, n_ind)] = r;
    }

    let mut columns = indicator_names();
    columns.push(TREATMENT_COLUMN.to_owned());
    Ok(GeneratedDataset {
        data: Dataset::new(columns, values)?,
        true_scores: truth,
        treatment,
        reliabilities,
        intercepts,
        residual_variances: resid,
    })
}

/// Seed for replication `rep` derived from a master seed; independent of any
/// condition parameter so that cells share their base randomness.
pub fn replication_seed(master: u64, rep: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(rep);
    rng.next_u64()
}

pub fn study1_grid() -> Vec<StudyCondition> {
    let mut grid = Vec::with_capacity(80);
    for delta_u in [0.0, 0.2, 0.4, 0.6] {
        for delta_ur in [0.0, 0.3, 0.6, 0.9] {
            for n in [100, 250, 500, 750, 1000] {
                grid.push(
                    StudyCondition::new(n, delta_u, delta_ur, 0.75, 0.0, 0.204)
                        .with_excess_variance(ExcessVariance::ZeroResidual),
                );
            }
        }
    }
    grid
}

pub fn study2_grid() -> Vec<StudyCondition> {
    let mut grid = Vec::with_capacity(128);
    for theta_m in [0.29, 0.41] {
        for kappa in [0.4, 0.5, 0.667, 0.8] {
            for gamma_xr in [0.102, 0.145, 0.176, 0.204] {
                for n in [250, 500, 750, 1000] {
                    grid.push(
                        StudyCondition::new(n, 0.4, 0.0, kappa, theta_m, gamma_xr)
                            .with_excess_variance(ExcessVariance::ZeroResidual),
                    );
                }
            }
        }
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;

    fn baseline() -> StudyCondition {
        StudyCondition::new(1000, 0.4, 0.0, 0.75, 0.0, 0.0)
    }

    #[test]
    fn zero_slopes_give_unit_residual() {
        let mut c = StudyCondition::new(10, 0.0, 0.0, 0.5, 0.0, 0.0);
        c.theta_r = 0.0;
        c.theta_x = [0.0, 0.0];
        c.gamma_r = 0.0;
        c.gamma_x = [0.0, 0.0];
        let v = solve_residual_variances(&c).unwrap();
        assert_eq!(v.mediator, 1.0);
        assert_eq!(v.outcome, 1.0);
    }

    #[test]
    fn baseline_mediator_residual_variance() {
        let v = solve_residual_variances(&baseline()).unwrap();
        assert!((v.mediator - 0.534).abs() < 1e-12);
    }

    #[test]
    fn excess_variance_rejected_or_zeroed() {
        let c = StudyCondition::new(100, 0.6, 0.9, 0.75, 0.0, 0.204);
        assert!(solve_residual_variances(&c).is_err());
        let c = c.with_excess_variance(ExcessVariance::ZeroResidual);
        assert_eq!(solve_residual_variances(&c).unwrap().outcome, 0.0);
    }

    #[test]
    fn kappa_bounds() {
        let c = StudyCondition::new(100, 0.0, 0.0, 0.05, 0.0, 0.204);
        assert!(generate(&c).is_err());
        let c = StudyCondition::new(0, 0.0, 0.0, 0.5, 0.0, 0.204);
        assert!(generate(&c).is_err());
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let c = StudyCondition::new(50, 0.4, 0.3, 0.75, 0.2, 0.204).with_seed(7);
        let a = generate(&c).unwrap();
        let b = generate(&c).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.true_scores, b.true_scores);
        let other = generate(&c.clone().with_seed(8)).unwrap();
        assert_ne!(a.data, other.data);
    }

    #[test]
    fn layout_matches_default_spec() {
        let c = StudyCondition::new(20, 0.0, 0.0, 0.75, 0.0, 0.204).with_seed(1);
        let g = generate(&c).unwrap();
        assert_eq!(g.data.nrows(), 20);
        assert_eq!(g.data.columns().len(), 13);
        let spec = default_model_spec();
        for name in spec.indicators() {
            assert!(g.data.column_index(name).is_some(), "{name}");
        }
        assert!(g.treatment.iter().all(|&r| r == 1.0 || r == -1.0));
        for (k, &rel) in g.reliabilities.iter().enumerate() {
            assert!((0.65..0.85).contains(&rel), "item {k}: {rel}");
        }
        assert!(g.intercepts.iter().all(|a| (-1.0..1.0).contains(a)));
    }

    #[test]
    fn grid_sizes() {
        assert_eq!(study1_grid().len(), 80);
        assert!(study1_grid().iter().all(|c| c.theta_m == 0.0));
        assert_eq!(study2_grid().len(), 128);
        assert_eq!(study1_grid().iter().filter(|c| c.n == 100).count(), 16);
    }

    #[test]
    fn replication_seeds_differ() {
        let seeds: std::collections::HashSet<u64> =
            (0..100).map(|r| replication_seed(42, r)).collect();
        assert_eq!(seeds.len(), 100);
        assert_eq!(replication_seed(42, 3), replication_seed(42, 3));
    }
}
