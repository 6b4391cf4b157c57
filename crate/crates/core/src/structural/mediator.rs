//! Mediator model fitted by error-corrected method of moments.

use nalgebra::{DMatrix, DVector};

use super::moments::{corrected_cross_moments, Term};
use crate::error::{Error, Result};
use crate::linalg;
use crate::measurement::FactorScorePanel;

/// Mediator design moments with a condition number above this are rejected.
pub const MEDIATOR_MAX_CONDITION: f64 = 1e10;

/// Coefficients `(γ_r, γ_x1..γ_xK, γ_x{j}r for each interaction j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MediatorEstimate {
    pub gamma: DVector<f64>,
    pub n_covariates: usize,
    /// Covariate indices carrying a treatment interaction, aligned with the
    /// trailing entries of `gamma`.
    pub interactions: Vec<usize>,
    /// Joint Wald statistic per degree of freedom for the interaction
    /// coefficients (heteroskedasticity-robust); `None` without interactions.
    pub interaction_f: Option<f64>,
    pub condition_number: f64,
}

impl MediatorEstimate {
    pub fn gamma_r(&self) -> f64 {
        self.gamma[0]
    }

    pub fn gamma_x(&self, j: usize) -> f64 {
        self.gamma[1 + j]
    }

    /// `(covariate index, γ_xr)` pairs.
    pub fn interaction_coefficients(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        let offset = 1 + self.n_covariates;
        self.interactions
            .iter()
            .enumerate()
            .map(move |(i, &j)| (j, self.gamma[offset + i]))
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["gamma_r".to_owned()];
        names.extend((1..=self.n_covariates).map(|j| format!("gamma_x{j}")));
        names.extend(
            self.interactions
                .iter()
                .map(|j| format!("gamma_x{}r", j + 1)),
        );
        names
    }
}

pub(crate) fn mediator_terms(n_covariates: usize, interactions: &[usize]) -> Vec<Term> {
    let mut terms = vec![Term::treatment()];
    terms.extend((0..n_covariates).map(|j| Term::factor(1 + j)));
    terms.extend(interactions.iter().map(|&j| Term::treated_factor(1 + j)));
    terms
}

/// Distinct treatment values must be exactly two.
pub(crate) fn check_two_levels(treatment: &DVector<f64>) -> Result<()> {
    let first = treatment
        .iter()
        .copied()
        .next()
        .ok_or_else(|| Error::Data("empty treatment vector".into()))?;
    let other = treatment.iter().copied().find(|&v| v != first);
    match other {
        None => Err(Error::Data(
            "treatment is constant; effects are not identified".into(),
        )),
        Some(second) => {
            if let Some(third) = treatment.iter().find(|&&v| v != first && v != second) {
                Err(Error::Data(format!(
                    "treatment must take two levels, found at least {first}, {second}, {third}"
                )))
            } else {
                Ok(())
            }
        }
    }
}

/// Fits `η_m = ξ_m'γ + ζ_m` with `ξ_m = (r, η_x', r·η_x[interactions]')`,
/// subtracting the factor-score error moments from every product of two
/// latent scores before solving the normal equations.
pub fn fit_mediator(
    panel: &FactorScorePanel,
    score_error_cov: &DMatrix<f64>,
    interactions: &[usize],
) -> Result<MediatorEstimate> {
    let k_cov = panel.n_covariates();
    if let Some(&bad) = interactions.iter().find(|&&j| j >= k_cov) {
        return Err(Error::Dimension(format!(
            "interaction index {bad} but only {k_cov} covariates"
        )));
    }
    let terms = mediator_terms(k_cov, interactions);
    let n_par = terms.len();
    if panel.nrows() < n_par + 2 {
        return Err(Error::Data(format!(
            "mediator model needs at least {} rows, got {}",
            n_par + 2,
            panel.nrows()
        )));
    }
    check_two_levels(&panel.treatment)?;

    let (raw, corr) = corrected_cross_moments(panel, score_error_cov, &terms, &terms)?;
    let (raw_t, corr_t) =
        corrected_cross_moments(panel, score_error_cov, &terms, &[Term::factor(0)])?;
    let a = raw - corr;
    let b = (raw_t - corr_t).column(0).into_owned();
    let (gamma, cond) = linalg::solve_checked(
        &a,
        &b,
        MEDIATOR_MAX_CONDITION,
        "corrected mediator design moment",
    )?;

    let interaction_f = if interactions.is_empty() {
        None
    } else {
        interaction_wald(panel, &terms, &a, &gamma, 1 + k_cov)
    };

    Ok(MediatorEstimate {
        gamma,
        n_covariates: k_cov,
        interactions: interactions.to_vec(),
        interaction_f,
        condition_number: cond,
    })
}

/// Sandwich Wald statistic per degree of freedom for the trailing
/// coefficients starting at `offset`.
fn interaction_wald(
    panel: &FactorScorePanel,
    terms: &[Term],
    bread: &DMatrix<f64>,
    gamma: &DVector<f64>,
    offset: usize,
) -> Option<f64> {
    let n = panel.nrows();
    let p = terms.len();
    let x = DMatrix::from_fn(n, p, |i, a| terms[a].value(panel, i));
    let resid = panel.mediator() - &x * gamma;
    let mut weighted = x.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        row *= resid[i];
    }
    let meat = weighted.transpose() * &weighted / n as f64;
    let bread_inv = bread.clone().try_inverse()?;
    let cov = &bread_inv * meat * bread_inv.transpose() / n as f64;
    let m = p - offset;
    let v = cov.view((offset, offset), (m, m)).into_owned();
    let g = gamma.rows(offset, m).into_owned();
    let stat = g.dot(&v.lu().solve(&g)?);
    Some(stat / m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn panel_from(rows: &[[f64; 5]]) -> FactorScorePanel {
        // columns: r, m, x1, x2, y
        let n = rows.len();
        let scores = DMatrix::from_fn(n, 4, |i, j| rows[i][j + 1]);
        let r = DVector::from_fn(n, |i, _| rows[i][0]);
        FactorScorePanel::new(scores, r).unwrap()
    }

    fn synthetic(n: usize) -> FactorScorePanel {
        // Deterministic pseudo-random design.
        let mut rows = Vec::with_capacity(n);
        let mut state = 0x2545F4914F6CDD1Du64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for i in 0..n {
            let r = if i % 2 == 0 { 1.0 } else { -1.0 };
            let x1 = 2.0 * next();
            let x2 = 2.0 * next() + 0.3 * x1;
            let m = 0.3 * r + 0.3 * x1 + 0.3 * x2 + 0.2 * r * x1 + 0.1 * r * x2 + 0.5 * next();
            let y = 0.1 * r + 0.4 * m + next();
            rows.push([r, m, x1, x2, y]);
        }
        panel_from(&rows)
    }

    fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
        let xtx = x.transpose() * x;
        xtx.lu().solve(&(x.transpose() * y)).unwrap()
    }

    #[test]
    fn zero_sigma_ee_is_ordinary_least_squares() {
        let panel = synthetic(400);
        let est = fit_mediator(&panel, &DMatrix::zeros(4, 4), &[0, 1]).unwrap();
        let n = panel.nrows();
        let x = DMatrix::from_fn(n, 5, |i, j| {
            let r = panel.treatment[i];
            match j {
                0 => r,
                1 => panel.scores[(i, 1)],
                2 => panel.scores[(i, 2)],
                3 => r * panel.scores[(i, 1)],
                _ => r * panel.scores[(i, 2)],
            }
        });
        let expected = ols(&x, &panel.mediator());
        assert!((&est.gamma - expected).amax() < 1e-10);
        assert_eq!(
            est.names(),
            ["gamma_r", "gamma_x1", "gamma_x2", "gamma_x1r", "gamma_x2r"]
        );
        assert!(est.interaction_f.unwrap() > 10.0);
    }

    #[test]
    fn no_interactions_reduces_to_corrected_regression_on_r_and_x() {
        let panel = synthetic(300);
        let mut see = DMatrix::zeros(4, 4);
        see[(1, 1)] = 0.05;
        see[(2, 2)] = 0.08;
        see[(1, 2)] = 0.01;
        see[(2, 1)] = 0.01;
        let est = fit_mediator(&panel, &see, &[]).unwrap();
        assert_eq!(est.gamma.len(), 3);
        assert!(est.interaction_f.is_none());
        // Independent evaluation: (X'X/N − C)⁻¹ X'm/N with C the error
        // covariance of the x block.
        let n = panel.nrows();
        let x = DMatrix::from_fn(n, 3, |i, j| {
            if j == 0 {
                panel.treatment[i]
            } else {
                panel.scores[(i, j)]
            }
        });
        let mut a = x.transpose() * &x / n as f64;
        for p in 1..3 {
            for q in 1..3 {
                a[(p, q)] -= see[(p, q)];
            }
        }
        let b = x.transpose() * panel.mediator() / n as f64;
        let expected = a.lu().solve(&b).unwrap();
        assert!((&est.gamma - expected).amax() < 1e-12);
    }

    #[test]
    fn treatment_must_have_two_levels() {
        let rows: Vec<[f64; 5]> = (0..10)
            .map(|i| [1.0, i as f64, (i * i) as f64 * 0.1, (i % 3) as f64, 0.0])
            .collect();
        let err = fit_mediator(&panel_from(&rows), &DMatrix::zeros(4, 4), &[0]).unwrap_err();
        assert!(err.to_string().contains("constant"));
        assert!(check_two_levels(&DVector::from_vec(vec![0.0, 1.0, 2.0])).is_err());
        assert!(check_two_levels(&DVector::from_vec(vec![0.0, 1.0, 1.0])).is_ok());
    }

    #[test]
    fn collinear_design_rejected() {
        let rows: Vec<[f64; 5]> = (0..12)
            .map(|i| {
                let r = if i % 2 == 0 { 1.0 } else { -1.0 };
                let x = i as f64 * 0.3;
                [r, x + r, x, 2.0 * x, 0.0]
            })
            .collect();
        let err = fit_mediator(&panel_from(&rows), &DMatrix::zeros(4, 4), &[]).unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
    }

    #[test]
    fn too_few_rows_rejected() {
        let rows = [[1.0, 0.1, 0.2, 0.3, 0.0], [-1.0, 0.2, 0.1, 0.0, 0.0]];
        assert!(fit_mediator(&panel_from(&rows), &DMatrix::zeros(4, 4), &[0, 1]).is_err());
    }
}
