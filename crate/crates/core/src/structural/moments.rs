//! Weights, uncorrected and correction moment matrices, and the stabilized
//! combination of the two.

use nalgebra::{DMatrix, DVector, Schur};

use super::mediator::{check_two_levels, MediatorEstimate};
use crate::error::{Error, Result};
use crate::linalg;
use crate::measurement::FactorScorePanel;

/// A column of a design built from the treatment and factor scores:
/// `r^treated · η̂_factor` (a missing factor stands for 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Term {
    treated: bool,
    factor: Option<usize>,
}

impl Term {
    pub fn treatment() -> Self {
        Term {
            treated: true,
            factor: None,
        }
    }

    pub fn factor(f: usize) -> Self {
        Term {
            treated: false,
            factor: Some(f),
        }
    }

    pub fn treated_factor(f: usize) -> Self {
        Term {
            treated: true,
            factor: Some(f),
        }
    }

    pub fn value(&self, panel: &FactorScorePanel, i: usize) -> f64 {
        let r = if self.treated {
            panel.treatment[i]
        } else {
            1.0
        };
        match self.factor {
            Some(f) => r * panel.scores[(i, f)],
            None => r,
        }
    }
}

/// Raw cross moments `(1/N) Σᵢ row(i) col(i)'` and their factor-score error
/// part: for two latent terms `r^s η̂_a` and `r^t η̂_b` the error contributes
/// `mean(r^{s+t}) Σ_ee[a, b]`.
pub(crate) fn corrected_cross_moments(
    panel: &FactorScorePanel,
    score_error_cov: &DMatrix<f64>,
    rows: &[Term],
    cols: &[Term],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = panel.n_factors();
    if score_error_cov.shape() != (k, k) {
        return Err(Error::Dimension(format!(
            "score error covariance is {:?} for {k} factors",
            score_error_cov.shape()
        )));
    }
    let n = panel.nrows();
    let nf = n as f64;
    let row_vals = DMatrix::from_fn(n, rows.len(), |i, a| rows[a].value(panel, i));
    let col_vals = DMatrix::from_fn(n, cols.len(), |i, b| cols[b].value(panel, i));
    let raw = row_vals.transpose() * col_vals / nf;

    let r_pow_mean = [
        1.0,
        panel.treatment.mean(),
        panel.treatment.map(|r| r * r).mean(),
    ];
    let corr = DMatrix::from_fn(rows.len(), cols.len(), |a, b| {
        match (rows[a].factor, cols[b].factor) {
            (Some(fa), Some(fb)) => {
                let power = rows[a].treated as usize + cols[b].treated as usize;
                r_pow_mean[power] * score_error_cov[(fa, fb)]
            }
            _ => 0.0,
        }
    });
    Ok((raw, corr))
}

/// `w_r = r − mean(r)`.
pub fn treatment_weight(treatment: &DVector<f64>) -> Result<DVector<f64>> {
    check_two_levels(treatment)?;
    let mean = treatment.mean();
    Ok(treatment.map(|r| r - mean))
}

/// `w_m,i = (γ_r + Σ_j γ_{x_j r} η̂_{x_j,i}) · w_r,i` over the interaction set.
pub fn mediator_weight(
    gamma: &MediatorEstimate,
    panel: &FactorScorePanel,
    w_r: &DVector<f64>,
) -> Result<DVector<f64>> {
    if w_r.len() != panel.nrows() {
        return Err(Error::Dimension(format!(
            "{} treatment weights for {} rows",
            w_r.len(),
            panel.nrows()
        )));
    }
    if gamma.n_covariates != panel.n_covariates() {
        return Err(Error::Dimension(format!(
            "mediator model has {} covariates, panel has {}",
            gamma.n_covariates,
            panel.n_covariates()
        )));
    }
    let mut effect = DVector::from_element(panel.nrows(), gamma.gamma_r());
    for (j, g) in gamma.interaction_coefficients() {
        effect.axpy(g, &panel.covariate(j), 1.0);
    }
    Ok(effect.component_mul(w_r))
}

/// `(1/N) Σᵢ A₀ᵢ = W'(Ξ_y, η̂_y)/N` with weight rows `(w_r, w_m, η̂_x')` and
/// predictor rows `(r, η̂_m, η̂_x')`. Returns a `q × (q+1)` matrix whose last
/// column is `m̂₁`.
pub fn weighted_moments(
    panel: &FactorScorePanel,
    w_r: &DVector<f64>,
    w_m: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = panel.nrows();
    if w_r.len() != n || w_m.len() != n {
        return Err(Error::Dimension("weights do not match panel rows".into()));
    }
    let k_cov = panel.n_covariates();
    let q = 2 + k_cov;
    let mut w = DMatrix::zeros(n, q);
    w.set_column(0, w_r);
    w.set_column(1, w_m);
    w.columns_mut(2, k_cov)
        .copy_from(&panel.scores.columns(1, k_cov));
    let mut xi = DMatrix::zeros(n, q + 1);
    xi.set_column(0, &panel.treatment);
    xi.columns_mut(1, q).copy_from(&panel.scores);
    Ok(w.transpose() * xi / n as f64)
}

/// First-order factor-score correction matching [`weighted_moments`], averaged over
/// subjects. Columns after the first map to factors `(m, x_1..x_K, y)`; the
/// treatment row and column carry no error.
pub fn score_error_correction(
    gamma: &MediatorEstimate,
    score_error_cov: &DMatrix<f64>,
    w_r: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let k_cov = gamma.n_covariates;
    let k = k_cov + 2;
    if score_error_cov.shape() != (k, k) {
        return Err(Error::Dimension(format!(
            "score error covariance is {:?}, expected {k}×{k} for {k_cov} covariates",
            score_error_cov.shape()
        )));
    }
    let q = 2 + k_cov;
    let mean_wr = w_r.mean();
    let mut a1 = DMatrix::zeros(q, q + 1);
    for c in 1..=q {
        let f = c - 1;
        let w_m_cell: f64 = gamma
            .interaction_coefficients()
            .map(|(j, g)| g * score_error_cov[(1 + j, f)])
            .sum();
        a1[(1, c)] = w_m_cell * mean_wr;
        for j in 0..k_cov {
            a1[(2 + j, c)] = score_error_cov[(1 + j, f)];
        }
    }
    Ok(a1)
}

/// Uncorrected moments `(M₁, m₁)` and correction `(M₂, m₂)` plus the two
/// scalars that complete the `R₁`/`R₂` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPair {
    pub raw_matrix: DMatrix<f64>,
    pub raw_vector: DVector<f64>,
    pub correction_matrix: DMatrix<f64>,
    pub correction_vector: DVector<f64>,
    /// `(1/N) Σ η̂²_y`.
    pub eta_y_sq_mean: f64,
    /// Error variance of the outcome score.
    pub outcome_score_error_var: f64,
}

impl MomentPair {
    /// Splits the `q × (q+1)` raw moment average and its score-error
    /// correction; the correction is subtracted.
    pub fn from_terms(
        a0: &DMatrix<f64>,
        a1: &DMatrix<f64>,
        eta_y_sq_mean: f64,
        outcome_score_error_var: f64,
    ) -> Result<Self> {
        let (q, c) = a0.shape();
        if c != q + 1 || a1.shape() != (q, q + 1) {
            return Err(Error::Dimension(format!(
                "moment terms {:?} / {:?} are not q × (q+1)",
                a0.shape(),
                a1.shape()
            )));
        }
        Ok(MomentPair {
            raw_matrix: a0.columns(0, q).into_owned(),
            raw_vector: a0.column(q).into_owned(),
            correction_matrix: -a1.columns(0, q),
            correction_vector: -a1.column(q),
            eta_y_sq_mean,
            outcome_score_error_var,
        })
    }

    pub fn dim(&self) -> usize {
        self.raw_matrix.nrows()
    }

    pub fn raw_bordered(&self) -> DMatrix<f64> {
        bordered(&self.raw_matrix, &self.raw_vector, self.eta_y_sq_mean)
    }

    pub fn correction_bordered(&self) -> DMatrix<f64> {
        bordered(
            &(-&self.correction_matrix),
            &(-&self.correction_vector),
            self.outcome_score_error_var,
        )
    }
}

fn bordered(m: &DMatrix<f64>, v: &DVector<f64>, corner: f64) -> DMatrix<f64> {
    let q = m.nrows();
    let mut r = DMatrix::zeros(q + 1, q + 1);
    r.view_mut((0, 0), (q, q)).copy_from(m);
    r.view_mut((0, q), (q, 1)).copy_from(v);
    r.view_mut((q, 0), (1, q)).copy_from(&v.transpose());
    r[(q, q)] = corner;
    r
}

/// Stabilized moments `(M̌, m̌)` and the shrinkage that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModifiedMoments {
    pub matrix: DMatrix<f64>,
    pub vector: DVector<f64>,
    pub correction_eigenvalue: f64,
    /// Multiplier applied to `(M₂, m₂)`.
    pub shrink_factor: f64,
}

const SCHUR_MAX_ITER: usize = 10_000;

/// Largest eigenvalue of `R₁^{-1/2} R₂ R₁^{-1/2}` for symmetric `R₁`.
///
/// When `R₁` is not symmetric (weights differ from predictors) the same
/// quantity is taken as the largest real eigenvalue of `R₁⁻¹R₂`: the
/// smallest `s > 0` making `R₁ − sR₂` singular is `1/λ̂` in both cases.
pub fn largest_relative_eigenvalue(r1: &DMatrix<f64>, r2: &DMatrix<f64>) -> Result<f64> {
    if linalg::is_symmetric(r1, 1e-12) {
        let inv_sqrt = linalg::spd_inverse_sqrt(r1)
            .ok_or_else(|| Error::Numerical("raw moment matrix is not positive definite".into()))?;
        let s = linalg::symmetrize(&(&inv_sqrt * r2 * &inv_sqrt));
        let eig = s.symmetric_eigen();
        return Ok(eig
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max));
    }
    if r2.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let prod = r1
        .clone()
        .lu()
        .solve(r2)
        .ok_or_else(|| Error::Numerical("raw moment matrix is singular".into()))?;
    // nalgebra's Schur iteration never converges on an exact zero matrix,
    // so it is capped, and retried once on a shifted copy.
    let shift = prod.amax().max(1.0);
    let eig = match Schur::try_new(prod.clone(), f64::EPSILON, SCHUR_MAX_ITER) {
        Some(s) => s.complex_eigenvalues(),
        None => {
            let n = prod.nrows();
            let shifted = prod + DMatrix::identity(n, n) * shift;
            Schur::try_new(shifted, f64::EPSILON, SCHUR_MAX_ITER)
                .ok_or_else(|| Error::Numerical("relative eigenvalues did not converge".into()))?
                .complex_eigenvalues()
                .map(|z| z - shift)
        }
    };
    let mut best: f64 = 0.0;
    for z in eig.iter() {
        if !z.re.is_finite() || !z.im.is_finite() {
            return Err(Error::Numerical(
                "relative eigen-decomposition failed".into(),
            ));
        }
        if z.im.abs() <= 1e-9 * z.re.abs().max(1.0) {
            best = best.max(z.re);
        }
    }
    Ok(best)
}

/// Shrinkage multiplier for the correction terms. Full weight `1 − τ/N`
/// while `1/λ̂ ≥ 1 + 1/N`, otherwise `1/λ̂ − 1/N − τ/N`; floored at zero.
pub fn shrink_factor(correction_eigenvalue: f64, tau: f64, n: usize) -> f64 {
    let nf = n as f64;
    let factor = if correction_eigenvalue * (1.0 + 1.0 / nf) <= 1.0 {
        1.0 - tau / nf
    } else {
        1.0 / correction_eigenvalue - 1.0 / nf - tau / nf
    };
    factor.max(0.0)
}

/// `(M̌, m̌) = (M₁, m₁) + c·(M₂, m₂)` with `c` from [`shrink_factor`].
pub fn modified_moments(pair: &MomentPair, tau: f64, n: usize) -> Result<ModifiedMoments> {
    if !(0.0..=6.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!(
            "tau = {tau} outside [0, 6]"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "sample size must be positive".into(),
        ));
    }
    let correction_eigenvalue =
        largest_relative_eigenvalue(&pair.raw_bordered(), &pair.correction_bordered())?;
    let c = shrink_factor(correction_eigenvalue, tau, n);
    Ok(ModifiedMoments {
        matrix: &pair.raw_matrix + &pair.correction_matrix * c,
        vector: &pair.raw_vector + &pair.correction_vector * c,
        correction_eigenvalue,
        shrink_factor: c,
    })
}
