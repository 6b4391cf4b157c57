use nalgebra::{DMatrix, DVector};

use super::{CanonicalData, MeasurementEstimate};
use crate::error::{Error, Result};
use crate::linalg;

/// Per-subject factor scores with the treatment they were observed under.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorScorePanel {
    /// `N × k`, columns in model factor order (mediator, covariates, outcome).
    pub scores: DMatrix<f64>,
    pub treatment: DVector<f64>,
    pub ids: Vec<usize>,
}

impl FactorScorePanel {
    pub fn new(scores: DMatrix<f64>, treatment: DVector<f64>) -> Result<Self> {
        if scores.nrows() != treatment.len() {
            return Err(Error::Dimension(format!(
                "{} score rows but {} treatment values",
                scores.nrows(),
                treatment.len()
            )));
        }
        if scores.ncols() < 3 {
            return Err(Error::Dimension(format!(
                "need mediator, covariate and outcome columns, got {}",
                scores.ncols()
            )));
        }
        let ids = (0..scores.nrows()).collect();
        Ok(FactorScorePanel {
            scores,
            treatment,
            ids,
        })
    }

    pub fn nrows(&self) -> usize {
        self.scores.nrows()
    }

    pub fn n_factors(&self) -> usize {
        self.scores.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.scores.ncols() - 2
    }

    pub fn mediator(&self) -> DVector<f64> {
        self.scores.column(0).into_owned()
    }

    pub fn covariate(&self, j: usize) -> DVector<f64> {
        self.scores.column(1 + j).into_owned()
    }

    pub fn outcome(&self) -> DVector<f64> {
        self.scores.column(self.scores.ncols() - 1).into_owned()
    }

    /// Copy with every score column and the treatment centered at their
    /// sample means. The structural models carry no intercept, so they are
    /// fitted to centered variables.
    pub fn centered(&self) -> FactorScorePanel {
        let mut scores = self.scores.clone();
        for mut col in scores.column_iter_mut() {
            let m = col.mean();
            col.add_scalar_mut(-m);
        }
        let mut treatment = self.treatment.clone();
        treatment.add_scalar_mut(-self.treatment.mean());
        FactorScorePanel {
            scores,
            treatment,
            ids: self.ids.clone(),
        }
    }
}

/// `H = (0 I_k) Ψ B' [B Ψ B']⁻¹` with `B = (I_{p-k}, −Λ_free)`.
pub fn compute_h(lambda_free: &DMatrix<f64>, psi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (pf, k) = lambda_free.shape();
    let p = pf + k;
    if psi.shape() != (p, p) {
        return Err(Error::Dimension(format!(
            "Ψ is {:?}, expected {p}×{p}",
            psi.shape()
        )));
    }
    let mut b = DMatrix::zeros(pf, p);
    b.view_mut((0, 0), (pf, pf)).fill_with_identity();
    b.view_mut((0, pf), (pf, k)).copy_from(&(-lambda_free));
    let psi_bt = psi * b.transpose();
    let inner = &b * &psi_bt;
    let cond = linalg::condition_number(&inner);
    if !cond.is_finite() || cond > 1e14 {
        return Err(Error::Singular(format!(
            "B Ψ B' (residual covariance of the non-reference indicators after \
             removing the reference block) is singular, condition number {cond:.3e}"
        )));
    }
    let inner_inv = inner
        .try_inverse()
        .ok_or_else(|| Error::Singular("B Ψ B' could not be inverted".into()))?;
    Ok(psi_bt.rows(pf, k) * inner_inv)
}

/// The `k × p` map `(−H, I_k + H Λ_free)` taking centered indicators to
/// factor scores.
pub fn score_map(h: &DMatrix<f64>, lambda_free: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (pf, k) = lambda_free.shape();
    if h.shape() != (k, pf) {
        return Err(Error::Dimension(format!(
            "H is {:?}, expected {k}×{pf}",
            h.shape()
        )));
    }
    let mut d = DMatrix::zeros(k, pf + k);
    d.view_mut((0, 0), (k, pf)).copy_from(&(-h));
    let mut right = h * lambda_free;
    for i in 0..k {
        right[(i, i)] += 1.0;
    }
    d.view_mut((0, pf), (k, k)).copy_from(&right);
    Ok(d)
}

/// `Σ_ee = (−H, I_k + HΛ_free) Ψ (0, I_k)'`, stored exactly as evaluated.
pub fn score_error_covariance(
    h: &DMatrix<f64>,
    lambda_free: &DMatrix<f64>,
    psi: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let d = score_map(h, lambda_free)?;
    let (pf, k) = lambda_free.shape();
    if psi.shape() != (pf + k, pf + k) {
        return Err(Error::Dimension(format!(
            "Ψ is {:?}, expected {}×{}",
            psi.shape(),
            pf + k,
            pf + k
        )));
    }
    Ok(d * psi.columns(pf, k))
}

/// `η̂ᵢ = (−H, I_k + HΛ_free)[zᵢ − (τ_free', 0')']` for every row.
pub fn factor_scores(est: &MeasurementEstimate, data: &CanonicalData) -> Result<FactorScorePanel> {
    let p = est.n_indicators();
    if data.indicators.ncols() != p || data.layout != est.layout {
        return Err(Error::Dimension(format!(
            "data has {} indicator columns in a different layout than the {p}-indicator estimate",
            data.indicators.ncols()
        )));
    }
    let d = score_map(&est.h, &est.lambda_free)?;
    let tau = est.full_tau();
    let mut centered = data.indicators.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-tau[j]);
    }
    let scores = centered * d.transpose();
    Ok(FactorScorePanel {
        scores,
        treatment: data.treatment.clone(),
        ids: data.ids.clone(),
    })
}
