//! Maximum-likelihood confirmatory factor analysis.
//!
//! The covariance structure `Σ = ΛΦΛ' + Ψ` is fitted by BFGS on an
//! unconstrained parameter vector laid out as
//!
//! ```text
//! [ free loadings (p-k) | log(ψ_j - floor) (p) | chol(Φ) lower triangle, log diagonal ]
//! ```
//!
//! With reference intercepts fixed at zero the mean structure has exactly
//! `p` free parameters (`τ_free` and the factor means), so the mean part of
//! the discrepancy is zero at `factor_means = z̄_ref`,
//! `τ_free = z̄_free − Λ_free z̄_ref` for any covariance parameters. Those
//! values are therefore the joint minimizer and are set in closed form.

use nalgebra::{DMatrix, DVector};

use super::scores::{compute_h, score_error_covariance};
use super::{CanonicalData, IndicatorLayout};
use crate::error::{Error, Result};
use crate::linalg;
use crate::optim::{self, BfgsOptions};

#[derive(Debug, Clone, Copy)]
pub struct CfaOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Lower bound on residual variances.
    pub psi_floor: f64,
}

impl Default for CfaOptions {
    fn default() -> Self {
        CfaOptions {
            max_iter: 500,
            grad_tol: 1e-6,
            psi_floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfaDiagnostics {
    pub n_obs: usize,
    pub iterations: usize,
    pub objective: f64,
    pub initial_objective: f64,
    pub grad_inf_norm: f64,
    /// Canonical indices of indicators whose residual variance sits at the
    /// floor (Heywood cases).
    pub heywood: Vec<usize>,
}

impl CfaDiagnostics {
    pub fn is_heywood(&self) -> bool {
        !self.heywood.is_empty()
    }
}

/// Fitted measurement model, canonical indicator order throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementEstimate {
    pub layout: IndicatorLayout,
    /// `(p-k)` intercepts of the non-reference indicators.
    pub tau_free: DVector<f64>,
    /// `(p-k) × k` loadings, zero outside the simple-structure pattern.
    pub lambda_free: DMatrix<f64>,
    /// Diagonal of the `p × p` residual covariance.
    pub psi: DVector<f64>,
    pub phi: DMatrix<f64>,
    pub factor_means: DVector<f64>,
    /// `k × (p-k)`.
    pub h: DMatrix<f64>,
    /// `k × k` covariance of the factor-score estimation error.
    pub score_error_cov: DMatrix<f64>,
    pub diagnostics: CfaDiagnostics,
}

impl MeasurementEstimate {
    /// Assembles an estimate from measurement parameters, deriving `H` and
    /// `Σ_ee`.
    pub fn from_parameters(
        layout: IndicatorLayout,
        tau_free: DVector<f64>,
        lambda_free: DMatrix<f64>,
        psi: DVector<f64>,
        phi: DMatrix<f64>,
        factor_means: DVector<f64>,
        diagnostics: CfaDiagnostics,
    ) -> Result<Self> {
        let p = layout.n_indicators();
        let k = layout.n_factors;
        if tau_free.len() != p - k
            || lambda_free.shape() != (p - k, k)
            || psi.len() != p
            || phi.shape() != (k, k)
            || factor_means.len() != k
        {
            return Err(Error::Dimension(format!(
                "measurement parameters do not match {p} indicators and {k} factors"
            )));
        }
        let psi_m = DMatrix::from_diagonal(&psi);
        let h = compute_h(&lambda_free, &psi_m)?;
        let score_error_cov = score_error_covariance(&h, &lambda_free, &psi_m)?;
        Ok(MeasurementEstimate {
            layout,
            tau_free,
            lambda_free,
            psi,
            phi,
            factor_means,
            h,
            score_error_cov,
            diagnostics,
        })
    }

    pub fn n_indicators(&self) -> usize {
        self.psi.len()
    }

    pub fn n_factors(&self) -> usize {
        self.phi.nrows()
    }

    /// `p × k` loading matrix `(Λ_free', I_k)'`.
    pub fn full_lambda(&self) -> DMatrix<f64> {
        stack_lambda(&self.lambda_free)
    }

    /// `(τ_free', 0')'`.
    pub fn full_tau(&self) -> DVector<f64> {
        let k = self.n_factors();
        let mut t = DVector::zeros(self.n_indicators());
        t.rows_mut(0, self.tau_free.len()).copy_from(&self.tau_free);
        debug_assert!(t.rows(self.tau_free.len(), k).iter().all(|&v| v == 0.0));
        t
    }

    pub fn implied_covariance(&self) -> DMatrix<f64> {
        let l = self.full_lambda();
        &l * &self.phi * l.transpose() + DMatrix::from_diagonal(&self.psi)
    }

    pub fn implied_mean(&self) -> DVector<f64> {
        self.full_tau() + self.full_lambda() * &self.factor_means
    }

    /// Loading of each indicator on its own factor, canonical order
    /// (reference indicators report 1).
    pub fn loadings(&self) -> Vec<f64> {
        (0..self.n_indicators())
            .map(|c| {
                let f = self.layout.factor_of(c);
                if c < self.layout.n_free() {
                    self.lambda_free[(c, f)]
                } else {
                    1.0
                }
            })
            .collect()
    }
}

fn stack_lambda(lambda_free: &DMatrix<f64>) -> DMatrix<f64> {
    let (pf, k) = lambda_free.shape();
    let mut l = DMatrix::zeros(pf + k, k);
    l.rows_mut(0, pf).copy_from(lambda_free);
    l.rows_mut(pf, k).fill_with_identity();
    l
}

/// Fits the measurement model to canonicalized indicator data.
pub fn fit_cfa(
    data: &CanonicalData,
    opts: &CfaOptions,
    start: Option<&MeasurementEstimate>,
) -> Result<MeasurementEstimate> {
    let n = data.nrows();
    let p = data.layout.n_indicators();
    if n <= p {
        return Err(Error::Data(format!(
            "need more rows than indicators ({n} rows, {p} indicators)"
        )));
    }
    let (cov, mean) = linalg::ml_covariance(&data.indicators);
    fit_cfa_moments(&data.layout, &cov, &mean, n, opts, start)
}

/// Fits the measurement model to a sample covariance (divisor `N`) and mean.
pub fn fit_cfa_moments(
    layout: &IndicatorLayout,
    cov: &DMatrix<f64>,
    mean: &DVector<f64>,
    n_obs: usize,
    opts: &CfaOptions,
    start: Option<&MeasurementEstimate>,
) -> Result<MeasurementEstimate> {
    let p = layout.n_indicators();
    let k = layout.n_factors;
    if cov.shape() != (p, p) || mean.len() != p {
        return Err(Error::Dimension(format!(
            "covariance {:?} / mean {} for {p} indicators",
            cov.shape(),
            mean.len()
        )));
    }
    let s_chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("sample covariance is not positive definite".into()))?;
    let logdet_s = 2.0 * s_chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();

    let problem = Problem {
        layout,
        cov,
        logdet_s,
        floor: opts.psi_floor,
    };
    let x0 = match start {
        Some(est) if est.layout == *layout => problem.pack_estimate(est),
        _ => problem.default_start(),
    };
    let x0 = if problem.evaluate(&x0).is_some() {
        x0
    } else {
        problem.default_start()
    };

    let bfgs = BfgsOptions {
        max_iter: opts.max_iter,
        grad_tol: opts.grad_tol,
    };
    let min = optim::minimize(|x| problem.evaluate(x), x0, bfgs).ok_or_else(|| {
        Error::Numerical("starting values give a singular implied covariance".into())
    })?;
    if !min.converged {
        return Err(Error::NotConverged {
            iterations: min.iterations,
            grad_norm: min.grad_inf_norm,
        });
    }

    let (lambda_free, psi, phi) = problem.unpack(&min.x);
    let pf = p - k;
    let factor_means = mean.rows(pf, k).into_owned();
    let tau_free = mean.rows(0, pf) - &lambda_free * &factor_means;
    let heywood = psi
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v - opts.psi_floor <= 1e-6 * cov[(j, j)].max(1e-12))
        .map(|(j, _)| j)
        .collect();

    MeasurementEstimate::from_parameters(
        layout.clone(),
        tau_free,
        lambda_free,
        psi,
        phi,
        factor_means,
        CfaDiagnostics {
            n_obs,
            iterations: min.iterations,
            objective: min.value,
            initial_objective: min.initial_value,
            grad_inf_norm: min.grad_inf_norm,
            heywood,
        },
    )
}

struct Problem<'a> {
    layout: &'a IndicatorLayout,
    cov: &'a DMatrix<f64>,
    logdet_s: f64,
    floor: f64,
}

impl Problem<'_> {
    fn n_params(&self) -> usize {
        let k = self.layout.n_factors;
        self.layout.n_free() + self.layout.n_indicators() + k * (k + 1) / 2
    }

    fn default_start(&self) -> DVector<f64> {
        let p = self.layout.n_indicators();
        let k = self.layout.n_factors;
        let pf = p - k;
        let lambda = DMatrix::from_fn(pf, k, |a, f| {
            if self.layout.free_factor[a] == f {
                1.0
            } else {
                0.0
            }
        });
        let psi = DVector::from_fn(p, |j, _| (0.5 * self.cov[(j, j)]).max(2.0 * self.floor));
        let ref_cov = self.cov.view((pf, pf), (k, k)).into_owned();
        let phi = if ref_cov.clone().cholesky().is_some() {
            ref_cov
        } else {
            DMatrix::from_diagonal(&ref_cov.diagonal())
        };
        self.pack(&lambda, &psi, &phi)
    }

    fn pack_estimate(&self, est: &MeasurementEstimate) -> DVector<f64> {
        let psi = est.psi.map(|v| v.max(self.floor * (1.0 + 1e-3)));
        self.pack(&est.lambda_free, &psi, &est.phi)
    }

    fn pack(&self, lambda: &DMatrix<f64>, psi: &DVector<f64>, phi: &DMatrix<f64>) -> DVector<f64> {
        let pf = self.layout.n_free();
        let p = self.layout.n_indicators();
        let k = self.layout.n_factors;
        let mut x = DVector::zeros(self.n_params());
        for a in 0..pf {
            x[a] = lambda[(a, self.layout.free_factor[a])];
        }
        for j in 0..p {
            x[pf + j] = (psi[j] - self.floor).max(f64::MIN_POSITIVE).ln();
        }
        let chol = phi.clone().cholesky().map(|c| c.l()).unwrap_or_else(|| {
            DMatrix::from_diagonal(&phi.diagonal().map(|v| v.abs().sqrt().max(1e-3)))
        });
        let mut idx = pf + p;
        for i in 0..k {
            for j in 0..=i {
                x[idx] = if i == j {
                    chol[(i, i)].ln()
                } else {
                    chol[(i, j)]
                };
                idx += 1;
            }
        }
        x
    }

    fn unpack_parts(&self, x: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
        let pf = self.layout.n_free();
        let p = self.layout.n_indicators();
        let k = self.layout.n_factors;
        let mut lambda = DMatrix::zeros(pf, k);
        for a in 0..pf {
            lambda[(a, self.layout.free_factor[a])] = x[a];
        }
        let psi = DVector::from_fn(p, |j, _| self.floor + x[pf + j].exp());
        let mut chol = DMatrix::zeros(k, k);
        let mut idx = pf + p;
        for i in 0..k {
            for j in 0..=i {
                chol[(i, j)] = if i == j { x[idx].exp() } else { x[idx] };
                idx += 1;
            }
        }
        (lambda, psi, chol)
    }

    fn unpack(&self, x: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
        let (lambda, psi, chol) = self.unpack_parts(x);
        let phi = &chol * chol.transpose();
        (lambda, psi, phi)
    }

    /// Discrepancy `ln|Σ| + tr(SΣ⁻¹) − ln|S| − p` and its gradient.
    fn evaluate(&self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        let pf = self.layout.n_free();
        let p = self.layout.n_indicators();
        let k = self.layout.n_factors;
        let (lambda_free, psi, chol) = self.unpack_parts(x);
        let phi = &chol * chol.transpose();
        let lambda = stack_lambda(&lambda_free);

        let mut sigma = &lambda * &phi * lambda.transpose();
        for j in 0..p {
            sigma[(j, j)] += psi[j];
        }
        let sigma_chol = sigma.cholesky()?;
        let logdet = 2.0
            * sigma_chol
                .l()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
        let sigma_inv = sigma_chol.inverse();
        let s_sigma_inv = self.cov * &sigma_inv;
        let value = logdet + s_sigma_inv.trace() - self.logdet_s - p as f64;
        if !value.is_finite() {
            return None;
        }

        // dF = tr(G dΣ) with G = Σ⁻¹ − Σ⁻¹ S Σ⁻¹.
        let g = &sigma_inv - &sigma_inv * &s_sigma_inv;
        let g_lambda = &g * &lambda;
        let d_lambda = &g_lambda * &phi * 2.0;
        let d_phi = lambda.transpose() * &g_lambda;
        let d_chol = &d_phi * &chol * 2.0;

        let mut grad = DVector::zeros(self.n_params());
        for a in 0..pf {
            grad[a] = d_lambda[(a, self.layout.free_factor[a])];
        }
        for j in 0..p {
            grad[pf + j] = g[(j, j)] * (psi[j] - self.floor);
        }
        let mut idx = pf + p;
        for i in 0..k {
            for j in 0..=i {
                grad[idx] = if i == j {
                    d_chol[(i, i)] * chol[(i, i)]
                } else {
                    d_chol[(i, j)]
                };
                idx += 1;
            }
        }
        Some((value, grad))
    }
}
