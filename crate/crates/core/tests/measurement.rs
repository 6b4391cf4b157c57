use latmed::linalg::ml_covariance;
use latmed::measurement::{
    canonicalize, compute_h, factor_scores, fit_cfa, score_error_covariance, CanonicalData,
    CfaOptions, IndicatorLayout, MeasurementEstimate,
};
use latmed::simgen::{default_model_spec, generate, GeneratedDataset, StudyCondition};
use nalgebra::{DMatrix, DVector};

fn simulated(
    n: usize,
    kappa: f64,
    seed: u64,
) -> (GeneratedDataset, CanonicalData, MeasurementEstimate) {
    let cond = StudyCondition::new(n, 0.4, 0.0, kappa, 0.3, 0.204).with_seed(seed);
    let g = generate(&cond).unwrap();
    let data = canonicalize(&default_model_spec(), &g.data).unwrap();
    let est = fit_cfa(&data, &CfaOptions::default(), None).unwrap();
    (g, data, est)
}

/// Canonical position of a named indicator.
fn canon(layout: &IndicatorLayout, name: &str) -> usize {
    layout.names.iter().position(|n| n == name).unwrap()
}

#[test]
fn large_sample_recovers_generating_values() {
    let (g, data, est) = simulated(10_000, 0.75, 101);
    assert!(est
        .lambda_free
        .iter()
        .filter(|&&l| l != 0.0)
        .all(|l| (l - 1.0).abs() < 0.05));
    let names = latmed::simgen::indicator_names();
    for (j, name) in names.iter().enumerate() {
        let truth = 1.0 / g.reliabilities[j] - 1.0;
        let c = canon(&data.layout, name);
        assert!(
            (est.psi[c] - truth).abs() < 0.05,
            "{name}: ψ̂ = {} vs {truth}",
            est.psi[c]
        );
    }
    let d = &est.diagnostics;
    assert!(d.objective < d.initial_objective);
    assert!(d.grad_inf_norm <= 1e-6);
    assert!(!d.is_heywood());
}

#[test]
fn free_parameters_within_three_standard_errors() {
    // Monte Carlo SEs from 30 independent fits at N = 10⁴; the estimate
    // from one further fit must fall within 3 of them of the truth.
    let fits: Vec<MeasurementEstimate> = (0..30)
        .map(|s| simulated(10_000, 0.75, 500 + s).2)
        .collect();
    let (g, data, est) = simulated(10_000, 0.75, 999);
    let names = latmed::simgen::indicator_names();
    let lf_sd = |i: usize, k: usize| {
        let v: Vec<f64> = fits.iter().map(|f| f.lambda_free[(i, k)]).collect();
        sd(&v)
    };
    for i in 0..est.lambda_free.nrows() {
        let k = data.layout.free_factor[i];
        assert!((est.lambda_free[(i, k)] - 1.0).abs() <= 3.0 * lf_sd(i, k));
    }
    // Residual variances relative to each dataset's own reliabilities.
    let psi_dev: Vec<Vec<f64>> = (0..30)
        .map(|s| {
            let (g, data, est) = simulated(10_000, 0.75, 500 + s);
            names
                .iter()
                .enumerate()
                .map(|(j, n)| est.psi[canon(&data.layout, n)] - (1.0 / g.reliabilities[j] - 1.0))
                .collect()
        })
        .collect();
    for (j, n) in names.iter().enumerate() {
        let v: Vec<f64> = psi_dev.iter().map(|d| d[j]).collect();
        let dev = est.psi[canon(&data.layout, n)] - (1.0 / g.reliabilities[j] - 1.0);
        assert!(dev.abs() <= 3.0 * sd(&v), "{n}");
    }
}

fn sd(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[test]
fn identification_blocks_are_exact() {
    let (_, _, est) = simulated(2000, 0.6, 7);
    let lambda = est.full_lambda();
    let (p, k) = (est.n_indicators(), est.n_factors());
    assert_eq!(
        lambda.rows(p - k, k).into_owned(),
        DMatrix::<f64>::identity(k, k)
    );
    let tau = est.full_tau();
    assert!(tau.rows(p - k, k).iter().all(|&t| t == 0.0));
    let psi = DMatrix::from_diagonal(&est.psi);
    assert_eq!(
        score_error_covariance(&est.h, &est.lambda_free, &psi).unwrap(),
        est.score_error_cov
    );
    assert!(est.psi.iter().all(|&v| v > 0.0));
    assert!(est.phi.clone().cholesky().is_some());
}

#[test]
fn scores_are_conditionally_unbiased() {
    let (g, data, est) = simulated(10_000, 0.75, 31);
    let panel = factor_scores(&est, &data).unwrap();
    for f in 0..4 {
        let truth = g.true_scores.column(f).into_owned();
        let score = panel.scores.column(f).into_owned();
        // The reference intercept is absorbed into the factor mean, so the
        // scores sit on the reference indicator's origin.
        let ref_intercept = g.intercepts[3 * f];
        let x = DMatrix::from_fn(truth.len(), 2, |i, j| if j == 0 { 1.0 } else { truth[i] });
        let b = (x.transpose() * &x)
            .lu()
            .solve(&(x.transpose() * &score))
            .unwrap();
        assert!((b[1] - 1.0).abs() < 0.03, "factor {f}: slope {}", b[1]);
        assert!(
            (b[0] - ref_intercept).abs() < 0.03,
            "factor {f}: intercept {}",
            b[0] - ref_intercept
        );
    }
}

#[test]
fn score_error_covariance_matches_closed_form() {
    let (g, data, est) = simulated(10_000, 0.5, 47);
    let panel = factor_scores(&est, &data).unwrap();
    let err = &panel.scores - g.true_scores.columns(0, 4);
    let (cov, _) = ml_covariance(&err);
    assert!((cov - &est.score_error_cov).amax() < 0.02);
}

#[test]
fn centered_implied_mean_gives_zero_scores() {
    let (_, data, mut est) = simulated(500, 0.75, 8);
    est.factor_means = DVector::zeros(4);
    let mu = est.implied_mean();
    let mut at_mean = data.clone();
    for mut row in at_mean.indicators.row_iter_mut() {
        row.copy_from(&mu.transpose());
    }
    let panel = factor_scores(&est, &at_mean).unwrap();
    assert!(panel.scores.amax() < 1e-12);
}

#[test]
fn vanishing_reference_residuals_reproduce_reference_block() {
    // As the reference residual variances go to zero the scores collapse
    // onto the reference indicators.
    let (_, data, est) = simulated(3000, 0.75, 13);
    let p = est.n_indicators();
    let mut psi = est.psi.clone();
    for j in p - 4..p {
        psi[j] = 1e-14;
    }
    let tiny = MeasurementEstimate::from_parameters(
        est.layout.clone(),
        est.tau_free.clone(),
        est.lambda_free.clone(),
        psi,
        est.phi.clone(),
        est.factor_means.clone(),
        est.diagnostics.clone(),
    )
    .unwrap();
    let panel = factor_scores(&tiny, &data).unwrap();
    let refs = data.indicators.columns(p - 4, 4);
    let diff = (&panel.scores - refs).amax();
    assert!(diff <= 1e-6, "max |score - reference| = {diff}");
    assert!(tiny.score_error_cov.amax() <= 1e-12);
}

#[test]
fn negative_implied_residual_is_flagged_as_heywood() {
    // Population covariance with unit loadings, identity factor covariance
    // and a residual of -0.05 on the mediator reference: the fit must pin
    // that residual at the floor.
    let layout = IndicatorLayout::from_spec(&default_model_spec());
    let p = layout.n_indicators();
    let m_ref = p - layout.n_factors;
    let cov = DMatrix::from_fn(p, p, |i, j| {
        let shared = if layout.factor_of(i) == layout.factor_of(j) {
            1.0
        } else {
            0.0
        };
        let resid = match (i == j, i == m_ref) {
            (true, true) => -0.05,
            (true, false) => 0.3,
            _ => 0.0,
        };
        shared + resid
    });
    let mean = DVector::zeros(p);
    let est = latmed::measurement::fit_cfa_moments(
        &layout,
        &cov,
        &mean,
        1000,
        &CfaOptions::default(),
        None,
    )
    .unwrap();
    assert_eq!(est.diagnostics.heywood, vec![m_ref]);
    assert!(est.psi[m_ref] < 1e-6);
}

#[test]
fn block_diagonal_psi_gives_block_sparse_h() {
    // Two factors with two free indicators each; H rows only load on their
    // own factor's free indicators.
    let lf = DMatrix::from_row_slice(4, 2, &[0.8, 0.0, 1.2, 0.0, 0.0, 0.9, 0.0, 1.1]);
    let psi = DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, 0.5, 0.7, 0.2, 0.4, 0.6]));
    let h = compute_h(&lf, &psi).unwrap();
    assert_eq!(h.shape(), (2, 4));
    assert!(h[(0, 2)].abs() < 1e-15 && h[(0, 3)].abs() < 1e-15);
    assert!(h[(1, 0)].abs() < 1e-15 && h[(1, 1)].abs() < 1e-15);
    assert!(h[(0, 0)] != 0.0 && h[(1, 3)] != 0.0);
}
