//! Invariants checked on random inputs.

use latmed::inference::{resample_indices, wald_test};
use latmed::mc::{histogram_bins, summarize, ReplicationRecord};
use latmed::measurement::{
    canonicalize, compute_h, score_error_covariance, score_map, CfaDiagnostics, FactorScorePanel,
    IndicatorLayout, MeasurementEstimate,
};
use latmed::simgen::StudyCondition;
use latmed::structural::{shrink_factor, weighted_moments, Method};
use latmed::{Dataset, FactorSpec, ModelSpec, Role};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Random spec with `sizes[f]` indicators per factor; the reference is
/// chosen by `refs[f] % sizes[f]`.
fn spec_for(sizes: &[usize], refs: &[usize]) -> ModelSpec {
    let roles = [Role::Mediator, Role::Covariate, Role::Outcome];
    let factors = sizes
        .iter()
        .zip(refs)
        .zip(roles)
        .enumerate()
        .map(|(f, ((&size, &r), role))| {
            let indicators: Vec<String> = (0..size).map(|i| format!("f{f}_{i}")).collect();
            FactorSpec {
                name: format!("f{f}"),
                role,
                reference: indicators[r % size].clone(),
                indicators,
            }
        })
        .collect();
    ModelSpec::new(factors, "r", vec![latmed::CovariateRef::Index(0)]).unwrap()
}

fn layout_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (
        prop::collection::vec(2usize..5, 3),
        prop::collection::vec(0usize..5, 3),
    )
}

/// Free loadings in the layout's sparsity pattern plus positive residuals.
fn parameters(layout: &IndicatorLayout, seed: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let p = layout.n_indicators();
    let k = layout.n_factors;
    let mut lf = DMatrix::zeros(p - k, k);
    for i in 0..p - k {
        lf[(i, layout.free_factor[i])] = 0.5 + seed[i % seed.len()].abs();
    }
    let psi = DVector::from_fn(p, |j, _| 0.1 + seed[(j + 1) % seed.len()].abs());
    (lf, psi)
}

fn diagnostics() -> CfaDiagnostics {
    CfaDiagnostics {
        n_obs: 100,
        iterations: 0,
        objective: 0.0,
        initial_objective: 0.0,
        grad_inf_norm: 0.0,
        heywood: vec![],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reference_block_of_loadings_is_identity(
        (sizes, refs) in layout_strategy(),
        seed in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        let layout = IndicatorLayout::from_spec(&spec_for(&sizes, &refs));
        let (p, k) = (layout.n_indicators(), layout.n_factors);
        let (lf, psi) = parameters(&layout, &seed);
        let est = MeasurementEstimate::from_parameters(
            layout,
            DVector::from_element(p - k, 0.5),
            lf,
            psi,
            DMatrix::identity(k, k),
            DVector::zeros(k),
            diagnostics(),
        )
        .unwrap();
        prop_assert_eq!(est.full_lambda().rows(p - k, k).into_owned(), DMatrix::identity(k, k));
        prop_assert!(est.full_tau().rows(p - k, k).iter().all(|&t| t == 0.0));
    }

    #[test]
    fn score_error_covariance_is_reproducible_and_unbiased(
        (sizes, refs) in layout_strategy(),
        seed in prop::collection::vec(-1.0f64..1.0, 5),
    ) {
        let layout = IndicatorLayout::from_spec(&spec_for(&sizes, &refs));
        let (lf, psi) = parameters(&layout, &seed);
        let psi = DMatrix::from_diagonal(&psi);
        let h = compute_h(&lf, &psi).unwrap();
        let a = score_error_covariance(&h, &lf, &psi).unwrap();
        let b = score_error_covariance(&h, &lf, &psi).unwrap();
        prop_assert_eq!(&a, &b);
        let d = score_map(&h, &lf).unwrap();
        let full = &d * &psi * d.transpose();
        prop_assert!((&full - &a).amax() <= 1e-10 * full.amax().max(1.0));
        // Scores reproduce the factors: D Λ = I.
        let k = layout.n_factors;
        let mut lambda = DMatrix::zeros(lf.nrows() + k, k);
        lambda.rows_mut(0, lf.nrows()).copy_from(&lf);
        lambda.rows_mut(lf.nrows(), k).fill_with_identity();
        prop_assert!((&d * lambda - DMatrix::<f64>::identity(k, k)).amax() < 1e-10);
        prop_assert!(a.clone().symmetric_eigen().eigenvalues.min() > -1e-12);
    }

    #[test]
    fn canonical_data_ignores_column_order(
        n in 5usize..20,
        rot in 0usize..13,
        seed in 0u64..1000,
    ) {
        let spec = spec_for(&[3, 3, 3], &[0, 1, 2]);
        let mut cols: Vec<String> = spec.factors().iter().flat_map(|f| f.indicators.clone()).collect();
        cols.push("r".into());
        let values = DMatrix::from_fn(n, cols.len(), |i, j| {
            if j + 1 == cols.len() {
                (i % 2) as f64
            } else {
                ((i * 31 + j * 7) as f64 + seed as f64).sin()
            }
        });
        let a = canonicalize(&spec, &Dataset::new(cols.clone(), values.clone()).unwrap()).unwrap();
        let mut order: Vec<usize> = (0..cols.len()).collect();
        order.rotate_left(rot % cols.len());
        let shuffled_cols = order.iter().map(|&j| cols[j].clone()).collect();
        let shuffled = DMatrix::from_fn(n, cols.len(), |i, j| values[(i, order[j])]);
        let b = canonicalize(&spec, &Dataset::new(shuffled_cols, shuffled).unwrap()).unwrap();
        prop_assert_eq!(a.indicators, b.indicators);
        prop_assert_eq!(a.treatment, b.treatment);
        prop_assert_eq!(a.layout.names, b.layout.names);
    }

    #[test]
    fn shrinkage_is_continuous_and_non_increasing(
        n in 10usize..5000,
        tau in 0.0f64..6.0,
        l1 in 0.0f64..3.0,
        l2 in 0.0f64..3.0,
    ) {
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        prop_assert!(shrink_factor(hi, tau, n) <= shrink_factor(lo, tau, n));
        prop_assert!(shrink_factor(hi, tau, n) >= 0.0);
        let kink = 1.0 / (1.0 + 1.0 / n as f64);
        let eps = 1e-9;
        let gap = shrink_factor(kink - eps, tau, n) - shrink_factor(kink + eps, tau, n);
        prop_assert!(gap.abs() < 1e-7);
    }

    #[test]
    fn moment_averages_ignore_row_order(
        n in 4usize..30,
        shift in 1usize..29,
        seed in 0u64..1000,
    ) {
        let scores = DMatrix::from_fn(n, 4, |i, j| ((i * 13 + j * 5) as f64 + seed as f64 * 0.37).cos());
        let r = DVector::from_fn(n, |i, _| if (i + seed as usize) % 2 == 0 { 1.0 } else { -1.0 });
        let wr = DVector::from_fn(n, |i, _| r[i] - r.mean());
        let wm = DVector::from_fn(n, |i, _| wr[i] * (0.3 + 0.2 * scores[(i, 1)]));
        let panel = FactorScorePanel::new(scores.clone(), r.clone()).unwrap();
        let a = weighted_moments(&panel, &wr, &wm).unwrap();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let pick = |v: &DVector<f64>| DVector::from_fn(n, |i, _| v[perm[i]]);
        let ps = DMatrix::from_fn(n, 4, |i, j| scores[(perm[i], j)]);
        let panel_p = FactorScorePanel::new(ps, pick(&r)).unwrap();
        let b = weighted_moments(&panel_p, &pick(&wr), &pick(&wm)).unwrap();
        prop_assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn summaries_ignore_record_order(
        est in prop::collection::vec(prop::option::of(-1.0f64..1.0), 2..40),
        rot in 0usize..40,
    ) {
        let cond = StudyCondition::new(100, 0.0, 0.0, 0.75, 0.1, 0.204);
        let records: Vec<ReplicationRecord> = est
            .iter()
            .enumerate()
            .map(|(rep, e)| ReplicationRecord {
                rep,
                method: Method::GEstimation,
                estimate: *e,
                se: e.map(|_| 0.1),
                z: e.map(|v| v / 0.1),
                p: e.map(|v| wald_test(v, 0.1, 0.05).unwrap().p),
                reject: e.map(|v| wald_test(v, 0.1, 0.05).unwrap().reject),
                failure: if e.is_none() { Some("not-converged".into()) } else { None },
                heywood: rep % 3 == 0,
                weak_interaction: rep % 4 == 0,
                se_unreliable: false,
            })
            .collect();
        let mut shuffled = records.clone();
        let len = shuffled.len();
        shuffled.rotate_left(rot % len);
        shuffled.reverse();
        let a = summarize(0, &cond, Method::GEstimation, &records);
        let b = summarize(0, &cond, Method::GEstimation, &shuffled);
        prop_assert_eq!(a.failures, est.iter().filter(|e| e.is_none()).count());
        // Equal as values; NaN when every replication failed.
        prop_assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }

    #[test]
    fn wald_p_values_fall_with_the_statistic(
        a in 0.0f64..6.0,
        b in 0.0f64..6.0,
        se in 0.01f64..2.0,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let p_lo = wald_test(lo * se, se, 0.05).unwrap().p;
        let p_hi = wald_test(hi * se, se, 0.05).unwrap().p;
        prop_assert!((0.0..=1.0).contains(&p_lo) && (0.0..=1.0).contains(&p_hi));
        prop_assert!(p_hi <= p_lo);
    }

    #[test]
    fn histogram_frequencies_sum_to_one(
        values in prop::collection::vec(-3.0f64..3.0, 1..200),
        width in 0.01f64..1.0,
    ) {
        let bins = histogram_bins(&values, width).unwrap();
        let total: f64 = bins.iter().map(|b| b.rel_freq).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(bins.iter().all(|b| b.rel_freq > 0.0));
    }

    #[test]
    fn resamples_are_in_range_and_prefix_stable(
        n in 1usize..100,
        b in 1usize..10,
        seed in any::<u64>(),
    ) {
        let short = resample_indices(n, b, seed);
        let long = resample_indices(n, b + 3, seed);
        prop_assert_eq!(&short[..], &long[..b]);
        prop_assert!(long.iter().all(|idx| idx.len() == n && idx.iter().all(|&i| i < n)));
    }
}
