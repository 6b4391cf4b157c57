use latmed::inference::{bootstrap, bootstrap_both, resample_indices, wald_test};
use latmed::mc::{run_cell, McOptions};
use latmed::measurement::canonicalize;
use latmed::pipeline::PipelineOptions;
use latmed::simgen::{default_model_spec, generate, StudyCondition};
use latmed::structural::Method;

#[test]
fn bootstrap_se_tracks_sampling_spread_and_covers() {
    // 100 replications with B = 100 at high reliability: the mean bootstrap
    // SE lies within 30% of the Monte Carlo SD and the 95% Wald interval
    // covers the truth in 90 to 99 of them.
    let c = StudyCondition::new(1000, 0.4, 0.0, 0.8, 0.29, 0.204);
    let opts = McOptions {
        master_seed: 17,
        ..McOptions::default()
    };
    let cell = run_cell(0, &c, &opts).unwrap();
    let g: Vec<_> = cell
        .records
        .iter()
        .filter(|r| r.method == Method::GEstimation && r.succeeded())
        .collect();
    assert!(g.len() >= 95);
    let mean_se = g.iter().map(|r| r.se.unwrap()).sum::<f64>() / g.len() as f64;
    let sd = cell.summary(Method::GEstimation).sd_bias;
    let ratio = mean_se / sd;
    assert!(
        (0.7..=1.3).contains(&ratio),
        "mean SE {mean_se}, MC SD {sd}"
    );
    let covered = g
        .iter()
        .filter(|r| (r.estimate.unwrap() - c.theta_m).abs() <= 1.959963984540054 * r.se.unwrap())
        .count();
    let scaled = covered * 100 / g.len();
    assert!(
        (90..=99).contains(&scaled),
        "coverage {covered}/{}",
        g.len()
    );
}

#[test]
fn single_method_bootstrap_matches_pair() {
    let g = generate(&StudyCondition::new(300, 0.2, 0.0, 0.75, 0.3, 0.204).with_seed(2)).unwrap();
    let spec = default_model_spec();
    let data = canonicalize(&spec, &g.data).unwrap();
    let opts = PipelineOptions::default();
    let pair = bootstrap_both(&spec, &data, 5, 8, &opts, None).unwrap();
    for m in Method::ALL {
        let single = bootstrap(&spec, &data, m, 5, 8, &opts).unwrap();
        assert_eq!(&single, pair.get(m).as_ref().unwrap());
    }
}

#[test]
fn resamples_cover_rows_uniformly() {
    let idx = resample_indices(50, 400, 3);
    let mut counts = [0usize; 50];
    for i in idx.iter().flatten() {
        counts[*i] += 1;
    }
    // 400 draws per row on average; a 5 SD band is ±100.
    assert!(
        counts.iter().all(|&c| (300..=500).contains(&c)),
        "{counts:?}"
    );
}

#[test]
fn wald_is_symmetric_in_sign() {
    let a = wald_test(0.3, 0.1, 0.05).unwrap();
    let b = wald_test(-0.3, 0.1, 0.05).unwrap();
    assert_eq!(a.p, b.p);
    assert_eq!(a.z, -b.z);
    assert!(a.reject);
    assert!(!wald_test(0.1, 0.1, 0.05).unwrap().reject);
}
