//! Nonparametric bootstrap over subject rows and normal-reference Wald tests.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::measurement::{CanonicalData, MeasurementEstimate};
use crate::pipeline::{fit_all, PipelineOptions};
use crate::spec::ModelSpec;
use crate::structural::{Method, StructuralEstimate};

/// Share of failed replicates above which standard errors are flagged.
pub const UNRELIABLE_FAILURE_SHARE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub method: Method,
    /// Estimate per replicate in replicate order; `None` when that replicate
    /// failed.
    pub estimates: Vec<Option<DVector<f64>>>,
    pub failures: usize,
    /// Standard deviation (divisor `successes − 1`) of each parameter over
    /// the successful replicates.
    pub se: DVector<f64>,
    pub unreliable: bool,
}

impl BootstrapResult {
    pub fn replicates(&self) -> usize {
        self.estimates.len()
    }

    pub fn successes(&self) -> usize {
        self.estimates.len() - self.failures
    }

    fn from_estimates(method: Method, estimates: Vec<Option<DVector<f64>>>) -> Result<Self> {
        let ok: Vec<&DVector<f64>> = estimates.iter().flatten().collect();
        if ok.len() < 2 {
            return Err(Error::Numerical(format!(
                "{method}: {} of {} bootstrap replicates succeeded; at least two are needed",
                ok.len(),
                estimates.len()
            )));
        }
        let q = ok[0].len();
        let s = ok.len() as f64;
        let mean = ok.iter().fold(DVector::zeros(q), |acc, v| acc + *v) / s;
        let ss = ok.iter().fold(DVector::zeros(q), |acc: DVector<f64>, v| {
            let d = *v - &mean;
            acc + d.component_mul(&d)
        });
        let se = (ss / (s - 1.0)).map(f64::sqrt);
        let failures = estimates.len() - ok.len();
        let unreliable = failures as f64 > UNRELIABLE_FAILURE_SHARE * estimates.len() as f64;
        Ok(BootstrapResult {
            method,
            estimates,
            failures,
            se,
            unreliable,
        })
    }
}

/// Bootstrap results for both methods computed on shared resamples.
#[derive(Debug)]
pub struct BootstrapPair {
    pub g_estimation: Result<BootstrapResult>,
    pub corrected_regression: Result<BootstrapResult>,
}

impl BootstrapPair {
    pub fn get(&self, method: Method) -> &Result<BootstrapResult> {
        match method {
            Method::GEstimation => &self.g_estimation,
            Method::CorrectedRegression => &self.corrected_regression,
        }
    }
}

/// Row indices for `b` resamples of `n` subjects. Replicate `i` draws from
/// its own stream of the seed, so the indices do not depend on `b`.
pub fn resample_indices(n: usize, b: usize, seed: u64) -> Vec<Vec<usize>> {
    (0..b)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            (0..n).map(|_| rng.gen_range(0..n)).collect()
        })
        .collect()
}

/// Reruns the full pipeline on each supplied resample. Replicates run in
/// parallel on the current rayon pool; results are kept in replicate order.
pub fn bootstrap_from_indices(
    spec: &ModelSpec,
    data: &CanonicalData,
    indices: &[Vec<usize>],
    opts: &PipelineOptions,
    start: Option<&MeasurementEstimate>,
) -> Result<BootstrapPair> {
    if indices.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "bootstrap needs at least 2 replicates, got {}",
            indices.len()
        )));
    }
    opts.structural.validate()?;
    let n = data.nrows();
    if let Some(bad) = indices.iter().flatten().find(|&&i| i >= n) {
        return Err(Error::Dimension(format!(
            "resample index {bad} for {n} rows"
        )));
    }
    let per_rep: Vec<[Option<DVector<f64>>; 2]> = indices
        .par_iter()
        .map(|idx| {
            let sample = data.select_rows(idx);
            match fit_all(spec, &sample, opts, start) {
                Ok(fit) => Method::ALL.map(|m| theta_of(fit.estimate(m))),
                Err(_) => [None, None],
            }
        })
        .collect();
    let column = |k: usize| per_rep.iter().map(|r| r[k].clone()).collect::<Vec<_>>();
    Ok(BootstrapPair {
        g_estimation: BootstrapResult::from_estimates(Method::ALL[0], column(0)),
        corrected_regression: BootstrapResult::from_estimates(Method::ALL[1], column(1)),
    })
}

fn theta_of(est: &Result<StructuralEstimate>) -> Option<DVector<f64>> {
    est.as_ref().ok().map(|e| e.theta.clone())
}

/// `b` row resamples with the full pipeline rerun on each, both methods.
pub fn bootstrap_both(
    spec: &ModelSpec,
    data: &CanonicalData,
    b: usize,
    seed: u64,
    opts: &PipelineOptions,
    start: Option<&MeasurementEstimate>,
) -> Result<BootstrapPair> {
    let indices = resample_indices(data.nrows(), b, seed);
    bootstrap_from_indices(spec, data, &indices, opts, start)
}

/// Single-method bootstrap.
pub fn bootstrap(
    spec: &ModelSpec,
    data: &CanonicalData,
    method: Method,
    b: usize,
    seed: u64,
    opts: &PipelineOptions,
) -> Result<BootstrapResult> {
    let pair = bootstrap_both(spec, data, b, seed, opts, None)?;
    match method {
        Method::GEstimation => pair.g_estimation,
        Method::CorrectedRegression => pair.corrected_regression,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaldTest {
    pub z: f64,
    pub p: f64,
    pub reject: bool,
}

/// Two-sided test of a zero parameter against the standard normal.
pub fn wald_test(estimate: f64, se: f64, alpha: f64) -> Result<WaldTest> {
    if !(se > 0.0) || !se.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "standard error must be positive and finite, got {se}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha = {alpha} outside (0, 1)"
        )));
    }
    if !estimate.is_finite() {
        return Err(Error::Numerical(format!("non-finite estimate {estimate}")));
    }
    let z = estimate / se;
    let p = erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0);
    Ok(WaldTest {
        z,
        p,
        reject: p < alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::canonicalize;
    use crate::simgen::{default_model_spec, generate, StudyCondition};

    #[test]
    fn wald_examples() {
        let t = wald_test(0.0, 1.0, 0.05).unwrap();
        assert_eq!(t.p, 1.0);
        assert!(!t.reject);
        let t = wald_test(1.959963984540054 * 0.2, 0.2, 0.05).unwrap();
        assert!((t.p - 0.05).abs() < 1e-9, "{}", t.p);
        let t = wald_test(0.41, 0.1, 0.05).unwrap();
        assert!((t.z - 4.1).abs() < 1e-12);
        assert!(t.reject);
        assert!((t.p - 4.1315013825093434e-5).abs() < 1e-12, "{}", t.p);
        assert!(wald_test(1.0, 0.0, 0.05).is_err());
        assert!(wald_test(1.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn resample_streams_are_prefix_stable() {
        let a = resample_indices(30, 5, 9);
        let b = resample_indices(30, 8, 9);
        assert_eq!(a[..], b[..5]);
        assert_ne!(a[0], a[1]);
        assert!(a.iter().flatten().all(|&i| i < 30));
    }

    fn sim_data(seed: u64) -> (ModelSpec, CanonicalData) {
        let cond = StudyCondition::new(300, 0.0, 0.0, 0.75, 0.3, 0.204).with_seed(seed);
        let g = generate(&cond).unwrap();
        let spec = default_model_spec();
        let data = canonicalize(&spec, &g.data).unwrap();
        (spec, data)
    }

    #[test]
    fn identical_resamples_give_zero_se() {
        let (spec, data) = sim_data(3);
        let idx = resample_indices(data.nrows(), 1, 5);
        let both = vec![idx[0].clone(), idx[0].clone()];
        let pair =
            bootstrap_from_indices(&spec, &data, &both, &PipelineOptions::default(), None).unwrap();
        for m in Method::ALL {
            let r = pair.get(m).as_ref().unwrap();
            assert_eq!(r.failures, 0);
            assert!(r.se.iter().all(|&s| s == 0.0));
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let (spec, data) = sim_data(4);
        let opts = PipelineOptions::default();
        let a = bootstrap(&spec, &data, Method::GEstimation, 6, 77, &opts).unwrap();
        let b = bootstrap(&spec, &data, Method::GEstimation, 6, 77, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.replicates(), 6);
        assert_eq!(a.successes() + a.failures, 6);
        assert!(a.se.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn too_few_replicates_rejected() {
        let (spec, data) = sim_data(5);
        let opts = PipelineOptions::default();
        assert!(bootstrap(&spec, &data, Method::GEstimation, 1, 0, &opts).is_err());
    }

    #[test]
    fn all_failures_is_an_error() {
        let r = BootstrapResult::from_estimates(Method::GEstimation, vec![None, None, None]);
        assert!(r.is_err());
        let r = BootstrapResult::from_estimates(
            Method::GEstimation,
            vec![
                Some(DVector::from_vec(vec![1.0])),
                Some(DVector::from_vec(vec![3.0])),
                None,
            ],
        )
        .unwrap();
        assert_eq!(r.failures, 1);
        assert!(r.unreliable);
        assert!((r.se[0] - 2f64.sqrt()).abs() < 1e-15);
    }
}
