//! Full two-stage estimation on one dataset.

use crate::error::Result;
use crate::measurement::{
    factor_scores, fit_cfa, CanonicalData, CfaOptions, FactorScorePanel, MeasurementEstimate,
};
use crate::spec::ModelSpec;
use crate::structural::{
    corrected_regression, g_estimation, Method, StructuralEstimate, StructuralOptions,
};

#[derive(Debug, Clone, Copy, Default)]
pub struct PipelineOptions {
    pub cfa: CfaOptions,
    pub structural: StructuralOptions,
}

/// Measurement fit plus one structural result per method. A failure of one
/// method does not discard the other.
#[derive(Debug)]
pub struct Fit {
    pub measurement: MeasurementEstimate,
    /// Scores as estimated, before centering.
    pub panel: FactorScorePanel,
    pub g_estimation: Result<StructuralEstimate>,
    pub corrected_regression: Result<StructuralEstimate>,
}

impl Fit {
    pub fn estimate(&self, method: Method) -> &Result<StructuralEstimate> {
        match method {
            Method::GEstimation => &self.g_estimation,
            Method::CorrectedRegression => &self.corrected_regression,
        }
    }
}

fn measure(
    data: &CanonicalData,
    opts: &PipelineOptions,
    start: Option<&MeasurementEstimate>,
) -> Result<(MeasurementEstimate, FactorScorePanel)> {
    let measurement = fit_cfa(data, &opts.cfa, start)?;
    let panel = factor_scores(&measurement, data)?;
    Ok((measurement, panel))
}

fn structural(
    spec: &ModelSpec,
    measurement: &MeasurementEstimate,
    centered: &FactorScorePanel,
    method: Method,
    opts: &StructuralOptions,
) -> Result<StructuralEstimate> {
    match method {
        Method::GEstimation => g_estimation(
            centered,
            &measurement.score_error_cov,
            spec.mediator_interactions(),
            opts,
        ),
        Method::CorrectedRegression => {
            corrected_regression(centered, &measurement.score_error_cov, opts)
        }
    }
}

/// Runs the measurement stage once and both structural estimators on the
/// centered scores. `start` warm-starts the factor model.
pub fn fit_all(
    spec: &ModelSpec,
    data: &CanonicalData,
    opts: &PipelineOptions,
    start: Option<&MeasurementEstimate>,
) -> Result<Fit> {
    opts.structural.validate()?;
    let (measurement, panel) = measure(data, opts, start)?;
    let centered = panel.centered();
    let g = structural(
        spec,
        &measurement,
        &centered,
        Method::GEstimation,
        &opts.structural,
    );
    let reg = structural(
        spec,
        &measurement,
        &centered,
        Method::CorrectedRegression,
        &opts.structural,
    );
    Ok(Fit {
        measurement,
        panel,
        g_estimation: g,
        corrected_regression: reg,
    })
}

/// Single-method variant of [`fit_all`].
pub fn fit_method(
    spec: &ModelSpec,
    data: &CanonicalData,
    method: Method,
    opts: &PipelineOptions,
    start: Option<&MeasurementEstimate>,
) -> Result<StructuralEstimate> {
    opts.structural.validate()?;
    let (measurement, panel) = measure(data, opts, start)?;
    structural(
        spec,
        &measurement,
        &panel.centered(),
        method,
        &opts.structural,
    )
}
