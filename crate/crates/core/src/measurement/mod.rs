//! Measurement stage: confirmatory factor model with reference-indicator
//! identification, factor scores and the covariance of their estimation
//! error.
//!
//! Indicators are held in a canonical order: every non-reference indicator
//! (factor by factor, in spec order) followed by the `k` reference
//! indicators. Under that order the full loading matrix is
//! `Λ = (Λ_free', I_k)'` and the intercept vector `τ = (τ_free', 0')'`.

mod cfa;
mod scores;

pub use cfa::{fit_cfa, fit_cfa_moments, CfaDiagnostics, CfaOptions, MeasurementEstimate};
pub use scores::{compute_h, factor_scores, score_error_covariance, score_map, FactorScorePanel};

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::spec::ModelSpec;

/// Bookkeeping between the user's indicator order and the canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorLayout {
    /// Indicator names in canonical order.
    pub names: Vec<String>,
    /// `permutation[c]` is the position of the indicator at canonical
    /// position `c` in the user's order: the order of indicator columns in
    /// the data file, or the spec's listing order when built from the spec
    /// alone.
    pub permutation: Vec<usize>,
    /// Factor index of each free (non-reference) indicator, canonical order.
    pub free_factor: Vec<usize>,
    pub n_factors: usize,
}

impl IndicatorLayout {
    pub fn from_spec(spec: &ModelSpec) -> Self {
        let mut user_pos = 0;
        let mut free = Vec::new();
        let mut refs = Vec::new();
        for (f, factor) in spec.factors().iter().enumerate() {
            for ind in &factor.indicators {
                if *ind == factor.reference {
                    refs.push((ind.clone(), user_pos));
                } else {
                    free.push((ind.clone(), user_pos, f));
                }
                user_pos += 1;
            }
        }
        let free_factor = free.iter().map(|(_, _, f)| *f).collect();
        let mut names = Vec::with_capacity(user_pos);
        let mut permutation = Vec::with_capacity(user_pos);
        for (name, pos, _) in free {
            names.push(name);
            permutation.push(pos);
        }
        for (name, pos) in refs {
            names.push(name);
            permutation.push(pos);
        }
        IndicatorLayout {
            names,
            permutation,
            free_factor,
            n_factors: spec.n_factors(),
        }
    }

    pub fn n_indicators(&self) -> usize {
        self.names.len()
    }

    pub fn n_free(&self) -> usize {
        self.names.len() - self.n_factors
    }

    /// Factor measured by the indicator at canonical position `c`.
    pub fn factor_of(&self, c: usize) -> usize {
        if c < self.n_free() {
            self.free_factor[c]
        } else {
            c - self.n_free()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.permutation.iter().enumerate().all(|(i, &p)| i == p)
    }
}

/// Indicator data in canonical column order together with the treatment.
#[derive(Debug, Clone)]
pub struct CanonicalData {
    /// `N × p` indicators, canonical column order.
    pub indicators: DMatrix<f64>,
    pub treatment: DVector<f64>,
    /// Row numbers in the source data.
    pub ids: Vec<usize>,
    pub layout: IndicatorLayout,
}

impl CanonicalData {
    pub fn nrows(&self) -> usize {
        self.indicators.nrows()
    }

    /// Rows selected by `indices` (repeats allowed), keeping source ids.
    pub fn select_rows(&self, indices: &[usize]) -> CanonicalData {
        CanonicalData {
            indicators: self.indicators.select_rows(indices),
            treatment: self.treatment.select_rows(indices),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            layout: self.layout.clone(),
        }
    }
}

/// Reorders the spec's indicator columns so the reference indicators form
/// the trailing block, and extracts the treatment column.
pub fn canonicalize(spec: &ModelSpec, data: &Dataset) -> Result<CanonicalData> {
    let layout = IndicatorLayout::from_spec(spec);
    let mut cols = Vec::with_capacity(layout.n_indicators());
    for name in &layout.names {
        cols.push(
            data.column_index(name)
                .ok_or_else(|| Error::Data(format!("missing column `{name}`")))?,
        );
    }
    let t_col = data
        .column_index(spec.treatment())
        .ok_or_else(|| Error::Data(format!("missing treatment column `{}`", spec.treatment())))?;

    let mut by_data_order: Vec<usize> = (0..cols.len()).collect();
    by_data_order.sort_by_key(|&c| cols[c]);
    let mut layout = layout;
    for (user_pos, &c) in by_data_order.iter().enumerate() {
        layout.permutation[c] = user_pos;
    }

    let values = data.values();
    for &j in cols.iter().chain(std::iter::once(&t_col)) {
        if let Some(row) = values.column(j).iter().position(|v| !v.is_finite()) {
            return Err(Error::MissingValues {
                row: row + 1,
                column: data.columns()[j].clone(),
            });
        }
    }

    Ok(CanonicalData {
        indicators: values.select_columns(&cols),
        treatment: values.column(t_col).into_owned(),
        ids: (0..data.nrows()).collect(),
        layout,
    })
}
