//! Declarative model description: which indicators measure which factor,
//! the role each factor plays, and the treatment-covariate interactions
//! entering the mediator model.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Mediator,
    Covariate,
    Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub name: String,
    pub role: Role,
    pub indicators: Vec<String>,
    /// Indicator whose loading is fixed to 1 and intercept to 0.
    pub reference: String,
}

/// Reference to a covariate factor, either by position among the covariates
/// or by factor name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovariateRef {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, Deserialize)]
struct RawModelSpec {
    factors: Vec<FactorSpec>,
    treatment: String,
    #[serde(default)]
    mediator_interactions: Vec<CovariateRef>,
}

/// A validated model specification.
///
/// Factors are held in the order mediator, covariates (in the order given),
/// outcome. `mediator_interactions` holds indices into the covariate list.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSpec {
    factors: Vec<FactorSpec>,
    treatment: String,
    mediator_interactions: Vec<usize>,
}

impl ModelSpec {
    pub fn new(
        factors: Vec<FactorSpec>,
        treatment: impl Into<String>,
        interactions: Vec<CovariateRef>,
    ) -> Result<Self> {
        let treatment = treatment.into();
        let mut mediator = Vec::new();
        let mut covariates = Vec::new();
        let mut outcome = Vec::new();
        for f in factors {
            match f.role {
                Role::Mediator => mediator.push(f),
                Role::Covariate => covariates.push(f),
                Role::Outcome => outcome.push(f),
            }
        }
        if mediator.len() != 1 {
            return Err(Error::Spec(format!(
                "exactly one mediator factor required, found {}",
                mediator.len()
            )));
        }
        if outcome.len() != 1 {
            return Err(Error::Spec(format!(
                "exactly one outcome factor required, found {}",
                outcome.len()
            )));
        }
        if covariates.is_empty() {
            return Err(Error::Spec("at least one covariate factor required".into()));
        }

        let mut ordered = mediator;
        ordered.extend(covariates);
        ordered.extend(outcome);

        let mut factor_names = HashSet::new();
        let mut seen = HashSet::new();
        for f in &ordered {
            if !factor_names.insert(f.name.as_str()) {
                return Err(Error::Spec(format!("duplicate factor name `{}`", f.name)));
            }
            if f.indicators.len() < 2 {
                return Err(Error::Spec(format!(
                    "factor `{}` needs at least 2 indicators, has {}",
                    f.name,
                    f.indicators.len()
                )));
            }
            if !f.indicators.contains(&f.reference) {
                return Err(Error::Spec(format!(
                    "reference `{}` is not an indicator of factor `{}`",
                    f.reference, f.name
                )));
            }
            for ind in &f.indicators {
                if !seen.insert(ind.as_str()) {
                    return Err(Error::Spec(format!(
                        "indicator `{ind}` is assigned more than once"
                    )));
                }
            }
        }
        if seen.contains(treatment.as_str()) {
            return Err(Error::Spec(format!(
                "treatment column `{treatment}` is also listed as an indicator"
            )));
        }

        let n_cov = ordered.len() - 2;
        let mut resolved = Vec::with_capacity(interactions.len());
        for r in interactions {
            let idx = match r {
                CovariateRef::Index(i) if i < n_cov => i,
                CovariateRef::Index(i) => {
                    return Err(Error::Spec(format!(
                        "interaction index {i} out of range ({n_cov} covariates)"
                    )))
                }
                CovariateRef::Name(name) => ordered[1..=n_cov]
                    .iter()
                    .position(|f| f.name == name)
                    .ok_or_else(|| {
                        Error::Spec(format!("interaction `{name}` is not a covariate factor"))
                    })?,
            };
            if resolved.contains(&idx) {
                return Err(Error::Spec(format!("interaction {idx} listed twice")));
            }
            resolved.push(idx);
        }

        Ok(ModelSpec {
            factors: ordered,
            treatment,
            mediator_interactions: resolved,
        })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: RawModelSpec = serde_json::from_str(s).map_err(|e| Error::Spec(e.to_string()))?;
        Self::new(raw.factors, raw.treatment, raw.mediator_interactions)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("model spec serializes")
    }

    pub fn factors(&self) -> &[FactorSpec] {
        &self.factors
    }

    pub fn treatment(&self) -> &str {
        &self.treatment
    }

    /// Indices into the covariate list.
    pub fn mediator_interactions(&self) -> &[usize] {
        &self.mediator_interactions
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.factors.len() - 2
    }

    pub fn n_indicators(&self) -> usize {
        self.factors.iter().map(|f| f.indicators.len()).sum()
    }

    /// Indicators in the order they are listed, factor by factor.
    pub fn indicators(&self) -> impl Iterator<Item = &str> {
        self.factors
            .iter()
            .flat_map(|f| f.indicators.iter().map(String::as_str))
    }

    pub fn mediator_index(&self) -> usize {
        0
    }

    pub fn covariate_index(&self, j: usize) -> usize {
        1 + j
    }

    pub fn outcome_index(&self) -> usize {
        self.factors.len() - 1
    }
}
