//! Monte Carlo harness: replicated generate → fit → bootstrap → test over
//! grids of simulation conditions.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{format_value, write_atomic};
use crate::error::{Error, Result};
use crate::inference::{bootstrap_both, wald_test, BootstrapPair};
use crate::measurement::canonicalize;
use crate::pipeline::{fit_all, Fit, PipelineOptions};
use crate::simgen::{default_model_spec, generate, replication_seed, StudyCondition};
use crate::structural::Method;

/// Index of the mediator effect in `θ`.
const THETA_M: usize = 1;

#[derive(Debug, Clone, Copy)]
pub struct McOptions {
    pub reps: usize,
    pub bootstrap: usize,
    pub alpha: f64,
    pub master_seed: u64,
    pub pipeline: PipelineOptions,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions {
            reps: 100,
            bootstrap: 100,
            alpha: 0.05,
            master_seed: 1,
            pipeline: PipelineOptions::default(),
        }
    }
}

impl McOptions {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::InvalidArgument(
                "need at least one replication".into(),
            ));
        }
        if self.bootstrap < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 bootstrap samples, got {}",
                self.bootstrap
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha = {} outside (0, 1)",
                self.alpha
            )));
        }
        self.pipeline.structural.validate()
    }
}

/// Outcome of one method in one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub method: Method,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub z: Option<f64>,
    pub p: Option<f64>,
    pub reject: Option<bool>,
    /// Error kind when the replication failed.
    pub failure: Option<String>,
    pub heywood: bool,
    pub weak_interaction: bool,
    pub se_unreliable: bool,
}

impl ReplicationRecord {
    fn failed(rep: usize, method: Method, kind: &str, heywood: bool) -> Self {
        ReplicationRecord {
            rep,
            method,
            estimate: None,
            se: None,
            z: None,
            p: None,
            reject: None,
            failure: Some(kind.to_owned()),
            heywood,
            weak_interaction: false,
            se_unreliable: false,
        }
    }

    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }

    pub fn flags(&self) -> String {
        let mut flags: Vec<&str> = Vec::new();
        if let Some(kind) = &self.failure {
            flags.push(kind);
        }
        if self.heywood {
            flags.push("heywood");
        }
        if self.weak_interaction {
            flags.push("weak-interaction");
        }
        if self.se_unreliable {
            flags.push("se-unreliable");
        }
        flags.join(";")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub condition_id: usize,
    pub condition: StudyCondition,
    pub method: Method,
    pub reps: usize,
    pub failures: usize,
    pub heywood: usize,
    pub weak_interaction: usize,
    /// Mean of `θ̌_m − θ_m` over successful replications.
    pub mean_bias: f64,
    pub sd_bias: f64,
    pub mean_abs_bias: f64,
    /// Share of successful replications rejecting `θ_m = 0`: the false
    /// positive rate when `θ_m = 0`, power otherwise.
    pub rejection_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub condition_id: usize,
    pub condition: StudyCondition,
    /// One summary per method, in [`Method::ALL`] order.
    pub summaries: Vec<McSummary>,
    /// Sorted by replication, then method.
    pub records: Vec<ReplicationRecord>,
}

impl CellResult {
    pub fn summary(&self, method: Method) -> &McSummary {
        self.summaries
            .iter()
            .find(|s| s.method == method)
            .expect("every method is summarized")
    }
}

/// Aggregates records of one method; the input order does not matter.
pub fn summarize(
    condition_id: usize,
    condition: &StudyCondition,
    method: Method,
    records: &[ReplicationRecord],
) -> McSummary {
    let mut mine: Vec<&ReplicationRecord> = records.iter().filter(|r| r.method == method).collect();
    mine.sort_by_key(|r| r.rep);
    let ok: Vec<&ReplicationRecord> = mine.iter().copied().filter(|r| r.succeeded()).collect();
    let bias: Vec<f64> = ok
        .iter()
        .map(|r| r.estimate.expect("successful record has an estimate") - condition.theta_m)
        .collect();
    let s = bias.len() as f64;
    let (mean_bias, sd_bias, mean_abs_bias, rejection_rate) = if bias.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
    } else {
        let mean = bias.iter().sum::<f64>() / s;
        let sd = if bias.len() > 1 {
            (bias.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (s - 1.0)).sqrt()
        } else {
            f64::NAN
        };
        let abs = bias.iter().map(|b| b.abs()).sum::<f64>() / s;
        let rate = ok.iter().filter(|r| r.reject == Some(true)).count() as f64 / s;
        (mean, sd, abs, rate)
    };
    McSummary {
        condition_id,
        condition: condition.clone(),
        method,
        reps: mine.len(),
        failures: mine.len() - ok.len(),
        heywood: mine.iter().filter(|r| r.heywood).count(),
        weak_interaction: mine.iter().filter(|r| r.weak_interaction).count(),
        mean_bias,
        sd_bias,
        mean_abs_bias,
        rejection_rate,
    }
}

fn method_record(
    rep: usize,
    method: Method,
    fit: &Fit,
    boot: &BootstrapPair,
    alpha: f64,
) -> ReplicationRecord {
    let heywood = fit.measurement.diagnostics.is_heywood();
    let est = match fit.estimate(method) {
        Ok(e) => e,
        Err(e) => return ReplicationRecord::failed(rep, method, e.kind(), heywood),
    };
    let b = match boot.get(method) {
        Ok(b) => b,
        Err(e) => return ReplicationRecord::failed(rep, method, e.kind(), heywood),
    };
    let theta_m = est.theta[THETA_M];
    let se = b.se[THETA_M];
    let test = match wald_test(theta_m, se, alpha) {
        Ok(t) => t,
        Err(e) => return ReplicationRecord::failed(rep, method, e.kind(), heywood),
    };
    ReplicationRecord {
        rep,
        method,
        estimate: Some(theta_m),
        se: Some(se),
        z: Some(test.z),
        p: Some(test.p),
        reject: Some(test.reject),
        failure: None,
        heywood,
        weak_interaction: est.diagnostics.weak_interaction,
        se_unreliable: b.unreliable,
    }
}

/// Both methods on replication `rep` of a condition. The data seed depends
/// on `(master_seed, rep)` only; both methods see the same data and the same
/// bootstrap resamples.
pub fn run_replication(
    condition: &StudyCondition,
    rep: usize,
    opts: &McOptions,
) -> Vec<ReplicationRecord> {
    let seed = replication_seed(opts.master_seed, rep as u64);
    let fail_all = |kind: &str, heywood: bool| {
        Method::ALL
            .iter()
            .map(|&m| ReplicationRecord::failed(rep, m, kind, heywood))
            .collect()
    };
    let cond = condition.clone().with_seed(seed);
    let generated = match generate(&cond) {
        Ok(g) => g,
        Err(e) => return fail_all(e.kind(), false),
    };
    let spec = default_model_spec();
    let data = match canonicalize(&spec, &generated.data) {
        Ok(d) => d,
        Err(e) => return fail_all(e.kind(), false),
    };
    let fit = match fit_all(&spec, &data, &opts.pipeline, None) {
        Ok(f) => f,
        Err(e) => return fail_all(e.kind(), false),
    };
    let boot_seed = replication_seed(seed, 0);
    let boot = match bootstrap_both(
        &spec,
        &data,
        opts.bootstrap,
        boot_seed,
        &opts.pipeline,
        Some(&fit.measurement),
    ) {
        Ok(b) => b,
        Err(e) => return fail_all(e.kind(), fit.measurement.diagnostics.is_heywood()),
    };
    Method::ALL
        .iter()
        .map(|&m| method_record(rep, m, &fit, &boot, opts.alpha))
        .collect()
}

pub fn run_cell(
    condition_id: usize,
    condition: &StudyCondition,
    opts: &McOptions,
) -> Result<CellResult> {
    opts.validate()?;
    condition.validate()?;
    let records: Vec<ReplicationRecord> = (0..opts.reps)
        .into_par_iter()
        .map(|rep| run_replication(condition, rep, opts))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let summaries = Method::ALL
        .iter()
        .map(|&m| summarize(condition_id, condition, m, &records))
        .collect();
    Ok(CellResult {
        condition_id,
        condition: condition.clone(),
        summaries,
        records,
    })
}

pub const SELECTOR_KEYS: [&str; 6] = ["n", "delta_u", "delta_ur", "kappa", "theta_m", "gamma_xr"];

/// A `key=value` filter on grid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Selector {
    pub key: String,
    pub value: f64,
}

impl std::str::FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (key, value) = s.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("selector `{s}` is not of the form key=value"))
        })?;
        let key = key.trim().to_ascii_lowercase();
        if !SELECTOR_KEYS.contains(&key.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "unknown selector key `{key}`; valid keys: {}",
                SELECTOR_KEYS.join(", ")
            )));
        }
        let value = value.trim().parse().map_err(|_| {
            Error::InvalidArgument(format!("selector `{s}`: `{value}` is not a number"))
        })?;
        Ok(Selector { key, value })
    }
}

impl Selector {
    pub fn matches(&self, c: &StudyCondition) -> bool {
        let actual = match self.key.as_str() {
            "n" => c.n as f64,
            "delta_u" => c.delta_u,
            "delta_ur" => c.delta_ur,
            "kappa" => c.kappa,
            "theta_m" => c.theta_m,
            "gamma_xr" => c.gamma_xr,
            _ => return false,
        };
        (actual - self.value).abs() <= 1e-9 * self.value.abs().max(1.0)
    }
}

/// Cells matching every selector, paired with their grid index.
pub fn select(grid: &[StudyCondition], selectors: &[Selector]) -> Vec<(usize, StudyCondition)> {
    grid.iter()
        .enumerate()
        .filter(|(_, c)| selectors.iter().all(|s| s.matches(c)))
        .map(|(i, c)| (i, c.clone()))
        .collect()
}

/// Runs every selected cell in grid order.
pub fn run_grid(
    grid: &[StudyCondition],
    selectors: &[Selector],
    opts: &McOptions,
) -> Result<Vec<CellResult>> {
    opts.validate()?;
    select(grid, selectors)
        .iter()
        .map(|(id, c)| run_cell(*id, c, opts))
        .collect()
}

fn opt_value(v: Option<f64>) -> String {
    v.map(format_value).unwrap_or_else(|| "NA".to_owned())
}

pub fn summary_csv(cells: &[CellResult]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "condition_id",
        "n",
        "delta_u",
        "delta_ur",
        "kappa",
        "theta_m",
        "gamma_xr",
        "method",
        "reps",
        "failures",
        "heywood",
        "weak_interaction",
        "mean_bias",
        "sd_bias",
        "mean_abs_bias",
        "rejection_rate",
    ])?;
    for cell in cells {
        for s in &cell.summaries {
            let c = &s.condition;
            w.write_record([
                s.condition_id.to_string(),
                c.n.to_string(),
                format_value(c.delta_u),
                format_value(c.delta_ur),
                format_value(c.kappa),
                format_value(c.theta_m),
                format_value(c.gamma_xr),
                s.method.label().to_owned(),
                s.reps.to_string(),
                s.failures.to_string(),
                s.heywood.to_string(),
                s.weak_interaction.to_string(),
                format_value(s.mean_bias),
                format_value(s.sd_bias),
                format_value(s.mean_abs_bias),
                format_value(s.rejection_rate),
            ])?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn replications_csv(cells: &[CellResult]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "condition_id",
        "rep",
        "method",
        "estimate",
        "se",
        "z",
        "p",
        "reject",
        "flags",
    ])?;
    for cell in cells {
        for r in &cell.records {
            w.write_record([
                cell.condition_id.to_string(),
                r.rep.to_string(),
                r.method.label().to_owned(),
                opt_value(r.estimate),
                opt_value(r.se),
                opt_value(r.z),
                opt_value(r.p),
                r.reject.map_or("NA".to_owned(), |b| (b as u8).to_string()),
                r.flags(),
            ])?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Writes `summary.csv` and `replications.csv` into `dir`.
pub fn write_outputs(dir: impl AsRef<Path>, cells: &[CellResult]) -> Result<()> {
    let dir = dir.as_ref();
    write_atomic(dir.join("summary.csv"), &summary_csv(cells)?)?;
    write_atomic(dir.join("replications.csv"), &replications_csv(cells)?)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub rel_freq: f64,
}

/// Relative-frequency histogram on the lattice `[i·w, (i+1)·w)`; only
/// non-empty bins are returned, in increasing order.
pub fn histogram_bins(values: &[f64], bin_width: f64) -> Result<Vec<Bin>> {
    if !(bin_width > 0.0) || !bin_width.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "bin width must be positive and finite, got {bin_width}"
        )));
    }
    if values.is_empty() {
        return Err(Error::InvalidArgument("no values to bin".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite value {v}")));
    }
    let mut counts = std::collections::BTreeMap::<i64, usize>::new();
    for v in values {
        *counts.entry((v / bin_width).floor() as i64).or_default() += 1;
    }
    let n = values.len() as f64;
    Ok(counts
        .into_iter()
        .map(|(i, c)| Bin {
            lower: i as f64 * bin_width,
            upper: (i + 1) as f64 * bin_width,
            rel_freq: c as f64 / n,
        })
        .collect())
}

pub fn bins_csv(bins: &[Bin]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["lower", "upper", "rel_freq"])?;
    for b in bins {
        w.write_record([
            format_value(b.lower),
            format_value(b.upper),
            format_value(b.rel_freq),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}
