//! `latmed` command-line front end.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 numerical.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latmed::data::{format_value, write_atomic};
use latmed::inference::{bootstrap_both, wald_test, BootstrapPair};
use latmed::mc::{self, McOptions, Selector};
use latmed::measurement::canonicalize;
use latmed::pipeline::{fit_all, Fit, PipelineOptions};
use latmed::simgen::{self, ExcessVariance, StudyCondition};
use latmed::structural::{Method, StructuralOptions};
use latmed::{Dataset, Error, ModelSpec, Result};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(
    name = "latmed",
    version,
    about = "Latent-variable mediation analysis with g-estimation"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate the structural model on a dataset.
    Fit(FitArgs),
    /// Write one simulated dataset.
    Simulate(SimulateArgs),
    /// Run a Monte Carlo study over a condition grid.
    Mc(McArgs),
}

#[derive(Args, Debug, Clone)]
struct Tuning {
    /// Shrinkage constant, in [0, 6].
    #[arg(long, default_value_t = 5.0)]
    tau: f64,
    /// Ridge term added to the moment matrix.
    #[arg(long, default_value_t = 1e-4)]
    ridge: f64,
    /// Bootstrap samples.
    #[arg(long, default_value_t = 100)]
    bootstrap: usize,
    /// Significance level.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Master seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl Tuning {
    fn pipeline(&self) -> Result<PipelineOptions> {
        let structural = StructuralOptions {
            tau: self.tau,
            ridge: self.ridge,
        };
        structural.validate()?;
        if self.bootstrap < 2 {
            return Err(Error::InvalidArgument(format!(
                "--bootstrap must be at least 2, got {}",
                self.bootstrap
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "--alpha {} outside (0, 1)",
                self.alpha
            )));
        }
        Ok(PipelineOptions {
            structural,
            ..Default::default()
        })
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Data CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Model specification (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Directory for estimates.csv and diagnostics.json.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    tuning: Tuning,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Output directory for data.csv, true_scores.csv and model.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 0.0)]
    delta_u: f64,
    #[arg(long, default_value_t = 0.0)]
    delta_ur: f64,
    #[arg(long, default_value_t = 0.75)]
    kappa: f64,
    #[arg(long, default_value_t = 0.0)]
    theta_m: f64,
    #[arg(long, default_value_t = 0.204)]
    gamma_xr: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Skip the true-score side file.
    #[arg(long)]
    no_truth: bool,
    /// Use a zero residual when the coefficients explain more than unit
    /// variance instead of rejecting the condition.
    #[arg(long)]
    zero_excess_residual: bool,
}

#[derive(Args, Debug)]
struct McArgs {
    /// Simulation study: 1 (robustness) or 2 (power).
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    study: u8,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Replications per cell.
    #[arg(long, default_value_t = 100)]
    reps: usize,
    /// Cell filter `key=value`; repeatable. Keys: n, delta_u, delta_ur,
    /// kappa, theta_m, gamma_xr.
    #[arg(long = "select")]
    select: Vec<String>,
    /// Width of the bias histogram bins.
    #[arg(long, default_value_t = 0.05)]
    bin_width: f64,
    #[command(flatten)]
    tuning: Tuning,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = e.category();
            eprintln!("error[{}/{}]: {e}", category_name(cat), e.kind());
            ExitCode::from(cat.exit_code() as u8)
        }
    }
}

fn category_name(c: latmed::ErrorCategory) -> &'static str {
    match c {
        latmed::ErrorCategory::Usage => "usage",
        latmed::ErrorCategory::Data => "data",
        latmed::ErrorCategory::Numerical => "numerical",
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::InvalidArgument("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Mc(a) => cmd_mc(a),
    }
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let opts = args.tuning.pipeline()?;
    let spec = ModelSpec::from_path(&args.model)?;
    let dataset = Dataset::from_csv_path(&args.data)?;
    let data = canonicalize(&spec, &dataset)?;
    let fit = fit_all(&spec, &data, &opts, None)?;
    let boot = bootstrap_both(
        &spec,
        &data,
        args.tuning.bootstrap,
        args.tuning.seed,
        &opts,
        Some(&fit.measurement),
    )?;

    let table = estimates_table(&fit, &boot, args.tuning.alpha)?;
    print_summary(&spec, &fit, &boot, &table);
    if let Some(dir) = &args.out {
        write_atomic(dir.join("estimates.csv"), &estimates_csv(&table)?)?;
        let diag = serde_json::to_vec_pretty(&diagnostics_json(&spec, &fit, &boot))?;
        write_atomic(dir.join("diagnostics.json"), &diag)?;
    }
    // The first method that failed decides the exit status.
    let Fit {
        g_estimation,
        corrected_regression,
        ..
    } = fit;
    g_estimation?;
    corrected_regression?;
    Ok(())
}

struct Row {
    parameter: String,
    method: Method,
    estimate: f64,
    se: Option<f64>,
    z: Option<f64>,
    p: Option<f64>,
}

fn estimates_table(fit: &Fit, boot: &BootstrapPair, alpha: f64) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    for m in Method::ALL {
        let Ok(est) = fit.estimate(m) else { continue };
        let se = boot.get(m).as_ref().ok().map(|b| &b.se);
        for (i, name) in est.parameter_names().into_iter().enumerate() {
            let s = se.map(|s| s[i]).filter(|s| *s > 0.0);
            let test = s.map(|s| wald_test(est.theta[i], s, alpha)).transpose()?;
            rows.push(Row {
                parameter: name,
                method: m,
                estimate: est.theta[i],
                se: s,
                z: test.map(|t| t.z),
                p: test.map(|t| t.p),
            });
        }
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(format_value).unwrap_or_else(|| "NA".into())
}

fn estimates_csv(rows: &[Row]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["parameter", "method", "estimate", "se", "z", "p"])?;
    for r in rows {
        w.write_record([
            r.parameter.clone(),
            r.method.label().to_owned(),
            format_value(r.estimate),
            opt(r.se),
            opt(r.z),
            opt(r.p),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn diagnostics_json(spec: &ModelSpec, fit: &Fit, boot: &BootstrapPair) -> serde_json::Value {
    let m = &fit.measurement;
    let d = &m.diagnostics;
    let heywood: Vec<&str> = d
        .heywood
        .iter()
        .map(|&c| m.layout.names[c].as_str())
        .collect();
    let methods: Vec<serde_json::Value> = Method::ALL
        .iter()
        .map(|&method| {
            let b = boot.get(method);
            let bootstrap = match b {
                Ok(b) => json!({
                    "replicates": b.replicates(),
                    "failures": b.failures,
                    "unreliable": b.unreliable,
                }),
                Err(e) => json!({ "error": e.to_string() }),
            };
            match fit.estimate(method) {
                Ok(e) => json!({
                    "method": method.label(),
                    "correction_eigenvalue": e.correction_eigenvalue,
                    "shrink_factor": e.shrink_factor,
                    "tau": e.tau,
                    "ridge": e.ridge,
                    "condition_number": e.diagnostics.condition_number,
                    "collinearity_sin": e.diagnostics.collinearity_sin,
                    "interaction_f": e.diagnostics.interaction_f,
                    "weak_interaction": e.diagnostics.weak_interaction,
                    "mediator": e.mediator.as_ref().map(|g| {
                        g.names().into_iter().zip(g.gamma.iter().map(|&v| serde_json::Value::from(v))).collect::<serde_json::Map<_, _>>()
                    }),
                    "bootstrap": bootstrap,
                }),
                Err(err) => json!({
                    "method": method.label(),
                    "error": err.to_string(),
                    "kind": err.kind(),
                }),
            }
        })
        .collect();
    let loadings: serde_json::Map<String, serde_json::Value> = m
        .layout
        .names
        .iter()
        .zip(m.loadings())
        .map(|(n, l)| (n.clone(), json!(l)))
        .collect();
    let factors: Vec<&str> = spec.factors().iter().map(|f| f.name.as_str()).collect();
    json!({
        "n_obs": d.n_obs,
        "factors": factors,
        "measurement": {
            "iterations": d.iterations,
            "objective": d.objective,
            "initial_objective": d.initial_objective,
            "grad_inf_norm": d.grad_inf_norm,
            "heywood": heywood,
            "loadings": loadings,
            "residual_variances": m.layout.names.iter().zip(m.psi.iter()).map(|(n, v)| (n.clone(), json!(v))).collect::<serde_json::Map<_, _>>(),
            "score_error_cov": (0..m.score_error_cov.nrows()).map(|i| m.score_error_cov.row(i).iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>(),
        },
        "structural": methods,
    })
}

fn print_summary(spec: &ModelSpec, fit: &Fit, boot: &BootstrapPair, rows: &[Row]) {
    let d = &fit.measurement.diagnostics;
    println!(
        "N = {}, {} factors, {} indicators; factor model converged in {} iterations (F = {:.6})",
        d.n_obs,
        spec.n_factors(),
        spec.n_indicators(),
        d.iterations,
        d.objective
    );
    if d.is_heywood() {
        let names: Vec<&str> = d
            .heywood
            .iter()
            .map(|&c| fit.measurement.layout.names[c].as_str())
            .collect();
        println!(
            "warning: residual variance at the lower bound for {}",
            names.join(", ")
        );
    }
    println!();
    println!(
        "{:<22} {:<10} {:>10} {:>10} {:>8} {:>10}",
        "method", "parameter", "estimate", "se", "z", "p"
    );
    for r in rows {
        let f = |v: Option<f64>, p: usize| v.map_or("NA".to_owned(), |v| format!("{v:.p$}"));
        println!(
            "{:<22} {:<10} {:>10.4} {:>10} {:>8} {:>10}",
            r.method.label(),
            r.parameter,
            r.estimate,
            f(r.se, 4),
            f(r.z, 2),
            f(r.p, 4)
        );
    }
    println!();
    for m in Method::ALL {
        match fit.estimate(m) {
            Ok(e) => {
                let mut line = format!(
                    "{}: correction eigenvalue = {:.4}, shrink = {:.4}, condition = {:.3e}",
                    m.label(),
                    e.correction_eigenvalue,
                    e.shrink_factor,
                    e.diagnostics.condition_number
                );
                if let Some(f) = e.diagnostics.interaction_f {
                    line.push_str(&format!(", interaction F = {f:.2}"));
                }
                println!("{line}");
                if e.diagnostics.weak_interaction {
                    println!(
                        "warning: {}: treatment-covariate interactions are weak; the mediator weight is nearly collinear with the treatment weight",
                        m.label()
                    );
                }
            }
            Err(e) => println!("{}: failed: {e}", m.label()),
        }
        match boot.get(m) {
            Ok(b) if b.unreliable => println!(
                "warning: {}: {} of {} bootstrap replicates failed; standard errors unreliable",
                m.label(),
                b.failures,
                b.replicates()
            ),
            Ok(_) => {}
            Err(e) => println!("warning: {}: bootstrap failed: {e}", m.label()),
        }
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let mut cond = StudyCondition::new(
        args.n,
        args.delta_u,
        args.delta_ur,
        args.kappa,
        args.theta_m,
        args.gamma_xr,
    )
    .with_seed(args.seed);
    if args.zero_excess_residual {
        cond = cond.with_excess_variance(ExcessVariance::ZeroResidual);
    }
    let g = simgen::generate(&cond)?;
    let truth = (!args.no_truth).then(|| args.out.join("true_scores.csv"));
    g.write(args.out.join("data.csv"), truth.as_deref())?;
    write_atomic(
        args.out.join("model.json"),
        simgen::default_model_spec().to_json_pretty().as_bytes(),
    )?;
    write_atomic(
        args.out.join("condition.json"),
        &serde_json::to_vec_pretty(&cond)?,
    )?;
    println!(
        "wrote {} rows to {}",
        g.data.nrows(),
        args.out.join("data.csv").display()
    );
    Ok(())
}

fn cmd_mc(args: McArgs) -> Result<()> {
    let pipeline = args.tuning.pipeline()?;
    let selectors = args
        .select
        .iter()
        .map(|s| s.parse::<Selector>())
        .collect::<Result<Vec<_>>>()?;
    if !(args.bin_width > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "--bin-width must be positive, got {}",
            args.bin_width
        )));
    }
    let opts = McOptions {
        reps: args.reps,
        bootstrap: args.tuning.bootstrap,
        alpha: args.tuning.alpha,
        master_seed: args.tuning.seed,
        pipeline,
    };
    opts.validate()?;
    let grid = if args.study == 1 {
        simgen::study1_grid()
    } else {
        simgen::study2_grid()
    };
    let selected = mc::select(&grid, &selectors);
    if selected.is_empty() {
        return Err(Error::InvalidArgument(
            "no grid cell matches the selectors".into(),
        ));
    }
    println!(
        "{:>4} {:>5} {:>6} {:>6} {:>6} {:>6} {:>6}  {:<22} {:>5} {:>9} {:>6}",
        "cell", "N", "δu", "δur", "κ", "θm", "γxr", "method", "fail", "bias", "rate"
    );
    let mut cells = Vec::with_capacity(selected.len());
    for (id, c) in &selected {
        let cell = mc::run_cell(*id, c, &opts)?;
        for s in &cell.summaries {
            println!(
                "{:>4} {:>5} {:>6} {:>6} {:>6} {:>6} {:>6}  {:<22} {:>5} {:>+9.4} {:>6.3}",
                id,
                c.n,
                c.delta_u,
                c.delta_ur,
                c.kappa,
                c.theta_m,
                c.gamma_xr,
                s.method.label(),
                s.failures,
                s.mean_bias,
                s.rejection_rate
            );
        }
        cells.push(cell);
    }
    mc::write_outputs(&args.out, &cells)?;
    write_bins(&args.out, &cells, args.bin_width)?;
    println!(
        "wrote {} and {} ({} cells)",
        args.out.join("summary.csv").display(),
        args.out.join("replications.csv").display(),
        cells.len()
    );
    Ok(())
}

/// One bias histogram per cell and method under `bins/`.
fn write_bins(out: &Path, cells: &[mc::CellResult], width: f64) -> Result<()> {
    for cell in cells {
        for m in Method::ALL {
            let bias: Vec<f64> = cell
                .records
                .iter()
                .filter(|r| r.method == m)
                .filter_map(|r| r.estimate)
                .map(|e| e - cell.condition.theta_m)
                .collect();
            if bias.is_empty() {
                continue;
            }
            let bins = mc::histogram_bins(&bias, width)?;
            let path =
                out.join("bins")
                    .join(format!("cell{:03}_{}.csv", cell.condition_id, m.label()));
            write_atomic(path, &mc::bins_csv(&bins)?)?;
        }
    }
    Ok(())
}
