//! `facmix fit`: run either inference engine on a TSV data matrix and write
//! the fitted state, classification, PVE, and convergence trace.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, ValueEnum};
use nalgebra::{DMatrix, DVector};

use facmix::em::fit_em;
use facmix::gibbs::{run_gibbs, GibbsConfig};
use facmix::postprocess::{classify_factors, pve, remove_pcs};
use facmix::tsv;
use facmix::types::{DataMatrix, Hyperparameters};
use serde_json::json;

use crate::manifest::RunManifest;
use crate::{parallel_for, resolve_threads, CliError};

#[derive(Clone, Copy, PartialEq, ValueEnum)]
pub enum Engine {
    Em,
    Gibbs,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SelectBy {
    /// Final objective (EM) or reconstruction fit (Gibbs)
    Objective,
    /// Number of retained factors
    Factors,
}

#[derive(Args)]
pub struct FitArgs {
    /// Input data matrix, samples as rows (TSV, optional header row)
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "em")]
    pub engine: Engine,
    #[arg(long, default_value_t = 50)]
    pub k_init: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run this many fits from seeds seed..seed+R-1 and keep the best
    #[arg(long, default_value_t = 1)]
    pub restarts: usize,
    #[arg(long, value_enum, default_value = "objective")]
    pub select_by: SelectBy,
    /// Remove this many principal components before fitting
    #[arg(long)]
    pub two_stage_pcs: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub a: f64,
    #[arg(long, default_value_t = 0.5)]
    pub b: f64,
    #[arg(long, default_value_t = 0.5)]
    pub c: f64,
    #[arg(long, default_value_t = 0.5)]
    pub d: f64,
    #[arg(long, default_value_t = 0.5)]
    pub e: f64,
    #[arg(long, default_value_t = 0.5)]
    pub f: f64,
    #[arg(long, default_value_t = 1.0)]
    pub nu: f64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 1e-10)]
    pub zero_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    pub z_cutoff: f64,
    #[arg(long, default_value_t = 20)]
    pub stable_window: usize,
    #[arg(long, default_value_t = 2000)]
    pub max_iters: usize,
    /// Use the second-moment residual variance update
    #[arg(long)]
    pub psi_second_moment: bool,
    /// Gibbs engine: total scans
    #[arg(long, default_value_t = 2000)]
    pub gibbs_iters: usize,
    /// Gibbs engine: scans discarded before averaging
    #[arg(long, default_value_t = 1000)]
    pub gibbs_burn_in: usize,
    /// Gibbs engine: keep every thin-th retained scan
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    #[arg(long)]
    pub threads: Option<usize>,
}

fn hyper_of(args: &FitArgs) -> Hyperparameters {
    Hyperparameters {
        a: args.a,
        b: args.b,
        c: args.c,
        d: args.d,
        e: args.e,
        f: args.f,
        nu: args.nu,
        alpha: args.alpha,
        beta: args.beta,
        k_init: args.k_init,
        zero_threshold: args.zero_threshold,
        z_cutoff: args.z_cutoff,
        stable_window: args.stable_window,
        max_iters: args.max_iters,
        psi_floor: 1e-8,
        psi_second_moment: args.psi_second_moment,
    }
}

fn config_json(args: &FitArgs, hyper: &Hyperparameters) -> serde_json::Value {
    json!({
        "data": args.data.display().to_string(),
        "engine": match args.engine { Engine::Em => "em", Engine::Gibbs => "gibbs" },
        "seed": args.seed,
        "restarts": args.restarts,
        "select_by": match args.select_by { SelectBy::Objective => "objective", SelectBy::Factors => "factors" },
        "two_stage_pcs": args.two_stage_pcs,
        "hyperparameters": {
            "a": hyper.a, "b": hyper.b, "c": hyper.c, "d": hyper.d,
            "e": hyper.e, "f": hyper.f, "nu": hyper.nu,
            "alpha": hyper.alpha, "beta": hyper.beta,
            "k_init": hyper.k_init,
            "zero_threshold": hyper.zero_threshold,
            "z_cutoff": hyper.z_cutoff,
            "stable_window": hyper.stable_window,
            "max_iters": hyper.max_iters,
            "psi_floor": hyper.psi_floor,
            "psi_second_moment": hyper.psi_second_moment,
        },
        "gibbs": {
            "n_iters": args.gibbs_iters,
            "burn_in": args.gibbs_burn_in,
            "thin": args.thin,
        },
    })
}

/// One completed fit, engine differences already flattened away.
struct FitOutput {
    lambda: DMatrix<f64>,
    x: DMatrix<f64>,
    psi: DVector<f64>,
    rho: DVector<f64>,
    /// (iteration, active loading count, objective) for EM;
    /// (scan, eta, pi) repurposed columns for Gibbs.
    trace: Vec<(usize, f64, f64)>,
    /// Restart-selection score under `--select-by objective`.
    objective: f64,
    factors: usize,
    converged: Option<bool>,
    iterations: usize,
    results: serde_json::Value,
}

fn run_engine(args: &FitArgs, y: &DataMatrix, seed: u64) -> Result<FitOutput, CliError> {
    let hyper = hyper_of(args);
    hyper.validate()?;
    match args.engine {
        Engine::Em => {
            let report = fit_em(y, &hyper, seed)?;
            let trace = report
                .nonzero_trace
                .iter()
                .zip(&report.objective_trace)
                .enumerate()
                .map(|(i, (&active, &obj))| (i + 1, active as f64, obj))
                .collect();
            let objective = *report.objective_trace.last().unwrap_or(&f64::NEG_INFINITY);
            Ok(FitOutput {
                factors: report.factor_state.lambda.nrows(),
                objective,
                trace,
                converged: Some(report.converged),
                iterations: report.iterations,
                results: json!({
                    "converged": report.converged,
                    "iterations": report.iterations,
                    "pruned_factors": report.pruned.len(),
                    "warnings": report.warnings,
                    "final_objective": objective,
                }),
                lambda: report.factor_state.lambda,
                x: report.factor_state.x,
                psi: report.factor_state.psi,
                rho: report.shrinkage_state.rho,
            })
        }
        Engine::Gibbs => {
            let config = GibbsConfig {
                n_iters: args.gibbs_iters,
                burn_in: args.gibbs_burn_in,
                thin: args.thin,
                seed,
            };
            let summary = run_gibbs(y, &hyper, &config)?;
            // Restart score: how well the posterior-mean reconstruction fits.
            let resid = &y.values - &summary.mean_x * &summary.mean_lambda;
            let objective = -resid.iter().map(|v| v * v).sum::<f64>();
            let trace = summary
                .trace_eta
                .iter()
                .zip(&summary.trace_pi)
                .enumerate()
                .map(|(i, (&eta, &pi))| (i + 1, eta, pi))
                .collect();
            Ok(FitOutput {
                factors: summary.mean_lambda.nrows(),
                objective,
                trace,
                converged: None,
                iterations: args.gibbs_iters,
                results: json!({
                    "retained_draws": summary.retained,
                    "clamp_events": summary.clamp_events,
                    "mean_pi": summary.mean_pi,
                    "reconstruction_score": objective,
                }),
                lambda: summary.mean_lambda,
                x: summary.mean_x,
                psi: summary.mean_psi,
                rho: summary.z_frequency,
            })
        }
    }
}

fn write_fit(dir: &Path, fit: &FitOutput, y: &DataMatrix, z_cutoff: f64) -> Result<Vec<String>, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    let mut outputs = Vec::new();
    let mut note = |name: &str| outputs.push(name.to_string());

    tsv::write_matrix(&dir.join("lambda.tsv"), &fit.lambda)?;
    note("lambda.tsv");
    tsv::write_matrix(&dir.join("x.tsv"), &fit.x)?;
    note("x.tsv");
    tsv::write_vector(&dir.join("psi.tsv"), &fit.psi)?;
    note("psi.tsv");
    tsv::write_vector(&dir.join("rho.tsv"), &fit.rho)?;
    note("rho.tsv");

    let labels = classify_factors(&fit.rho, z_cutoff);
    let mut body = String::from("factor\tlabel\n");
    for (k, label) in labels.iter().enumerate() {
        body.push_str(&format!("{k}\t{label}\n"));
    }
    std::fs::write(dir.join("labels.tsv"), body)
        .map_err(|e| CliError::data(format!("labels.tsv: {e}")))?;
    note("labels.tsv");

    let pve_values = pve(&fit.x, &fit.lambda, y)?;
    tsv::write_vector(&dir.join("pve.tsv"), &DVector::from_vec(pve_values))?;
    note("pve.tsv");

    let file = std::fs::File::create(dir.join("trace.tsv"))
        .map_err(|e| CliError::data(format!("trace.tsv: {e}")))?;
    let mut w = std::io::BufWriter::new(file);
    for (iter, active, objective) in &fit.trace {
        writeln!(w, "{iter}\t{active:.16e}\t{objective:.16e}")
            .map_err(|e| CliError::data(format!("trace.tsv: {e}")))?;
    }
    w.flush().map_err(|e| CliError::data(format!("trace.tsv: {e}")))?;
    note("trace.tsv");
    Ok(outputs)
}

pub fn run(args: &FitArgs) -> Result<(), CliError> {
    if args.restarts == 0 {
        return Err(CliError::usage("--restarts must be positive"));
    }
    let start = Instant::now();
    let hyper = hyper_of(args);
    hyper.validate()?;

    let raw = tsv::read_matrix(&args.data)?;
    let y_full = DataMatrix::new(raw)
        .map_err(|e| CliError::data(format!("{}: {e}", args.data.display())))?;
    let y = match args.two_stage_pcs {
        Some(m) => remove_pcs(&y_full, m)?,
        None => y_full,
    };

    let mut manifest = RunManifest::new("fit", config_json(args, &hyper));
    manifest.digest_input(&args.data)?;

    if args.restarts == 1 {
        let fit = run_engine(args, &y, args.seed)?;
        let mut outputs = write_fit(&args.out_dir, &fit, &y, args.z_cutoff)?;
        outputs.sort();
        manifest.outputs = outputs;
        manifest.results = fit.results;
        manifest.duration_seconds = start.elapsed().as_secs_f64();
        manifest.write(&args.out_dir)?;
        return Ok(());
    }

    // Multi-restart: each restart owns a subdirectory; the best one by the
    // selection rule is copied to the top level.
    let threads = resolve_threads(args.threads);
    let slots: Vec<std::sync::Mutex<Option<FitOutput>>> =
        (0..args.restarts).map(|_| std::sync::Mutex::new(None)).collect();
    parallel_for(args.restarts, threads, |r| {
        let fit = run_engine(args, &y, args.seed + r as u64)?;
        let dir = args.out_dir.join(format!("restart{r}"));
        let outputs = write_fit(&dir, &fit, &y, args.z_cutoff)?;
        let mut sub = RunManifest::new("fit", config_json(args, &hyper));
        sub.config["seed"] = json!(args.seed + r as u64);
        sub.config["restarts"] = json!(1);
        sub.outputs = outputs;
        sub.results = fit.results.clone();
        sub.write(&dir)?;
        *slots[r].lock().unwrap() = Some(fit);
        Ok(())
    })?;
    let fits: Vec<FitOutput> =
        slots.into_iter().map(|s| s.into_inner().unwrap().unwrap()).collect();
    let best = match args.select_by {
        SelectBy::Objective => (0..fits.len())
            .max_by(|&i, &j| fits[i].objective.total_cmp(&fits[j].objective))
            .unwrap(),
        SelectBy::Factors => (0..fits.len())
            .max_by_key(|&i| (fits[i].factors, i))
            .unwrap(),
    };
    let mut outputs = write_fit(&args.out_dir, &fits[best], &y, args.z_cutoff)?;
    outputs.extend((0..args.restarts).map(|r| format!("restart{r}")));
    outputs.sort();
    manifest.outputs = outputs;
    manifest.results = json!({
        "selected_restart": best,
        "selected_seed": args.seed + best as u64,
        "scores": fits.iter().map(|f| f.objective).collect::<Vec<_>>(),
        "factor_counts": fits.iter().map(|f| f.factors).collect::<Vec<_>>(),
        "converged": fits.iter().map(|f| f.converged).collect::<Vec<_>>(),
        "iterations": fits.iter().map(|f| f.iterations).collect::<Vec<_>>(),
        "best": fits[best].results,
    });
    manifest.duration_seconds = start.elapsed().as_secs_f64();
    manifest.write(&args.out_dir)?;
    Ok(())
}
