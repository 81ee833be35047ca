//! `facmix simulate`: write benchmark data sets with their ground truth.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, ValueEnum};
use facmix::simgen::{gen_dataset, SimConfig};
use facmix::tsv;
use serde_json::json;

use crate::manifest::RunManifest;
use crate::{parallel_for, resolve_threads, CliError};

#[derive(Clone, Copy, ValueEnum)]
pub enum Preset {
    /// 200 x 500, 10 sparse factors
    Sim1,
    /// 200 x 500, 10 sparse plus 5 dense factors
    Sim2,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Base configuration; individual flags below override its fields
    #[arg(long, value_enum, default_value = "sim1")]
    pub preset: Preset,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub k_sparse: Option<usize>,
    #[arg(long)]
    pub k_dense: Option<usize>,
    /// Smallest per-factor support size
    #[arg(long)]
    pub cluster_min: Option<usize>,
    /// Largest per-factor support size
    #[arg(long)]
    pub cluster_max: Option<usize>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write rep0..repN-1 subdirectories, replicate r seeded with seed + r
    #[arg(long, default_value_t = 1)]
    pub replicates: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub threads: Option<usize>,
}

fn build_config(args: &SimulateArgs, seed: u64) -> SimConfig {
    let mut config = match args.preset {
        Preset::Sim1 => SimConfig::sim1(seed),
        Preset::Sim2 => SimConfig::sim2(seed),
    };
    if let Some(n) = args.n {
        config.n = n;
    }
    if let Some(p) = args.p {
        config.p = p;
    }
    if let Some(k) = args.k_sparse {
        config.k_sparse = k;
    }
    if let Some(k) = args.k_dense {
        config.k_dense = k;
    }
    if let Some(c) = args.cluster_min {
        config.cluster_min = c;
    }
    if let Some(c) = args.cluster_max {
        config.cluster_max = c;
    }
    if let Some(s) = args.noise_sd {
        config.noise_sd = s;
    }
    config
}

fn config_json(config: &SimConfig, replicates: usize) -> serde_json::Value {
    json!({
        "n": config.n,
        "p": config.p,
        "k_sparse": config.k_sparse,
        "k_dense": config.k_dense,
        "cluster_min": config.cluster_min,
        "cluster_max": config.cluster_max,
        "noise_sd": config.noise_sd,
        "seed": config.seed,
        "replicates": replicates,
    })
}

fn write_replicate(dir: &Path, config: &SimConfig) -> Result<Vec<String>, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    let (y, truth) = gen_dataset(config)?;
    let mut outputs = Vec::new();
    let mut write = |name: &str, m: &nalgebra::DMatrix<f64>| -> Result<(), CliError> {
        tsv::write_matrix(&dir.join(name), m)?;
        outputs.push(name.to_string());
        Ok(())
    };
    write("Y.tsv", &y.values)?;
    write("truth_lambda.tsv", &truth.lambda)?;
    write("truth_x.tsv", &truth.x)?;
    if config.k_dense > 0 {
        write("truth_omega.tsv", &truth.omega)?;
        write("truth_f.tsv", &truth.f)?;
    }
    Ok(outputs)
}

pub fn run(args: &SimulateArgs) -> Result<(), CliError> {
    if args.replicates == 0 {
        return Err(CliError::usage("--replicates must be positive"));
    }
    let start = Instant::now();
    build_config(args, args.seed).validate()?;
    let threads = resolve_threads(args.threads);

    if args.replicates == 1 {
        let config = build_config(args, args.seed);
        let outputs = write_replicate(&args.out_dir, &config)?;
        let mut manifest = RunManifest::new("simulate", config_json(&config, 1));
        manifest.outputs = outputs;
        manifest.duration_seconds = start.elapsed().as_secs_f64();
        manifest.write(&args.out_dir)?;
    } else {
        parallel_for(args.replicates, threads, |r| {
            let rep_start = Instant::now();
            let config = build_config(args, args.seed + r as u64);
            let dir = args.out_dir.join(format!("rep{r}"));
            let outputs = write_replicate(&dir, &config)?;
            let mut manifest = RunManifest::new("simulate", config_json(&config, 1));
            manifest.outputs = outputs;
            manifest.duration_seconds = rep_start.elapsed().as_secs_f64();
            manifest.write(&dir)
        })?;
        let config = build_config(args, args.seed);
        let mut manifest = RunManifest::new("simulate", config_json(&config, args.replicates));
        manifest.outputs = (0..args.replicates).map(|r| format!("rep{r}")).collect();
        manifest.duration_seconds = start.elapsed().as_secs_f64();
        manifest.write(&args.out_dir)?;
    }
    Ok(())
}
