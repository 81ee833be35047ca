//! `facmix summarize`: turn fit outputs into plot-ready tables.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use nalgebra::DVector;

use facmix::postprocess::{classify_factors, covariate_correlation, threshold_loadings, FactorLabel};
use facmix::tsv;

use crate::CliError;

#[derive(Args)]
pub struct SummarizeArgs {
    /// Directory holding lambda.tsv, x.tsv, rho.tsv and pve.tsv from a fit
    #[arg(long)]
    pub fit_dir: PathBuf,
    /// Sample-by-covariate matrix to correlate against the factor scores
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-10)]
    pub zero_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    pub z_cutoff: f64,
    /// Output directory, defaults to the fit directory
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn run(args: &SummarizeArgs) -> Result<(), CliError> {
    let lambda = tsv::read_matrix(&args.fit_dir.join("lambda.tsv"))?;
    let x = tsv::read_matrix(&args.fit_dir.join("x.tsv"))?;
    let rho_m = tsv::read_matrix(&args.fit_dir.join("rho.tsv"))?;
    let pve_m = tsv::read_matrix(&args.fit_dir.join("pve.tsv"))?;
    let k = lambda.nrows();
    if rho_m.nrows() != k || pve_m.nrows() != k || x.ncols() != k {
        return Err(CliError::data(format!(
            "fit outputs disagree on the factor count: lambda {k}, x {}, rho {}, pve {}",
            x.ncols(),
            rho_m.nrows(),
            pve_m.nrows()
        )));
    }
    let rho = DVector::from_fn(k, |i, _| rho_m[(i, 0)]);
    let labels = classify_factors(&rho, args.z_cutoff);
    let (_, support) = threshold_loadings(&lambda, args.zero_threshold);
    let out_dir = args.out_dir.clone().unwrap_or_else(|| args.fit_dir.clone());
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::data(format!("{}: {e}", out_dir.display())))?;
    let write = |name: &str, body: String| -> Result<(), CliError> {
        std::fs::write(out_dir.join(name), body)
            .map_err(|e| CliError::data(format!("{name}: {e}")))
    };

    let mut body = String::from("factor\tlabel\tsupport_size\tpve\n");
    for kk in 0..k {
        body.push_str(&format!(
            "{kk}\t{}\t{}\t{:.16e}\n",
            labels[kk],
            support[kk].len(),
            pve_m[(kk, 0)]
        ));
    }
    write("factors.tsv", body)?;

    // Unit-width histogram of support sizes; counts sum to the factor count.
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    for s in &support {
        *hist.entry(s.len()).or_insert(0) += 1;
    }
    let mut body = String::from("support_size\tcount\n");
    for (size, count) in &hist {
        body.push_str(&format!("{size}\t{count}\n"));
    }
    write("support_hist.tsv", body)?;

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| pve_m[(j, 0)].total_cmp(&pve_m[(i, 0)]));
    let mut body = String::from("factor\tlabel\tpve\n");
    for &kk in &order {
        body.push_str(&format!("{kk}\t{}\t{:.16e}\n", labels[kk], pve_m[(kk, 0)]));
    }
    write("pve_sorted.tsv", body)?;

    if let Some(path) = &args.covariates {
        let cov = tsv::read_matrix(path)?;
        let corr = covariate_correlation(&x, &cov)?;
        let mut body = String::from("factor\tlabel");
        for q in 0..corr.ncols() {
            body.push_str(&format!("\tcovariate{q}"));
        }
        body.push('\n');
        for kk in 0..k {
            body.push_str(&format!("{kk}\t{}", labels[kk]));
            for q in 0..corr.ncols() {
                body.push_str(&format!("\t{:.16e}", corr[(kk, q)]));
            }
            body.push('\n');
        }
        write("covariate_corr.tsv", body)?;
    }

    let dense = labels.iter().filter(|l| matches!(l, FactorLabel::Dense)).count();
    let total_pve: f64 = (0..k).map(|kk| pve_m[(kk, 0)]).sum();
    println!("factors: {k} ({dense} dense, {} sparse)", k - dense);
    println!("total PVE: {total_pve:.4}");
    Ok(())
}
