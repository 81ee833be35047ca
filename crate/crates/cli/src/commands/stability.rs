//! `facmix stability`: score two loading matrices against each other.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use facmix::stability::{dense_stability, sparse_stability};
use facmix::tsv;
use serde_json::json;

use crate::CliError;

#[derive(Clone, Copy, ValueEnum)]
pub enum Mode {
    /// Matching-based statistic on row correlations (higher is better)
    Sparse,
    /// Subspace distance after row standardization (lower is better)
    Dense,
}

#[derive(Args)]
pub struct StabilityArgs {
    /// First loading matrix, factors as rows (TSV)
    pub lambda1: PathBuf,
    /// Second loading matrix, factors as rows (TSV)
    pub lambda2: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Where to write stability.json
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

pub fn run(args: &StabilityArgs) -> Result<(), CliError> {
    let l1 = tsv::read_matrix(&args.lambda1)?;
    let l2 = tsv::read_matrix(&args.lambda2)?;
    let body = match args.mode {
        Mode::Sparse => {
            let res = sparse_stability(&l1, &l2)?;
            println!("r_s = {:.6}", res.r_s);
            json!({
                "mode": "sparse",
                "statistic": "r_s",
                "value": res.r_s,
                "rows": [l1.nrows(), l2.nrows()],
                "columns": l1.ncols(),
                "row_terms": res.row_terms,
                "col_terms": res.col_terms,
                "zero_variance_rows": res.zero_variance_rows,
            })
        }
        Mode::Dense => {
            let res = dense_stability(&l1, &l2)?;
            println!("r_d = {:.6e}", res.r_d);
            json!({
                "mode": "dense",
                "statistic": "r_d",
                "value": res.r_d,
                "rows": [l1.nrows(), l2.nrows()],
                "columns": l1.ncols(),
                "dropped_rows": res.dropped_row_indices,
            })
        }
    };
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::data(format!("{}: {e}", args.out_dir.display())))?;
    let path = args.out_dir.join("stability.json");
    let text = serde_json::to_string_pretty(&body)
        .map_err(|e| CliError::data(format!("stability.json: {e}")))?;
    std::fs::write(&path, text + "\n")
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(())
}
