//! Post-processing of fitted states: sparse/dense classification, threshold
//! clusters, proportion of variance explained, residualization, principal
//! component removal, factor quantile normalization, and covariate
//! correlations.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use crate::types::DataMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorLabel {
    Sparse,
    Dense,
}

impl std::fmt::Display for FactorLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FactorLabel::Sparse => write!(f, "sparse"),
            FactorLabel::Dense => write!(f, "dense"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FactorSummary {
    pub labels: Vec<FactorLabel>,
    pub support: Vec<Vec<usize>>,
    pub pve: Vec<f64>,
    pub dense_count: usize,
}

/// Sparse iff `rho_k >= z_cutoff`; the boundary counts as sparse.
pub fn classify_factors(rho: &DVector<f64>, z_cutoff: f64) -> Vec<FactorLabel> {
    rho.iter()
        .map(|&r| if r >= z_cutoff { FactorLabel::Sparse } else { FactorLabel::Dense })
        .collect()
}

/// Zero all entries with `|value| <= t` and return the surviving column
/// indices per row.
pub fn threshold_loadings(lambda: &DMatrix<f64>, t: f64) -> (DMatrix<f64>, Vec<Vec<usize>>) {
    let mut out = lambda.clone();
    let mut support = Vec::with_capacity(lambda.nrows());
    for k in 0..lambda.nrows() {
        let mut idx = Vec::new();
        for j in 0..lambda.ncols() {
            if lambda[(k, j)].abs() <= t {
                out[(k, j)] = 0.0;
            } else {
                idx.push(j);
            }
        }
        support.push(idx);
    }
    (out, support)
}

/// Per-factor proportion of variance explained: the Frobenius mass of the
/// rank-one contribution relative to the column-centered data.
pub fn pve(x: &DMatrix<f64>, lambda: &DMatrix<f64>, y: &DataMatrix) -> Result<Vec<f64>> {
    let (n, p) = (y.nrows(), y.ncols());
    if x.ncols() != lambda.nrows() || x.nrows() != n || lambda.ncols() != p {
        return Err(Error::Dimension("pve: inconsistent factor/loading/data shapes".into()));
    }
    let mut centered = y.values.clone();
    for j in 0..p {
        let mean = centered.column(j).sum() / n as f64;
        for i in 0..n {
            centered[(i, j)] -= mean;
        }
    }
    let total: f64 = centered.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return Err(Error::Degenerate("pve: data has zero variance".into()));
    }
    Ok((0..lambda.nrows())
        .map(|k| {
            let xk = x.column(k);
            let lk = lambda.row(k);
            let x2: f64 = xk.iter().map(|v| v * v).sum();
            let l2: f64 = lk.iter().map(|v| v * v).sum();
            x2 * l2 / total
        })
        .collect())
}

/// Remove the dense contribution: `Y - F * Omega`.
pub fn residualize(y: &DataMatrix, f: &DMatrix<f64>, omega: &DMatrix<f64>) -> Result<DataMatrix> {
    if f.nrows() != y.nrows() || omega.ncols() != y.ncols() || f.ncols() != omega.nrows() {
        return Err(Error::Dimension("residualize: inconsistent shapes".into()));
    }
    let resid = &y.values - f * omega;
    DataMatrix::new(resid)
}

/// Regress out the top `m` sample-space principal components of the
/// column-centered data; the residual columns are orthogonal to the retained
/// score vectors.
pub fn remove_pcs(y: &DataMatrix, m: usize) -> Result<DataMatrix> {
    let (n, p) = (y.nrows(), y.ncols());
    if m == 0 || m >= n.min(p) {
        return Err(Error::Config(format!("remove_pcs: need 0 < m < min(n,p), got m={m}")));
    }
    let mut centered = y.values.clone();
    for j in 0..p {
        let mean = centered.column(j).sum() / n as f64;
        for i in 0..n {
            centered[(i, j)] -= mean;
        }
    }
    let svd = centered.clone().svd(true, false);
    let u = svd.u.as_ref().expect("u requested");
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > svd.singular_values[0] * 1e-12)
        .count();
    if m >= rank {
        return Err(Error::Config(format!(
            "remove_pcs: m={m} is not below the numerical rank {rank}"
        )));
    }
    let scores = u.columns(0, m).into_owned(); // n x m, orthonormal
    let resid = &centered - &scores * (scores.transpose() * &centered);
    DataMatrix::new(resid)
}

/// Map a factor to standard normal quantiles by rank, using the `(r - 0.5)/n`
/// plotting position; ties share averaged ranks.
pub fn quantile_normalize_factor(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let normal = NormalDist::new(0.0, 1.0).expect("valid normal");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| x[i].partial_cmp(&x[j]).expect("finite values"));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        // ranks are 1-based; ties get the average of their span
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
        .iter()
        .map(|&r| normal.inverse_cdf((r - 0.5) / n as f64))
        .collect()
}

/// Signed pairwise Pearson correlations between factor columns and covariate
/// columns.
pub fn covariate_correlation(
    x_dense: &DMatrix<f64>,
    covariates: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = x_dense.nrows();
    if covariates.nrows() != n {
        return Err(Error::Dimension(format!(
            "covariate_correlation: {} samples vs {}",
            n,
            covariates.nrows()
        )));
    }
    let center = |m: &DMatrix<f64>| {
        let mut c = m.clone();
        for j in 0..m.ncols() {
            let mean = c.column(j).sum() / n as f64;
            for i in 0..n {
                c[(i, j)] -= mean;
            }
        }
        c
    };
    let cx = center(x_dense);
    let cc = center(covariates);
    let mut out = DMatrix::zeros(x_dense.ncols(), covariates.ncols());
    for k in 0..cx.ncols() {
        let nk = cx.column(k).norm();
        for q in 0..cc.ncols() {
            let nq = cc.column(q).norm();
            out[(k, q)] = if nk == 0.0 || nq == 0.0 {
                0.0
            } else {
                cx.column(k).dot(&cc.column(q)) / (nk * nq)
            };
        }
    }
    Ok(out)
}
