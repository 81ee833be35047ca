//! Stability statistics for comparing recovered and reference matrices:
//! `r_s` for sparse loading matrices (label- and scale-invariant) and `r_d`
//! for dense matrices (additionally rotation-invariant).

use nalgebra::DMatrix;

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct SparseStabilityResult {
    pub r_s: f64,
    /// `K1 x K2` absolute Pearson correlations between rows.
    pub correlation_matrix: DMatrix<f64>,
    pub row_terms: Vec<f64>,
    pub col_terms: Vec<f64>,
    /// Rows (of either input) whose variance was zero.
    pub zero_variance_rows: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct DenseStabilityResult {
    pub r_d: f64,
    pub dropped_row_indices: (Vec<usize>, Vec<usize>),
}

/// Absolute pairwise Pearson correlations between the rows of two matrices.
/// Zero-variance rows yield defined 0 entries and are reported to the caller.
pub fn abs_correlation_matrix(
    l1: &DMatrix<f64>,
    l2: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, Vec<(usize, usize)>)> {
    let p = l1.ncols();
    if l2.ncols() != p {
        return Err(Error::Dimension(format!(
            "row length mismatch: {} vs {}",
            p,
            l2.ncols()
        )));
    }
    if p < 2 {
        return Err(Error::Dimension("need at least 2 columns for correlations".into()));
    }
    let center = |m: &DMatrix<f64>| -> (DMatrix<f64>, Vec<f64>) {
        let mut c = m.clone();
        let mut norms = Vec::with_capacity(m.nrows());
        for r in 0..m.nrows() {
            let mean = m.row(r).sum() / p as f64;
            for j in 0..p {
                c[(r, j)] -= mean;
            }
            norms.push(c.row(r).iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        (c, norms)
    };
    let (c1, n1) = center(l1);
    let (c2, n2) = center(l2);
    let mut flagged = Vec::new();
    for (r, &norm) in n1.iter().enumerate() {
        if norm == 0.0 {
            flagged.push((0, r));
        }
    }
    for (r, &norm) in n2.iter().enumerate() {
        if norm == 0.0 {
            flagged.push((1, r));
        }
    }
    let mut sigma = &c1 * c2.transpose();
    for r in 0..l1.nrows() {
        for t in 0..l2.nrows() {
            let denom = n1[r] * n2[t];
            sigma[(r, t)] = if denom == 0.0 { 0.0 } else { (sigma[(r, t)] / denom).abs() };
        }
    }
    Ok((sigma, flagged))
}

/// Row-side (or, transposed, column-side) contribution to `r_s`: best match
/// minus a factor-splitting penalty. Entries strictly above the line mean are
/// penalized, except the single best match (lowest index among ties), so a
/// perfect one-to-one matching scores exactly 1.
fn line_term(line: &[f64]) -> f64 {
    let m = line.len();
    let mean = line.iter().sum::<f64>() / m as f64;
    let (argmax, max) = line
        .iter()
        .enumerate()
        .fold((0usize, f64::NEG_INFINITY), |(ai, av), (i, &v)| {
            if v > av {
                (i, v)
            } else {
                (ai, av)
            }
        });
    let penalty: f64 = line
        .iter()
        .enumerate()
        .filter(|&(i, &v)| i != argmax && v > mean)
        .map(|(_, &v)| v)
        .sum();
    max - penalty / (m as f64 - 1.0)
}

/// The sparse stability statistic `r_s`.
pub fn sparse_stability(l1: &DMatrix<f64>, l2: &DMatrix<f64>) -> Result<SparseStabilityResult> {
    let (k1, k2) = (l1.nrows(), l2.nrows());
    if k1 < 2 || k2 < 2 {
        return Err(Error::Dimension("sparse_stability needs at least 2 rows per matrix".into()));
    }
    let (sigma, zero_variance_rows) = abs_correlation_matrix(l1, l2)?;
    let row_terms: Vec<f64> = (0..k1)
        .map(|r| line_term(&sigma.row(r).iter().copied().collect::<Vec<_>>()))
        .collect();
    let col_terms: Vec<f64> = (0..k2)
        .map(|t| line_term(&sigma.column(t).iter().copied().collect::<Vec<_>>()))
        .collect();
    let r_s = row_terms.iter().sum::<f64>() / (2.0 * k1 as f64)
        + col_terms.iter().sum::<f64>() / (2.0 * k2 as f64);
    Ok(SparseStabilityResult { r_s, correlation_matrix: sigma, row_terms, col_terms, zero_variance_rows })
}

/// Center each row and divide by its sample standard deviation (`p - 1`
/// denominator). Zero-variance rows are dropped and reported.
pub fn scale_rows(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let p = m.ncols();
    if p < 2 {
        return Err(Error::Dimension("scale_rows needs at least 2 columns".into()));
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for r in 0..m.nrows() {
        let mean = m.row(r).sum() / p as f64;
        let ss: f64 = m.row(r).iter().map(|v| (v - mean) * (v - mean)).sum();
        if ss == 0.0 {
            dropped.push(r);
        } else {
            let sd = (ss / (p as f64 - 1.0)).sqrt();
            kept.push((0..p).map(|j| (m[(r, j)] - mean) / sd).collect::<Vec<_>>());
        }
    }
    if kept.is_empty() {
        return Err(Error::Degenerate("all rows have zero variance".into()));
    }
    let rows = kept.len();
    let out = DMatrix::from_fn(rows, p, |r, j| kept[r][j]);
    Ok((out, dropped))
}

/// The dense stability statistic `r_d = Tr((M1^T M1 - M2^T M2)^2) / p^2`,
/// evaluated through `K x K` Gram blocks so no `p x p` product is formed.
pub fn dense_stability(m1: &DMatrix<f64>, m2: &DMatrix<f64>) -> Result<DenseStabilityResult> {
    if m1.ncols() != m2.ncols() {
        return Err(Error::Dimension(format!(
            "dense_stability: column mismatch {} vs {}",
            m1.ncols(),
            m2.ncols()
        )));
    }
    let (s1, d1) = scale_rows(m1)?;
    let (s2, d2) = scale_rows(m2)?;
    let p = s1.ncols() as f64;
    // Tr((A^T A - B^T B)^2) = ||A A^T||_F^2 - 2 ||A B^T||_F^2 + ||B B^T||_F^2
    let g11 = &s1 * s1.transpose();
    let g12 = &s1 * s2.transpose();
    let g22 = &s2 * s2.transpose();
    let fro2 = |m: &DMatrix<f64>| m.iter().map(|v| v * v).sum::<f64>();
    let r_d = ((fro2(&g11) - 2.0 * fro2(&g12) + fro2(&g22)) / (p * p)).max(0.0);
    Ok(DenseStabilityResult { r_d, dropped_row_indices: (d1, d2) })
}
