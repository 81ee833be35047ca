//! Tab-separated matrix interchange. UTF-8, '.' decimal, optional header row
//! auto-detected by a non-numeric first cell, reals written with 17
//! significant digits so round trips are exact.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for i in 0..m.nrows() {
        let mut first = true;
        for j in 0..m.ncols() {
            if !first {
                w.write_all(b"\t")?;
            }
            first = false;
            write!(w, "{:.16e}", m[(i, j)])?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_vector(path: &Path, v: &DVector<f64>) -> Result<()> {
    write_matrix(path, &DMatrix::from_fn(v.len(), 1, |i, _| v[i]))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        // Header detection: a non-numeric first cell on the first data line.
        if rows.is_empty() && width.is_none() && cells[0].trim().parse::<f64>().is_err() {
            width = Some(cells.len());
            continue;
        }
        let mut row = Vec::with_capacity(cells.len());
        for (col, cell) in cells.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Parse(format!(
                    "{}: line {}, column {}: not a number: {:?}",
                    path.display(),
                    lineno + 1,
                    col + 1,
                    cell
                ))
            })?;
            row.push(v);
        }
        if let Some(w) = width {
            if row.len() != w {
                return Err(Error::Parse(format!(
                    "{}: line {} has {} columns, expected {}",
                    path.display(),
                    lineno + 1,
                    row.len(),
                    w
                )));
            }
        } else {
            width = Some(row.len());
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse(format!("{}: no data rows", path.display())));
    }
    let (nr, nc) = (rows.len(), rows[0].len());
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = std::env::temp_dir().join(format!("facmix-tsv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.tsv");
        let m = DMatrix::from_row_slice(
            2,
            3,
            &[1.0 / 3.0, -2.5e-17, 0.0, f64::MAX / 2.0, 1e-300, 42.0],
        );
        write_matrix(&path, &m).unwrap();
        let back = read_matrix(&path).unwrap();
        assert_eq!(m, back);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn header_row_is_skipped() {
        let dir = std::env::temp_dir().join(format!("facmix-tsv-h-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("h.tsv");
        std::fs::write(&path, "gene_a\tgene_b\n1.0\t2.0\n3.0\t4.0\n").unwrap();
        let m = read_matrix(&path).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        std::fs::remove_dir_all(&dir).ok();
    }
}
