//! Plain-text polytope files.
//!
//! ```text
//! dim rows
//! H_11 ... H_1dim h_1
//! ...
//! ```
//!
//! Values are written in scientific notation with 17 significant digits,
//! which round-trips every `f64` exactly.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::Polytope;
use crate::error::{Error, Result};

pub fn to_text(p: &Polytope) -> String {
    let mut out = String::with_capacity(p.rows() * (p.dim() + 1) * 25 + 16);
    let _ = writeln!(out, "{} {}", p.dim(), p.rows());
    for i in 0..p.rows() {
        for j in 0..p.dim() {
            let _ = write!(out, "{:.16e} ", p.h()[(i, j)]);
        }
        let _ = writeln!(out, "{:.16e}", p.b()[i]);
    }
    out
}

pub fn from_text(text: &str, origin: &Path) -> Result<Polytope> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        message: format!("line {line}: {message}"),
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (first_no, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let header: Vec<&str> = header.split_whitespace().collect();
    let [dim, rows] = header[..] else {
        return Err(err(first_no + 1, "header must be `dim rows`".into()));
    };
    let dim: usize = dim.parse().map_err(|e| err(first_no + 1, format!("bad dim: {e}")))?;
    let rows: usize = rows.parse().map_err(|e| err(first_no + 1, format!("bad row count: {e}")))?;
    if dim == 0 {
        return Err(err(first_no + 1, "dim must be positive".into()));
    }
    let mut h = DMatrix::zeros(rows, dim);
    let mut b = DVector::zeros(rows);
    for i in 0..rows {
        let (no, line) = lines
            .next()
            .ok_or_else(|| err(first_no + 2 + i, format!("expected {rows} rows, found {i}")))?;
        let values = line
            .split_whitespace()
            .map(|tok| tok.parse::<f64>().map_err(|e| err(no + 1, format!("bad number `{tok}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != dim + 1 {
            return Err(err(no + 1, format!("expected {} values, found {}", dim + 1, values.len())));
        }
        for j in 0..dim {
            h[(i, j)] = values[j];
        }
        b[i] = values[dim];
    }
    if let Some((no, _)) = lines.next() {
        return Err(err(no + 1, "trailing data after last row".into()));
    }
    Polytope::from_normalized(h, b).map_err(|e| err(0, e.to_string()))
}

pub fn save(p: &Polytope, path: &Path) -> Result<()> {
    std::fs::write(path, to_text(p))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Polytope> {
    let text = std::fs::read_to_string(path)?;
    from_text(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn text_round_trip_is_exact(
            rows in 0usize..6,
            dim in 1usize..4,
            seed in proptest::collection::vec(-1e6f64..1e6, 30),
            tiny in proptest::collection::vec(-1e-300f64..1e-300, 30),
        ) {
            let h = DMatrix::from_fn(rows, dim, |i, j| seed[i * dim + j] + tiny[i * dim + j]);
            let b = DVector::from_fn(rows, |i, _| seed[24 + i].abs() * std::f64::consts::PI);
            let p = Polytope::from_normalized(h, b).unwrap();
            let q = from_text(&to_text(&p), Path::new("mem")).unwrap();
            prop_assert_eq!(p, q);
        }
    }

    #[test]
    fn malformed_input_reports_line() {
        let e = from_text("2 1\n1.0 2.0\n", Path::new("p.txt")).unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        let e = from_text("2 2\n1 0 1\n", Path::new("p.txt")).unwrap_err();
        assert!(e.to_string().contains("expected 2 rows"), "{e}");
        assert!(from_text("x y\n", Path::new("p.txt")).is_err());
    }
}
