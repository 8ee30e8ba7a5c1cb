//! Plain-text dense matrix format.
//!
//! ```text
//! DMT 1 <rows> <cols>
//! v00 v01 ...
//! ...
//! ```
//!
//! One line per row, tokens separated by a single space, `\n` line endings.
//! Values are written as the shortest decimal that parses back to the same
//! binary64, so a store/load cycle is bit-exact. Integral values are written
//! without a fractional part, which keeps label and sign matrices as plain
//! `0`/`1`/`-1` tokens.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const MAGIC: &str = "DMT";
const VERSION: &str = "1";

fn write_value(out: &mut String, v: f64) {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        // `-0.0` renders as "-0", which parses back to negative zero.
        let _ = write!(out, "{v}");
    } else {
        let _ = write!(out, "{v:?}");
    }
}

/// Renders a matrix in DMT form.
pub fn render(m: &DMatrix<f64>) -> String {
    let mut out = String::with_capacity(16 + m.len() * 12);
    let _ = writeln!(out, "{MAGIC} {VERSION} {} {}", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(' ');
            }
            write_value(&mut out, m[(i, j)]);
        }
        out.push('\n');
    }
    out
}

fn parse_dim(tok: Option<&str>, what: &str) -> Result<usize> {
    let tok = tok.ok_or_else(|| Error::Format(format!("header is missing {what}")))?;
    tok.parse::<usize>()
        .map_err(|_| Error::Format(format!("header {what} {tok:?} is not a non-negative integer")))
}

/// Parses DMT text.
pub fn parse(text: &str) -> Result<DMatrix<f64>> {
    let mut lines = text.split('\n');
    let header = lines.next().unwrap_or_default();
    let mut toks = header.split(' ');
    if toks.next() != Some(MAGIC) {
        return Err(Error::Format(format!("bad magic in header {header:?}")));
    }
    match toks.next() {
        Some(VERSION) => {}
        other => {
            return Err(Error::Format(format!("unsupported version {other:?}")));
        }
    }
    let rows = parse_dim(toks.next(), "row count")?;
    let cols = parse_dim(toks.next(), "column count")?;
    if toks.next().is_some() {
        return Err(Error::Format(format!("trailing tokens in header {header:?}")));
    }

    let mut body: Vec<&str> = lines.collect();
    // Text ends with '\n', which leaves one empty segment after the last row.
    if body.last() == Some(&"") {
        body.pop();
    }
    if body.len() != rows {
        return Err(Error::Format(format!(
            "header declares {rows} rows but {} data lines follow",
            body.len()
        )));
    }

    let mut m = DMatrix::<f64>::zeros(rows, cols);
    for (i, line) in body.iter().enumerate() {
        let mut n = 0;
        if cols > 0 {
            for tok in line.split(' ') {
                if n == cols {
                    return Err(Error::Format(format!(
                        "row {} has more than {cols} values",
                        i + 1
                    )));
                }
                let v: f64 = tok.parse().map_err(|_| {
                    Error::Format(format!("row {} has non-numeric token {tok:?}", i + 1))
                })?;
                if !v.is_finite() {
                    return Err(Error::Format(format!(
                        "row {} has non-finite value {tok:?}",
                        i + 1
                    )));
                }
                m[(i, n)] = v;
                n += 1;
            }
        } else if !line.is_empty() {
            return Err(Error::Format(format!("row {} should be empty", i + 1)));
        }
        if n != cols {
            return Err(Error::Format(format!(
                "row {} has {n} values, expected {cols}",
                i + 1
            )));
        }
    }
    Ok(m)
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn store_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render(m)).map_err(|e| Error::io(path, e))
}
