//! MatrixMarket readers and writers.
//!
//! Observation sets are exchanged in coordinate format
//! (`%%MatrixMarket matrix coordinate real general`), recovered factors in
//! dense array format. Indices are 1-based on disk and 0-based in memory.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::obs_model::ObservationSet;

const COORD_HEADER: &str = "%%MatrixMarket matrix coordinate real general";
const ARRAY_HEADER: &str = "%%MatrixMarket matrix array real general";

/// Reads an observation set from a coordinate-format file.
pub fn read_observations(path: impl AsRef<Path>) -> Result<ObservationSet> {
    let file = File::open(path.as_ref())?;
    read_observations_from(BufReader::new(file))
}

pub fn read_observations_from(reader: impl BufRead) -> Result<ObservationSet> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty file".into()))??;
    check_header(&header, "coordinate")?;
    let mut size_line = None;
    for line in lines.by_ref() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') {
            continue;
        }
        size_line = Some(trimmed.to_string());
        break;
    }
    let size_line = size_line.ok_or_else(|| Error::Parse("missing size line".into()))?;
    let dims: Vec<usize> = size_line
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|e| Error::Parse(e.to_string())))
        .collect::<Result<_>>()?;
    let [n_rows, n_cols, nnz] = dims[..] else {
        return Err(Error::Parse(format!("malformed size line: {size_line}")));
    };
    let mut triplets = Vec::with_capacity(nnz);
    for line in lines {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') {
            continue;
        }
        let mut tok = trimmed.split_whitespace();
        let (Some(i), Some(j), Some(v)) = (tok.next(), tok.next(), tok.next()) else {
            return Err(Error::Parse(format!("malformed entry line: {trimmed}")));
        };
        let i: usize = i.parse().map_err(|e: std::num::ParseIntError| Error::Parse(e.to_string()))?;
        let j: usize = j.parse().map_err(|e: std::num::ParseIntError| Error::Parse(e.to_string()))?;
        let v: f64 = v.parse().map_err(|e: std::num::ParseFloatError| Error::Parse(e.to_string()))?;
        if i == 0 || j == 0 {
            return Err(Error::Parse("coordinate indices are 1-based".into()));
        }
        triplets.push((i - 1, j - 1, v));
    }
    if triplets.len() != nnz {
        return Err(Error::Parse(format!(
            "size line declares {nnz} entries, found {}",
            triplets.len()
        )));
    }
    ObservationSet::from_triplets(n_rows, n_cols, triplets)
}

/// Writes an observation set in coordinate format, entries in canonical
/// row-major order.
pub fn write_observations(path: impl AsRef<Path>, obs: &ObservationSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    writeln!(w, "{COORD_HEADER}")?;
    writeln!(w, "{} {} {}", obs.n_rows(), obs.n_cols(), obs.len())?;
    for (i, j, v) in obs.iter() {
        writeln!(w, "{} {} {}", i + 1, j + 1, fmt_f64(v))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a dense matrix in array format (column-major, as the format
/// prescribes).
pub fn write_dense(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    writeln!(w, "{ARRAY_HEADER}")?;
    writeln!(w, "{} {}", m.nrows(), m.ncols())?;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            writeln!(w, "{}", fmt_f64(m[(i, j)]))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a dense matrix from an array-format file.
pub fn read_dense(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty file".into()))??;
    check_header(&header, "array")?;
    let mut dims = None;
    let mut values = Vec::new();
    for line in lines {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') {
            continue;
        }
        if dims.is_none() {
            let d: Vec<usize> = trimmed
                .split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|e| Error::Parse(e.to_string())))
                .collect::<Result<_>>()?;
            let [r, c] = d[..] else {
                return Err(Error::Parse(format!("malformed size line: {trimmed}")));
            };
            dims = Some((r, c));
        } else {
            for tok in trimmed.split_whitespace() {
                values.push(
                    tok.parse::<f64>()
                        .map_err(|e| Error::Parse(e.to_string()))?,
                );
            }
        }
    }
    let (r, c) = dims.ok_or_else(|| Error::Parse("missing size line".into()))?;
    if values.len() != r * c {
        return Err(Error::Parse(format!(
            "expected {} values, found {}",
            r * c,
            values.len()
        )));
    }
    Ok(DMatrix::from_column_slice(r, c, &values))
}

fn check_header(header: &str, kind: &str) -> Result<()> {
    let tokens: Vec<&str> = header.split_whitespace().collect();
    let expected = ["%%MatrixMarket", "matrix", kind, "real", "general"];
    if tokens.len() != expected.len()
        || !tokens
            .iter()
            .zip(expected.iter())
            .all(|(a, b)| a.eq_ignore_ascii_case(b))
    {
        return Err(Error::Parse(format!(
            "unsupported MatrixMarket header: {header}"
        )));
    }
    Ok(())
}

/// Shortest round-trip decimal form; keeps files byte-stable across runs.
fn fmt_f64(v: f64) -> String {
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}
