//! Plain-text matrix files: a line holding `d`, then `d` rows of `d`
//! space-separated decimals. Lines starting with `#` are comments. Writers
//! emit 17 significant digits so values round-trip exactly.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::covmodel::CovarianceSpec;
use crate::error::{Error, Result};
use crate::factor::{Construction, FactorMatrix};

pub fn format_matrix(m: &DMatrix<f64>, header: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        for line in h.lines() {
            let _ = writeln!(out, "# {line}");
        }
    }
    let _ = writeln!(out, "{}", m.nrows());
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:.16e}", m[(i, j)])).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}

pub fn parse_matrix(text: &str, source_name: &str) -> Result<DMatrix<f64>> {
    let err = |reason: String| Error::Parse { source_name: source_name.to_string(), reason };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (lineno, first) = lines.next().ok_or_else(|| err("empty matrix file".into()))?;
    let d: usize = first.parse().map_err(|e| err(format!("line {lineno}: bad dimension: {e}")))?;
    if d == 0 {
        return Err(err(format!("line {lineno}: dimension must be at least 1")));
    }
    let mut data = Vec::with_capacity(d * d);
    for row in 0..d {
        let (lineno, line) =
            lines.next().ok_or_else(|| err(format!("expected {d} rows, found {row}")))?;
        let before = data.len();
        for tok in line.split_whitespace() {
            data.push(tok.parse::<f64>().map_err(|e| err(format!("line {lineno}: {e}")))?);
        }
        if data.len() - before != d {
            return Err(err(format!(
                "line {lineno}: expected {d} entries, found {}",
                data.len() - before
            )));
        }
    }
    if let Some((lineno, _)) = lines.next() {
        return Err(err(format!("line {lineno}: trailing data after {d} rows")));
    }
    Ok(DMatrix::from_row_slice(d, d, &data))
}

pub fn read_covariance(path: &Path) -> Result<CovarianceSpec> {
    let text = std::fs::read_to_string(path)?;
    CovarianceSpec::from_matrix(parse_matrix(&text, &path.display().to_string())?)
}

pub fn write_covariance(spec: &CovarianceSpec, path: &Path) -> Result<()> {
    let header = format!("covariance family={}", spec.family().label());
    std::fs::write(path, format_matrix(spec.matrix(), Some(&header)))?;
    Ok(())
}

/// Factor file with a header recording the construction and, for permuted
/// factors, the permutation `π`.
pub fn format_factor(fac: &FactorMatrix) -> String {
    let mut header = format!("factor construction={}", fac.construction().label());
    if let Construction::Permuted { perm, .. } = fac.construction() {
        let p: Vec<String> = perm.iter().map(|i| i.to_string()).collect();
        let _ = write!(header, " perm={}", p.join(","));
    }
    format_matrix(fac.matrix(), Some(&header))
}
