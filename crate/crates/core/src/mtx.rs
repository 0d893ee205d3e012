//! Matrix Market coordinate files and plain-text vectors.
//!
//! Indices are 1-based on disk and 0-based in memory. Values are written
//! in shortest round-trip exponent form so a write/read cycle is exact.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

const HEADER: &str = "%%MatrixMarket matrix coordinate real general";

pub fn write_matrix<W: Write>(mut out: W, a: &CsrMatrix) -> Result<()> {
    writeln!(out, "{HEADER}")?;
    writeln!(out, "{} {} {}", a.n(), a.n(), a.nnz())?;
    for (i, j, v) in a.triples() {
        writeln!(out, "{} {} {:e}", i + 1, j + 1, v)?;
    }
    Ok(())
}

pub fn read_matrix<R: Read>(input: R) -> Result<CsrMatrix> {
    let ctx = "matrix market";
    let mut lines = BufReader::new(input).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(ctx, "empty input"))??;
    let tokens: Vec<String> = header.split_whitespace().map(str::to_lowercase).collect();
    if tokens.len() != 5 || tokens[0] != "%%matrixmarket" || tokens[1] != "matrix" {
        return Err(Error::parse(ctx, format!("bad header line `{header}`")));
    }
    if tokens[2] != "coordinate" || tokens[3] != "real" {
        return Err(Error::parse(
            ctx,
            format!("unsupported format `{} {}`", tokens[2], tokens[3]),
        ));
    }
    let symmetric = match tokens[4].as_str() {
        "general" => false,
        "symmetric" => true,
        other => return Err(Error::parse(ctx, format!("unsupported symmetry `{other}`"))),
    };

    let mut size: Option<(usize, usize)> = None;
    let mut triples = Vec::new();
    for line in lines {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        match size {
            None => {
                if fields.len() != 3 {
                    return Err(Error::parse(ctx, format!("bad size line `{trimmed}`")));
                }
                let rows = parse_usize(fields[0], ctx)?;
                let cols = parse_usize(fields[1], ctx)?;
                let nnz = parse_usize(fields[2], ctx)?;
                if rows != cols {
                    return Err(Error::parse(ctx, format!("matrix is {rows}x{cols}, not square")));
                }
                size = Some((rows, nnz));
                triples.reserve(nnz);
            }
            Some((n, _)) => {
                if fields.len() != 3 {
                    return Err(Error::parse(ctx, format!("bad entry line `{trimmed}`")));
                }
                let i = parse_usize(fields[0], ctx)?;
                let j = parse_usize(fields[1], ctx)?;
                if i == 0 || j == 0 || i > n || j > n {
                    return Err(Error::IndexOutOfRange {
                        row: i.wrapping_sub(1),
                        col: j.wrapping_sub(1),
                        n,
                    });
                }
                let v: f64 = fields[2]
                    .parse()
                    .map_err(|_| Error::parse(ctx, format!("bad value `{}`", fields[2])))?;
                triples.push((i - 1, j - 1, v));
                if symmetric && i != j {
                    triples.push((j - 1, i - 1, v));
                }
            }
        }
    }
    let (n, nnz) = size.ok_or_else(|| Error::parse(ctx, "missing size line"))?;
    let declared = if symmetric {
        triples.iter().filter(|t| t.0 >= t.1).count()
    } else {
        triples.len()
    };
    if declared != nnz {
        return Err(Error::parse(
            ctx,
            format!("header declares {nnz} entries, found {declared}"),
        ));
    }
    CsrMatrix::from_coo(n, &triples)
}

pub fn save_matrix(path: impl AsRef<Path>, a: &CsrMatrix) -> Result<()> {
    let mut buf = Vec::new();
    write_matrix(&mut buf, a)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<CsrMatrix> {
    read_matrix(fs::File::open(path)?)
}

pub fn save_vector(path: impl AsRef<Path>, v: &[f64]) -> Result<()> {
    let mut buf = String::with_capacity(v.len() * 24);
    for x in v {
        buf.push_str(&format!("{x:e}\n"));
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_vector(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.parse::<f64>()
                .map_err(|_| Error::parse(path.display().to_string(), format!("bad value `{l}`")))
        })
        .collect()
}

fn parse_usize(s: &str, ctx: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::parse(ctx, format!("bad integer `{s}`")))
}
