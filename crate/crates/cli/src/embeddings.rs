//! Embedding files.
//!
//! CSV: a `n,d` line, then `n` rows of `d` comma-separated decimals.
//! Binary: `DPLC`, `n` and `d` as little-endian `u32`, then `n·d`
//! little-endian `f32` values, row-major.
//! Both formats hold single-precision values.

use std::io::Write;
use std::path::Path;

use privacyface::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"DPLC";

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingsError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Malformed { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Binary,
}

impl Format {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("dplc") => Format::Binary,
            _ => Format::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub rows: Matrix,
    /// Rows whose norm differed from 1 by more than `1e-6` before normalization.
    pub renormalized: usize,
}

fn malformed(path: &Path, message: impl Into<String>) -> EmbeddingsError {
    EmbeddingsError::Malformed { path: path.display().to_string(), message: message.into() }
}

/// Rows exactly as stored. Binary is recognised by its magic bytes.
pub fn read_raw(path: &Path) -> Result<Matrix, EmbeddingsError> {
    let bytes = std::fs::read(path).map_err(|source| EmbeddingsError::Io { path: path.display().to_string(), source })?;
    if bytes.starts_with(MAGIC) {
        decode_binary(&bytes, path)
    } else {
        decode_csv(&bytes, path)
    }
}

/// Rows scaled to unit length.
pub fn read(path: &Path) -> Result<Embeddings, EmbeddingsError> {
    normalize_rows(read_raw(path)?, path)
}

fn normalize_rows(mut m: Matrix, path: &Path) -> Result<Embeddings, EmbeddingsError> {
    let mut renormalized = 0;
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let n = privacyface::linalg::norm(row);
        if !(n > 0.0) || !n.is_finite() {
            return Err(malformed(path, format!("row {i} has norm {n}")));
        }
        if (n - 1.0).abs() > 1e-6 {
            renormalized += 1;
        }
        row.iter_mut().for_each(|x| *x /= n);
    }
    if renormalized > 0 {
        log::warn!("{}: normalized {renormalized} rows that were not unit length", path.display());
    }
    Ok(Embeddings { rows: m, renormalized })
}

fn decode_binary(bytes: &[u8], path: &Path) -> Result<Matrix, EmbeddingsError> {
    if bytes.len() < 12 {
        return Err(malformed(path, "truncated header"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if n == 0 || d == 0 {
        return Err(malformed(path, format!("empty shape {n}x{d}")));
    }
    let body = &bytes[12..];
    let expected = n.checked_mul(d).and_then(|k| k.checked_mul(4)).ok_or_else(|| malformed(path, "shape overflows"))?;
    if body.len() != expected {
        return Err(malformed(path, format!("header says {n}x{d} ({expected} bytes), body has {} bytes", body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    Matrix::from_vec(n, d, data).map_err(|e| malformed(path, e.to_string()))
}

fn decode_csv(bytes: &[u8], path: &Path) -> Result<Matrix, EmbeddingsError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(bytes);
    let mut records = reader.records();
    let header = records
        .next()
        .ok_or_else(|| malformed(path, "missing `n,d` header"))?
        .map_err(|e| malformed(path, e.to_string()))?;
    let dims: Vec<usize> = header.iter().map(str::parse).collect::<Result<_, _>>().map_err(|_| {
        malformed(path, format!("header must be `n,d`, got `{}`", header.iter().collect::<Vec<_>>().join(",")))
    })?;
    let [n, d] = dims[..] else {
        return Err(malformed(path, "header must have exactly two fields"));
    };
    if n == 0 || d == 0 {
        return Err(malformed(path, format!("empty shape {n}x{d}")));
    }
    let mut data = Vec::with_capacity(n * d);
    let mut rows = 0;
    for (i, rec) in records.enumerate() {
        let rec = rec.map_err(|e| malformed(path, e.to_string()))?;
        if rec.len() != d {
            return Err(malformed(path, format!("row {i} has {} values, expected {d}", rec.len())));
        }
        for field in rec.iter() {
            let x: f32 = field.parse().map_err(|_| malformed(path, format!("row {i}: `{field}` is not a number")))?;
            data.push(x as f64);
        }
        rows += 1;
    }
    if rows != n {
        return Err(malformed(path, format!("header says {n} rows, found {rows}")));
    }
    Matrix::from_vec(n, d, data).map_err(|e| malformed(path, e.to_string()))
}

/// Values are stored as `f32`; CSV uses the shortest decimal that reads back to the same `f32`.
pub fn encode(m: &Matrix, format: Format) -> Vec<u8> {
    match format {
        Format::Binary => {
            let mut out = Vec::with_capacity(12 + 4 * m.as_slice().len());
            out.extend_from_slice(MAGIC);
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for &x in m.as_slice() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
            out
        }
        Format::Csv => {
            let mut out = Vec::new();
            writeln!(out, "{},{}", m.rows(), m.cols()).expect("in-memory write");
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
            for row in m.iter_rows() {
                w.write_record(row.iter().map(|&x| (x as f32).to_string())).expect("in-memory write");
            }
            w.into_inner().expect("in-memory write")
        }
    }
}
