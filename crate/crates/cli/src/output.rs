//! Atomic output files. Every file carries a header with the resolved
//! configuration, the seed and the command parameters.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;

#[derive(Debug, Clone, Serialize)]
pub struct Header<'a, P: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub parameters: &'a P,
    pub config: &'a RunConfig,
}

impl<'a, P: Serialize> Header<'a, P> {
    pub fn new(command: &'static str, parameters: &'a P, config: &'a RunConfig) -> Self {
        Self { tool: "privacyface", version: env!("CARGO_PKG_VERSION"), command, seed: config.seed, parameters, config }
    }
}

#[derive(Serialize)]
struct Document<'a, H: Serialize, R: Serialize> {
    header: &'a H,
    result: &'a R,
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn json_document<H: Serialize, R: Serialize>(header: &H, result: &R) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(&Document { header, result }).expect("serializable");
    out.push(b'\n');
    out
}

/// First line is `{"header": ...}`, then one compact record per line.
pub fn json_lines<H: Serialize, R: Serialize>(header: &H, records: &[R]) -> Vec<u8> {
    #[derive(Serialize)]
    struct HeaderLine<'a, H: Serialize> {
        header: &'a H,
    }
    let mut out = serde_json::to_vec(&HeaderLine { header }).expect("serializable");
    out.push(b'\n');
    for r in records {
        serde_json::to_writer(&mut out, r).expect("serializable");
        out.push(b'\n');
    }
    out
}

/// `#`-prefixed header line followed by a CSV body.
pub fn csv_with_header<H: Serialize>(header: &H, columns: &[&str], rows: &[Vec<String>]) -> Vec<u8> {
    let mut out = Vec::new();
    writeln!(out, "# {}", serde_json::to_string(header).expect("serializable")).expect("in-memory write");
    let mut w = csv::Writer::from_writer(out);
    w.write_record(columns).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

pub fn path_in(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

/// Counts of `values` in `bins` equal-width bins over `[lo, hi]`; the last bin is closed.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        if v < lo || v > hi || v.is_nan() {
            continue;
        }
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
}
