//! On-disk formats for run outputs: a little-endian binary sample matrix,
//! line-delimited JSON traces and a tab-separated timing table.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nipa::{Branch, IterationRecord};

const MATRIX_MAGIC: &[u8; 8] = b"NIPAMAT1";

/// Writes `magic, rows: u64, cols: u64, data: f64...`, all little-endian.
pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MATRIX_MAGIC {
        return Err(Error::Serialization(format!(
            "{}: not a sample matrix file",
            path.display()
        )));
    }
    let mut word = [0u8; 8];
    r.read_exact(&mut word)?;
    let rows = u64::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let cols = u64::from_le_bytes(word) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Serialization(format!("{}: header overflows", path.display())))?;
    if bytes.len() != expected {
        return Err(Error::Serialization(format!(
            "{}: expected {expected} payload bytes for {rows}x{cols}, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Deterministic per-iteration trace line of the gated sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NipaTraceLine {
    pub t: usize,
    pub branch: Branch,
    pub d_star: f64,
    pub proposal_norm: f64,
    pub accepted: bool,
    pub log_density: Option<f64>,
    pub exact_evals: u64,
    pub refit: bool,
}

impl From<&IterationRecord> for NipaTraceLine {
    fn from(r: &IterationRecord) -> Self {
        Self {
            t: r.t,
            branch: r.branch,
            d_star: r.d_star,
            proposal_norm: r.proposal_norm,
            accepted: r.accepted,
            log_density: r.log_density.is_finite().then_some(r.log_density),
            exact_evals: r.exact_evals,
            refit: r.refit,
        }
    }
}

/// Per-iteration trace line of a baseline kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelRecord {
    pub t: usize,
    pub accepted: bool,
    /// Exact log-density of the state after the step, when the kernel computes one.
    pub log_density: Option<f64>,
    pub exact_evals: u64,
    #[serde(skip)]
    pub wall_nanos: u64,
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            column: e.column(),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// `t<TAB>wall_nanos` lines. Kept apart from the trace so the trace itself is
/// reproducible bit for bit.
pub fn write_timings(path: &Path, rows: impl IntoIterator<Item = (usize, u64)>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "t\twall_nanos")?;
    for (t, ns) in rows {
        writeln!(w, "{t}\t{ns}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_roundtrip_is_bit_exact() {
        let m =
            Matrix::from_vec(2, 3, vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -2.5, 3.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        write_matrix(&path, &m).unwrap();
        let back = read_matrix(&path).unwrap();
        assert_eq!(back.rows(), 2);
        let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn truncated_matrix_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        write_matrix(&path, &Matrix::zeros(4, 4)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_matrix(&path).is_err());
        std::fs::write(&path, b"NOTAMATRIX______________").unwrap();
        assert!(read_matrix(&path).is_err());
    }

    #[test]
    fn trace_roundtrip() {
        let lines = vec![
            NipaTraceLine {
                t: 101,
                branch: Branch::Ec,
                d_star: 0.25,
                proposal_norm: 0.01,
                accepted: true,
                log_density: Some(-3.5),
                exact_evals: 0,
                refit: false,
            },
            NipaTraceLine {
                t: 102,
                branch: Branch::Mb,
                d_star: 9.0,
                proposal_norm: 0.02,
                accepted: false,
                log_density: None,
                exact_evals: 11,
                refit: true,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        write_jsonl(&path, &lines).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("\"branch\":\"EC\""));
        let back: Vec<NipaTraceLine> = read_jsonl(&path).unwrap();
        assert_eq!(back, lines);
        std::fs::write(&path, "{\"t\": 1}\nnot json\n").unwrap();
        match read_jsonl::<NipaTraceLine>(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }
}
