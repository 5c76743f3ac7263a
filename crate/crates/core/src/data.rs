//! Dataset ingestion, train/test splitting and split persistence.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::targets::{Dataset, SplitTag, Task};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub stratify: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.9,
            seed: 0,
            stratify: false,
        }
    }
}

/// Sorted row indices of each side of a split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn train_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n - 1)
}

pub fn split_indices(dataset: &Dataset, spec: &SplitSpec) -> Result<Split> {
    let n = dataset.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("cannot split {n} rows")));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction {} outside (0, 1)",
            spec.train_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    if spec.stratify && dataset.task() == Task::Classification {
        for label in [0.0, 1.0] {
            let mut idx: Vec<usize> = (0..n).filter(|&i| dataset.y()[i] == label).collect();
            idx.shuffle(&mut rng);
            let k = ((spec.train_fraction * idx.len() as f64).round() as usize).min(idx.len());
            train.extend_from_slice(&idx[..k]);
            test.extend_from_slice(&idx[k..]);
        }
        if train.is_empty() || test.is_empty() {
            return Err(Error::InvalidArgument(
                "stratified split left one side empty".into(),
            ));
        }
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let k = train_count(n, spec.train_fraction);
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

pub fn apply_split(dataset: &Dataset, split: &Split) -> Result<(Dataset, Dataset)> {
    let train = dataset.subset(&split.train)?.with_split(SplitTag::Train);
    let test = dataset.subset(&split.test)?.with_split(SplitTag::Test);
    Ok((train, test))
}

pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Split)> {
    let s = split_indices(dataset, spec)?;
    let (train, test) = apply_split(dataset, &s)?;
    Ok((train, test, s))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Subsample {
    First { n: usize },
    Random { n: usize, seed: u64 },
}

pub fn subsample(dataset: &Dataset, how: Subsample) -> Result<Dataset> {
    let idx: Vec<usize> = match how {
        Subsample::First { n } => (0..n.min(dataset.len())).collect(),
        Subsample::Random { n, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx =
                rand::seq::index::sample(&mut rng, dataset.len(), n.min(dataset.len())).into_vec();
            idx.sort_unstable();
            idx
        }
    };
    dataset.subset(&idx)
}

/// Reads comma- or whitespace-delimited numeric text. The delimiter is
/// inferred from the first data line; `target_column` is a 0-based index.
pub fn load_delimited(
    path: &Path,
    target_column: usize,
    has_header: bool,
    task: Task,
) -> Result<Dataset> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let parse_err = |line: usize, column: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message,
    };

    let mut comma: Option<bool> = None;
    let mut width: Option<usize> = None;
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut rows = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if i == 0 && has_header {
            continue;
        }
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let is_comma = *comma.get_or_insert_with(|| trimmed.contains(','));
        let cells: Vec<&str> = if is_comma {
            trimmed.split(',').map(str::trim).collect()
        } else {
            trimmed.split_whitespace().collect()
        };
        let w = *width.get_or_insert(cells.len());
        if cells.len() != w {
            return Err(parse_err(
                line_no,
                cells.len().min(w) + 1,
                format!("expected {w} fields, found {}", cells.len()),
            ));
        }
        if target_column >= w {
            return Err(parse_err(
                line_no,
                target_column + 1,
                format!("target column {target_column} out of range for {w} fields"),
            ));
        }
        for (c, cell) in cells.iter().enumerate() {
            // str::parse is locale-independent: '.' is always the decimal point.
            let v: f64 = cell.parse().map_err(|_| {
                parse_err(line_no, c + 1, format!("cannot parse {cell:?} as a number"))
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    line_no,
                    c + 1,
                    format!("non-finite value {cell:?}"),
                ));
            }
            if c == target_column {
                y.push(v);
            } else {
                x.push(v);
            }
        }
        rows += 1;
    }
    let cols = width.map_or(0, |w| w - 1);
    log::info!(
        "loaded {rows} rows x {cols} features from {}",
        path.display()
    );
    Dataset::new(Matrix::from_vec(rows, cols, x)?, y, task, SplitTag::Train)
}

/// Writes features then the target as the last column, comma-separated, with
/// shortest round-trip float formatting.
pub fn write_delimited(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for i in 0..dataset.len() {
        for v in dataset.x().row(i) {
            write!(w, "{v:?},")?;
        }
        writeln!(w, "{:?}", dataset.y()[i])?;
    }
    w.flush()?;
    Ok(())
}

/// Digit labels 0..=9 to odd (1) vs even (0).
pub fn mnist_parity_labels(labels: &[f64]) -> Result<Vec<f64>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if l.fract() != 0.0 || !(0.0..=9.0).contains(&l) {
                Err(Error::InvalidArgument(format!(
                    "label {l} at row {i} is not a digit 0-9"
                )))
            } else {
                Ok(f64::from(l as u8 % 2))
            }
        })
        .collect()
}

pub fn write_indices(path: &Path, indices: &[usize]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for i in indices {
        writeln!(w, "{i}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_indices(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                column: 1,
                message: format!("{l:?} is not an index"),
            })
        })
        .collect()
}
