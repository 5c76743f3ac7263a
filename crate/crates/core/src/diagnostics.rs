//! Effective sample size, predictive coverage, calibration and the metrics
//! report shared by every sampler.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{self, sigmoid, NetSpec};

/// Minimum chain length accepted by [`ess`].
pub const MIN_CHAIN: usize = 10;
/// Minimum posterior draws for predictive intervals.
pub const MIN_PREDICTIVE_SAMPLES: usize = 50;

/// Linear-interpolation quantile (type 7) of an ascending slice.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty slice");
    let p = p.clamp(0.0, 1.0);
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Biased (divide by `S`) autocovariances at lags `0..S`, via zero-padded FFT.
pub fn autocovariance(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .map(|v| Complex::new(v - mean, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    let scale = 1.0 / (size as f64 * n as f64);
    buf[..n].iter().map(|c| c.re * scale).collect()
}

/// Geyer's initial monotone sequence estimate of the integrated
/// autocorrelation time `1 + 2 sum rho_k` from autocorrelations `rho`.
pub(crate) fn geyer_tau(rho: &[f64]) -> f64 {
    let n = rho.len();
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut m = 0;
    while 2 * m + 1 < n {
        let mut gamma = rho[2 * m] + rho[2 * m + 1];
        if gamma <= 0.0 {
            break;
        }
        if gamma > prev {
            gamma = prev;
        }
        sum += gamma;
        prev = gamma;
        m += 1;
    }
    2.0 * sum - 1.0
}

/// Effective sample size of a scalar chain, clamped to `(0, S]`. A constant
/// chain has ESS 1 by convention (a warning is logged).
pub fn ess(chain: &[f64]) -> Result<f64> {
    let s = chain.len();
    if s < MIN_CHAIN {
        return Err(Error::TooFewSamples {
            got: s,
            required: MIN_CHAIN,
        });
    }
    if chain.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "ess chain".into(),
            iterate: None,
        });
    }
    let acov = autocovariance(chain);
    if !(acov[0] > 0.0) {
        log::warn!("zero-variance chain; reporting ESS = 1");
        return Ok(1.0);
    }
    let rho: Vec<f64> = acov.iter().map(|c| c / acov[0]).collect();
    let tau = geyer_tau(&rho);
    let sf = s as f64;
    if !(tau > 0.0) {
        return Ok(sf);
    }
    Ok((sf / tau).clamp(f64::MIN_POSITIVE, sf))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EssSummary {
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub wall_seconds: f64,
    pub min_ess_per_sec: f64,
    pub speedup: Option<f64>,
}

/// Per-column ESS of an `S x D` sample matrix.
pub fn column_ess(samples: &Matrix) -> Result<Vec<f64>> {
    (0..samples.cols())
        .into_par_iter()
        .map(|j| ess(&samples.column_values(j)))
        .collect()
}

/// Min/median/max of per-coordinate ESS and `min / wall_seconds`; `speedup`
/// divides that rate by `baseline_min_ess_per_sec` when given.
pub fn ess_summary(
    samples: &Matrix,
    wall_seconds: f64,
    baseline_min_ess_per_sec: Option<f64>,
) -> Result<EssSummary> {
    if samples.cols() == 0 {
        return Err(Error::InvalidArgument(
            "ess_summary needs at least one column".into(),
        ));
    }
    let mut per = column_ess(samples)?;
    per.sort_by(f64::total_cmp);
    let min = per[0];
    let min_ess_per_sec = min / wall_seconds;
    Ok(EssSummary {
        min,
        median: quantile(&per, 0.5),
        max: per[per.len() - 1],
        wall_seconds,
        min_ess_per_sec,
        speedup: baseline_min_ess_per_sec.map(|b| min_ess_per_sec / b),
    })
}

/// Rows after discarding the leading `fraction` of the chain.
pub fn drop_burn_in(samples: &Matrix, fraction: f64) -> Matrix {
    let skip = (samples.rows() as f64 * fraction.clamp(0.0, 1.0)).floor() as usize;
    samples.tail_rows(skip)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveInterval {
    pub lower: f64,
    pub upper: f64,
}

fn check_samples(samples: &Matrix, spec: &NetSpec) -> Result<()> {
    if samples.rows() < MIN_PREDICTIVE_SAMPLES {
        return Err(Error::TooFewSamples {
            got: samples.rows(),
            required: MIN_PREDICTIVE_SAMPLES,
        });
    }
    if samples.cols() != spec.num_params() {
        return Err(Error::DimensionMismatch {
            context: "posterior samples".into(),
            expected: spec.num_params(),
            found: samples.cols(),
        });
    }
    Ok(())
}

/// Network outputs for every sample: `S x N` (single-output networks).
pub fn sample_outputs(spec: &NetSpec, samples: &Matrix, x: &Matrix) -> Result<Matrix> {
    if spec.output_dim() != 1 {
        return Err(Error::InvalidSpec(
            "predictive summaries need a single output".into(),
        ));
    }
    let rows: Vec<Vec<f64>> = (0..samples.rows())
        .into_par_iter()
        .map(|s| nn::forward(spec, samples.row(s), x).map(Matrix::into_vec))
        .collect::<Result<_>>()?;
    Matrix::from_rows(&rows)
}

/// Posterior predictive mean `mean_s f_s(x_i)` for each test point.
pub fn predictive_mean(spec: &NetSpec, samples: &Matrix, x: &Matrix) -> Result<Vec<f64>> {
    let f = sample_outputs(spec, samples, x)?;
    let s = f.rows() as f64;
    Ok((0..f.cols())
        .map(|i| f.column_values(i).iter().sum::<f64>() / s)
        .collect())
}

/// Central `level` intervals of `f_s(x_i) + N(0, noise_var)` over posterior draws.
pub fn predictive_intervals<R: Rng + ?Sized>(
    spec: &NetSpec,
    samples: &Matrix,
    x: &Matrix,
    noise_var: f64,
    level: f64,
    rng: &mut R,
) -> Result<Vec<PredictiveInterval>> {
    check_samples(samples, spec)?;
    if !(level > 0.0 && level < 1.0) || !(noise_var >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "level {level} must be in (0, 1) and noise_var {noise_var} >= 0"
        )));
    }
    let f = sample_outputs(spec, samples, x)?;
    let sd = noise_var.sqrt();
    let (lo, hi) = ((1.0 - level) / 2.0, (1.0 + level) / 2.0);
    let mut out = Vec::with_capacity(f.cols());
    let mut draws = vec![0.0; f.rows()];
    for i in 0..f.cols() {
        for (s, d) in draws.iter_mut().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            *d = f.get(s, i) + sd * e;
        }
        draws.sort_by(f64::total_cmp);
        out.push(PredictiveInterval {
            lower: quantile(&draws, lo),
            upper: quantile(&draws, hi),
        });
    }
    Ok(out)
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            context: what.into(),
            expected: a,
            found: b,
        });
    }
    Ok(())
}

/// Fraction of targets inside their intervals (endpoints inclusive).
pub fn cp95(intervals: &[PredictiveInterval], y: &[f64]) -> Result<f64> {
    check_len(intervals.len(), y.len(), "coverage targets")?;
    if y.is_empty() {
        return Err(Error::InvalidArgument(
            "coverage of an empty test set".into(),
        ));
    }
    let hit = intervals
        .iter()
        .zip(y)
        .filter(|(iv, &v)| iv.lower <= v && v <= iv.upper)
        .count();
    Ok(hit as f64 / y.len() as f64)
}

pub fn rmse(pred: &[f64], y: &[f64]) -> Result<f64> {
    check_len(pred.len(), y.len(), "rmse targets")?;
    if y.is_empty() {
        return Err(Error::InvalidArgument("rmse of an empty test set".into()));
    }
    let mse = pred
        .iter()
        .zip(y)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / y.len() as f64;
    Ok(mse.sqrt())
}

/// `N x 2` class probabilities `[1 - p, p]` averaged over posterior draws of
/// the inverse-logit output.
pub fn posterior_mean_probs(spec: &NetSpec, samples: &Matrix, x: &Matrix) -> Result<Matrix> {
    if samples.rows() == 0 {
        return Err(Error::TooFewSamples {
            got: 0,
            required: 1,
        });
    }
    let logits = sample_outputs(spec, samples, x)?;
    let s = logits.rows() as f64;
    let mut probs = Matrix::zeros(logits.cols(), 2);
    for i in 0..logits.cols() {
        let p = logits
            .column_values(i)
            .iter()
            .map(|&z| sigmoid(z))
            .sum::<f64>()
            / s;
        probs.set(i, 0, 1.0 - p);
        probs.set(i, 1, p);
    }
    Ok(probs)
}

fn validate_probs(probs: &Matrix, labels: &[f64]) -> Result<()> {
    check_len(probs.rows(), labels.len(), "probability rows")?;
    if probs.cols() < 2 {
        return Err(Error::InvalidProbability {
            row: 0,
            message: format!("need at least two classes, got {}", probs.cols()),
        });
    }
    for i in 0..probs.rows() {
        let row = probs.row(i);
        if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidProbability {
                row: i,
                message: "entries must lie in [0, 1]".into(),
            });
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidProbability {
                row: i,
                message: format!("row sums to {sum}"),
            });
        }
        let y = labels[i];
        if y < 0.0 || y.fract() != 0.0 || y as usize >= probs.cols() {
            return Err(Error::InvalidProbability {
                row: i,
                message: format!("label {y} is not a class index"),
            });
        }
    }
    Ok(())
}

/// Predicted class (first maximum) and its probability.
fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (k, &p) in row.iter().enumerate().skip(1) {
        if p > best.1 {
            best = (k, p);
        }
    }
    best
}

pub fn accuracy(probs: &Matrix, labels: &[f64]) -> Result<f64> {
    validate_probs(probs, labels)?;
    if labels.is_empty() {
        return Err(Error::InvalidArgument(
            "accuracy of an empty test set".into(),
        ));
    }
    let hit = (0..probs.rows())
        .filter(|&i| argmax(probs.row(i)).0 == labels[i] as usize)
        .count();
    Ok(hit as f64 / labels.len() as f64)
}

/// Expected calibration error over `bins` equal-width confidence bins.
pub fn ece(probs: &Matrix, labels: &[f64], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::InvalidArgument("ece needs at least one bin".into()));
    }
    validate_probs(probs, labels)?;
    let n = labels.len();
    if n == 0 {
        return Err(Error::InvalidArgument("ece of an empty test set".into()));
    }
    let mut count = vec![0usize; bins];
    let mut correct = vec![0.0; bins];
    let mut conf = vec![0.0; bins];
    for i in 0..n {
        let (k, c) = argmax(probs.row(i));
        let b = ((c * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += c;
        if k == labels[i] as usize {
            correct[b] += 1.0;
        }
    }
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            m / n as f64 * (correct[b] / m - conf[b] / m).abs()
        })
        .sum())
}

/// One row of results; the same schema for every sampler.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sampler: String,
    pub task: String,
    pub samples: usize,
    pub dim: usize,
    /// RMSE for regression, accuracy for classification.
    pub rmse_or_acc: f64,
    /// CP95 for regression, ECE for classification.
    pub cp95_or_ece: f64,
    /// Sampling-phase wall-clock, the denominator of `min_ess_per_sec`.
    pub wall_seconds: f64,
    /// Wall-clock including pool construction.
    pub total_seconds: f64,
    pub min_ess: f64,
    pub median_ess: f64,
    pub max_ess: f64,
    pub min_ess_per_sec: f64,
    pub speedup: f64,
    pub exact_evals: u64,
    pub acceptance: f64,
    pub mb_fraction: f64,
    pub mf_fraction: f64,
    pub ec_fraction: f64,
}

const REPORT_KEYS: [&str; 18] = [
    "sampler",
    "task",
    "samples",
    "dim",
    "rmse_or_acc",
    "cp95_or_ece",
    "wall_seconds",
    "total_seconds",
    "min_ess",
    "median_ess",
    "max_ess",
    "min_ess_per_sec",
    "speedup",
    "exact_evals",
    "acceptance",
    "mb_fraction",
    "mf_fraction",
    "ec_fraction",
];

impl MetricsReport {
    fn values(&self) -> Vec<String> {
        vec![
            self.sampler.clone(),
            self.task.clone(),
            self.samples.to_string(),
            self.dim.to_string(),
            format!("{:?}", self.rmse_or_acc),
            format!("{:?}", self.cp95_or_ece),
            format!("{:?}", self.wall_seconds),
            format!("{:?}", self.total_seconds),
            format!("{:?}", self.min_ess),
            format!("{:?}", self.median_ess),
            format!("{:?}", self.max_ess),
            format!("{:?}", self.min_ess_per_sec),
            format!("{:?}", self.speedup),
            self.exact_evals.to_string(),
            format!("{:?}", self.acceptance),
            format!("{:?}", self.mb_fraction),
            format!("{:?}", self.mf_fraction),
            format!("{:?}", self.ec_fraction),
        ]
    }

    /// `key = value` lines.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        for (k, v) in REPORT_KEYS.iter().zip(self.values()) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn table_header() -> String {
        REPORT_KEYS.join("\t")
    }

    pub fn table_row(&self) -> String {
        self.values().join("\t")
    }

    pub fn from_key_value(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: "<metrics>".into(),
                line: i + 1,
                column: 1,
                message: "expected `key = value`".into(),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let missing: Vec<String> = REPORT_KEYS
            .iter()
            .filter(|k| !map.contains_key(**k))
            .map(|k| format!("metrics field `{k}` is missing"))
            .collect();
        if !missing.is_empty() {
            return Err(Error::InvalidConfig(missing));
        }
        let num = |k: &str| -> Result<f64> {
            map[k]
                .parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("metrics field `{k}`: {e}")))
        };
        let int = |k: &str| -> Result<u64> {
            map[k]
                .parse::<u64>()
                .map_err(|e| Error::InvalidArgument(format!("metrics field `{k}`: {e}")))
        };
        Ok(Self {
            sampler: map["sampler"].clone(),
            task: map["task"].clone(),
            samples: int("samples")? as usize,
            dim: int("dim")? as usize,
            rmse_or_acc: num("rmse_or_acc")?,
            cp95_or_ece: num("cp95_or_ece")?,
            wall_seconds: num("wall_seconds")?,
            total_seconds: num("total_seconds")?,
            min_ess: num("min_ess")?,
            median_ess: num("median_ess")?,
            max_ess: num("max_ess")?,
            min_ess_per_sec: num("min_ess_per_sec")?,
            speedup: num("speedup")?,
            exact_evals: int("exact_evals")?,
            acceptance: num("acceptance")?,
            mb_fraction: num("mb_fraction")?,
            mf_fraction: num("mf_fraction")?,
            ec_fraction: num("ec_fraction")?,
        })
    }
}

/// Candidate minESS/s relative to the baseline's.
pub fn speedup(baseline: &MetricsReport, candidate: &MetricsReport) -> f64 {
    candidate.min_ess_per_sec / baseline.min_ess_per_sec
}

/// Side-by-side comparison table.
pub fn compare_table(baseline: &MetricsReport, candidate: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<18}{:>18}{:>18}",
        "metric", baseline.sampler, candidate.sampler
    );
    for ((k, a), b) in REPORT_KEYS
        .iter()
        .zip(baseline.values())
        .zip(candidate.values())
        .skip(2)
    {
        let _ = writeln!(s, "{k:<18}{a:>18}{b:>18}");
    }
    let _ = writeln!(
        s,
        "{:<18}{:>36}",
        "speedup_vs_base",
        format!("{:.4}", speedup(baseline, candidate))
    );
    s
}
