//! End-to-end runs: build the target from a config, run a sampler, write
//! outputs into a fresh directory and compute metrics.

use crate::Instant;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{run_baseline, Baseline};
use crate::config::{ExperimentConfig, SamplerKind, TargetType};
use crate::data::{self, Split, SplitSpec, Subsample};
use crate::diagnostics::{self, MetricsReport};
use crate::error::{Error, Result};
use crate::io::{self, NipaTraceLine};
use crate::matrix::Matrix;
use crate::nipa::{Branch, NipaSampler, Thresholds};
use crate::nn::{Activation, NetSpec, ParamVector};
use crate::synthetic::{self, SyntheticClassification, SyntheticRegression};
use crate::targets::{Dataset, SplitTag, TargetModel, Task};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const SAMPLES: &str = "samples.bin";
pub const POOL_STATES: &str = "pool_states.bin";
pub const TRACE: &str = "trace.jsonl";
pub const TIMINGS: &str = "timings.tsv";
pub const RUN_SUMMARY: &str = "run.json";
pub const METRICS: &str = "metrics.txt";
pub const METRICS_TABLE: &str = "metrics.tsv";
pub const CHECKPOINT: &str = "chain.bin";
pub const POOL: &str = "pool.bin";
pub const SURROGATE: &str = "surrogate.bin";

/// A target plus the held-out data its metrics need.
pub struct Problem {
    pub target: TargetModel,
    pub test: Option<Dataset>,
    pub split: Option<Split>,
    /// Generating parameters of synthetic data.
    pub theta_star: Option<ParamVector>,
}

impl Problem {
    pub fn train(&self) -> Option<&Dataset> {
        self.target.data()
    }
}

fn count_fields(path: &Path, has_header: bool) -> Result<usize> {
    let text = fs::read_to_string(path)?;
    let line = text
        .lines()
        .skip(usize::from(has_header))
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no data rows", path.display())))?;
    let line = line.trim();
    Ok(if line.contains(',') {
        line.split(',').count()
    } else {
        line.split_whitespace().count()
    })
}

fn load_table(cfg: &ExperimentConfig, path: &Path) -> Result<Dataset> {
    let t = &cfg.target;
    let column = match t.target_column {
        Some(c) => c,
        None => count_fields(path, t.has_header)?.saturating_sub(1),
    };
    let ds = data::load_delimited(path, column, t.has_header, t.task)?;
    if t.parity_labels {
        let y = data::mnist_parity_labels(ds.y())?;
        return Dataset::new(ds.x().clone(), y, t.task, ds.split());
    }
    Ok(ds)
}

fn subsample_rows(cfg: &ExperimentConfig, ds: Dataset) -> Result<Dataset> {
    match cfg.target.subsample {
        None => Ok(ds),
        Some(n) if cfg.target.subsample_random => data::subsample(
            &ds,
            Subsample::Random {
                n,
                seed: cfg.seed.wrapping_add(2),
            },
        ),
        Some(n) => data::subsample(&ds, Subsample::First { n }),
    }
}

fn split_spec(cfg: &ExperimentConfig, task: Task) -> SplitSpec {
    SplitSpec {
        train_fraction: cfg.data.train_fraction,
        seed: cfg.data.split_seed.unwrap_or(cfg.seed.wrapping_add(1)),
        stratify: cfg.data.stratify.unwrap_or(task == Task::Classification),
    }
}

/// Builds the target. Synthetic data is regenerated from the seed, so the same
/// config always yields the same problem.
pub fn build_problem(cfg: &ExperimentConfig) -> Result<Problem> {
    let t = &cfg.target;
    let (spec, full, theta_star, test) = match t.kind {
        TargetType::Gaussian => {
            return Ok(Problem {
                target: TargetModel::gaussian(vec![t.scale; t.dim])?,
                test: None,
                split: None,
                theta_star: None,
            })
        }
        TargetType::Banana => {
            return Ok(Problem {
                target: TargetModel::banana(t.dim, t.scale, t.curvature)?,
                test: None,
                split: None,
                theta_star: None,
            })
        }
        TargetType::SyntheticRegression => {
            let d = SyntheticRegression::default();
            let gen = SyntheticRegression {
                n: t.n.unwrap_or(d.n),
                d: t.d.unwrap_or(d.d),
                h1: t.h1.unwrap_or(d.h1),
                h2: t.h2.unwrap_or(d.h2),
                noise_var: t.noise_var,
                theta_bound: t.theta_bound,
                train_fraction: cfg.data.train_fraction,
            };
            let s = synthetic::make_synthetic_regression(&gen, cfg.seed)?;
            (s.spec, s.full, Some(s.theta_star), None)
        }
        TargetType::SyntheticClassification => {
            let d = SyntheticClassification::default();
            let gen = SyntheticClassification {
                n: t.n.unwrap_or(d.n),
                d: t.d.unwrap_or(d.d),
                h1: t.h1.unwrap_or(d.h1),
                h2: t.h2.unwrap_or(d.h2),
                blocks: None,
                train_fraction: cfg.data.train_fraction,
            };
            let s = synthetic::make_synthetic_classification(&gen, cfg.seed)?;
            (s.spec, s.full, Some(s.theta_star), None)
        }
        TargetType::Delimited => {
            let path = t
                .path
                .as_deref()
                .ok_or_else(|| Error::InvalidConfig(vec!["target.path is required".into()]))?;
            let full = load_table(cfg, path)?;
            let test = match &t.test_path {
                Some(p) => Some(load_table(cfg, p)?.with_split(SplitTag::Test)),
                None => None,
            };
            let spec = NetSpec::mlp(
                full.num_features(),
                &t.hidden,
                1,
                t.activation,
                Activation::Identity,
            )?;
            (spec, full, None, test)
        }
    };
    let task = full.task();
    let full = subsample_rows(cfg, full)?;
    let (train, test, split) = match test {
        Some(test) => (full, test, None),
        None => {
            let (train, test, s) = data::split(&full, &split_spec(cfg, task))?;
            (train, test, Some(s))
        }
    };
    if test.num_features() != train.num_features() {
        return Err(Error::DimensionMismatch {
            context: "test features".into(),
            expected: train.num_features(),
            found: test.num_features(),
        });
    }
    let train = Arc::new(train);
    let target = match task {
        Task::Regression => TargetModel::bnn_regression(spec, train, t.noise_var, t.prior_var)?,
        Task::Classification => TargetModel::bnn_classification(spec, train, t.prior_var)?,
    };
    Ok(Problem {
        target,
        test: Some(test),
        split,
        theta_star,
    })
}

/// Creates `dir`, refusing to reuse an existing path.
pub fn create_output_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        return Err(Error::OutputExists(dir.to_path_buf()));
    }
    if let Some(parent) = dir.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    match fs::create_dir(dir) {
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
            Err(Error::OutputExists(dir.to_path_buf()))
        }
        other => Ok(other?),
    }
}

/// A fresh directory name under `runs/` when the config names none.
pub fn default_out_dir(cfg: &ExperimentConfig) -> PathBuf {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    PathBuf::from("runs").join(format!("{}-seed{}-{stamp}", cfg.sampler.kind, cfg.seed))
}

fn write_split(dir: &Path, split: &Option<Split>) -> Result<()> {
    if let Some(s) = split {
        data::write_indices(&dir.join("train_indices.txt"), &s.train)?;
        data::write_indices(&dir.join("test_indices.txt"), &s.test)?;
    }
    Ok(())
}

fn check_config(cfg: &ExperimentConfig, dim: Option<usize>) -> Result<()> {
    let errs = cfg.validate(dim);
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(errs))
    }
}

/// Writes the dataset a config describes: `train.csv`, `test.csv`, split
/// indices and, for synthetic data, `theta_star.bin`.
pub fn generate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    check_config(cfg, None)?;
    let problem = build_problem(cfg)?;
    let train = problem.train().ok_or_else(|| {
        Error::InvalidArgument("analytic targets have no dataset to generate".into())
    })?;
    create_output_dir(out)?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_toml()?)?;
    data::write_delimited(&out.join("train.csv"), train)?;
    if let Some(test) = &problem.test {
        data::write_delimited(&out.join("test.csv"), test)?;
    }
    write_split(out, &problem.split)?;
    if let Some(theta) = &problem.theta_star {
        io::write_matrix(
            &out.join("theta_star.bin"),
            &Matrix::from_vec(1, theta.dim(), theta.to_vec())?,
        )?;
    }
    log::info!(
        "wrote dataset ({} train rows) to {}",
        train.len(),
        out.display()
    );
    Ok(())
}

/// Run facts the metrics need beyond the sample matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub sampler: SamplerKind,
    pub dim: usize,
    pub samples: usize,
    /// Phase-3 (or baseline sampling) wall-clock.
    pub sampling_seconds: f64,
    /// Including warm-up and surrogate fitting.
    pub total_seconds: f64,
    pub exact_evals: u64,
    pub acceptance: f64,
    /// Branch fractions; unset for baselines, which have no gate.
    pub mb_fraction: Option<f64>,
    pub mf_fraction: Option<f64>,
    pub ec_fraction: Option<f64>,
    pub hmc_step_size: Option<f64>,
    pub sghmc_step_size: Option<f64>,
    pub sigma_rw: Option<f64>,
    pub thresholds: Vec<Thresholds>,
}

/// What [`sample`] produced.
pub struct RunOutput {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub metrics: MetricsReport,
}

/// Runs the configured sampler and writes every output into `out`, which must
/// not exist yet. Configuration problems are reported before anything is
/// created.
pub fn sample(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutput> {
    check_config(cfg, None)?;
    let problem = build_problem(cfg)?;
    let dim = problem.target.dim();
    check_config(cfg, Some(dim))?;
    let baseline = match &cfg.diagnostics.baseline_metrics {
        Some(p) => Some(MetricsReport::from_key_value(&fs::read_to_string(p)?)?),
        None => None,
    };
    create_output_dir(out)?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_toml()?)?;
    write_split(out, &problem.split)?;

    let nipa_cfg = cfg.nipa_config();
    let start = Instant::now();
    let (samples, summary) = match cfg.sampler.kind.baseline() {
        None => {
            let mut sampler = NipaSampler::initialize(&problem.target, nipa_cfg)?;
            let checkpoint = out.join(CHECKPOINT);
            sampler.run(&problem.target, Some(&checkpoint))?;
            sampler.save(&checkpoint)?;
            sampler.pool().save(&out.join(POOL))?;
            if let Some(s) = sampler.surrogate() {
                s.save(&out.join(SURROGATE))?;
            }
            let tr = sampler.trace();
            io::write_jsonl(&out.join(TRACE), tr.records.iter().map(NipaTraceLine::from))?;
            io::write_timings(
                &out.join(TIMINGS),
                tr.records.iter().map(|r| (r.t, r.wall_nanos)),
            )?;
            io::write_matrix(&out.join(POOL_STATES), &tr.pool_states)?;
            let summary = RunSummary {
                sampler: SamplerKind::Nipa,
                dim,
                samples: tr.samples.rows(),
                sampling_seconds: tr.sampling_seconds,
                total_seconds: start.elapsed().as_secs_f64(),
                exact_evals: tr.phase3_exact_evals,
                acceptance: tr.acceptance_rate(),
                mb_fraction: Some(tr.branch_fraction(Branch::Mb)),
                mf_fraction: Some(tr.branch_fraction(Branch::Mf)),
                ec_fraction: Some(tr.branch_fraction(Branch::Ec)),
                hmc_step_size: Some(tr.hmc_step_size),
                sghmc_step_size: Some(tr.sghmc_step_size),
                sigma_rw: Some(tr.sigma_rw),
                thresholds: tr.thresholds.clone(),
            };
            (tr.samples.clone(), summary)
        }
        Some(kind) => {
            let run = run_baseline(
                &problem.target,
                &nipa_cfg,
                kind,
                cfg.sampler.samples,
                cfg.sampler.rw_sigma,
            )?;
            io::write_jsonl(&out.join(TRACE), &run.records)?;
            io::write_timings(
                &out.join(TIMINGS),
                run.records.iter().map(|r| (r.t, r.wall_nanos)),
            )?;
            io::write_matrix(&out.join(POOL_STATES), &run.pool_states)?;
            let summary = RunSummary {
                sampler: cfg.sampler.kind,
                dim,
                samples: run.samples.rows(),
                sampling_seconds: run.sampling_seconds,
                total_seconds: start.elapsed().as_secs_f64(),
                exact_evals: run.exact_evals,
                acceptance: run.acceptance_rate(),
                mb_fraction: None,
                mf_fraction: None,
                ec_fraction: None,
                hmc_step_size: (kind == Baseline::Hmc).then_some(run.step_size),
                sghmc_step_size: (kind == Baseline::Sghmc).then_some(run.step_size),
                sigma_rw: (kind == Baseline::Rw).then_some(run.step_size),
                thresholds: Vec::new(),
            };
            (run.samples, summary)
        }
    };
    io::write_matrix(&out.join(SAMPLES), &samples)?;
    fs::write(
        out.join(RUN_SUMMARY),
        serde_json::to_string_pretty(&summary)?,
    )?;
    let metrics = compute_metrics(cfg, &problem, &samples, &summary, baseline.as_ref())?;
    write_metrics(out, &metrics)?;
    log::info!(
        "{} run finished: minESS {:.1}, {:.3} s sampling, outputs in {}",
        summary.sampler,
        metrics.min_ess,
        summary.sampling_seconds,
        out.display()
    );
    Ok(RunOutput {
        dir: out.to_path_buf(),
        summary,
        metrics,
    })
}

fn write_metrics(dir: &Path, m: &MetricsReport) -> Result<()> {
    fs::write(dir.join(METRICS), m.to_key_value())?;
    fs::write(
        dir.join(METRICS_TABLE),
        format!("{}\n{}\n", MetricsReport::table_header(), m.table_row()),
    )?;
    Ok(())
}

/// Predictive and mixing metrics of a stored chain. The leading
/// `diagnostics.burn_in` fraction of rows is discarded first.
pub fn compute_metrics(
    cfg: &ExperimentConfig,
    problem: &Problem,
    samples: &Matrix,
    summary: &RunSummary,
    baseline: Option<&MetricsReport>,
) -> Result<MetricsReport> {
    let kept = diagnostics::drop_burn_in(samples, cfg.diagnostics.burn_in);
    let ess = diagnostics::ess_summary(
        &kept,
        summary.sampling_seconds,
        baseline.map(|b| b.min_ess_per_sec),
    )?;
    let (task, primary, secondary) = match (problem.target.net_spec(), &problem.test) {
        (Some(spec), Some(test)) => match test.task() {
            Task::Regression => {
                let pred = diagnostics::predictive_mean(spec, &kept, test.x())?;
                let rmse = diagnostics::rmse(&pred, test.y())?;
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
                let noise = problem.target.noise_var().unwrap_or(cfg.target.noise_var);
                let iv = diagnostics::predictive_intervals(
                    spec,
                    &kept,
                    test.x(),
                    noise,
                    cfg.diagnostics.level,
                    &mut rng,
                )?;
                ("regression", rmse, diagnostics::cp95(&iv, test.y())?)
            }
            Task::Classification => {
                let probs = diagnostics::posterior_mean_probs(spec, &kept, test.x())?;
                (
                    "classification",
                    diagnostics::accuracy(&probs, test.y())?,
                    diagnostics::ece(&probs, test.y(), cfg.diagnostics.bins)?,
                )
            }
        },
        _ => ("analytic", f64::NAN, f64::NAN),
    };
    Ok(MetricsReport {
        sampler: summary.sampler.to_string(),
        task: task.into(),
        samples: kept.rows(),
        dim: summary.dim,
        rmse_or_acc: primary,
        cp95_or_ece: secondary,
        wall_seconds: summary.sampling_seconds,
        total_seconds: summary.total_seconds,
        min_ess: ess.min,
        median_ess: ess.median,
        max_ess: ess.max,
        min_ess_per_sec: ess.min_ess_per_sec,
        speedup: ess.speedup.unwrap_or(f64::NAN),
        exact_evals: summary.exact_evals,
        acceptance: summary.acceptance,
        mb_fraction: summary.mb_fraction.unwrap_or(f64::NAN),
        mf_fraction: summary.mf_fraction.unwrap_or(f64::NAN),
        ec_fraction: summary.ec_fraction.unwrap_or(f64::NAN),
    })
}

/// Recomputes metrics from a finished run directory, optionally against a
/// baseline metrics file.
pub fn recompute_metrics(run_dir: &Path, baseline: Option<&Path>) -> Result<MetricsReport> {
    let cfg = ExperimentConfig::load(&run_dir.join(RESOLVED_CONFIG))?;
    let summary: RunSummary =
        serde_json::from_str(&fs::read_to_string(run_dir.join(RUN_SUMMARY))?)?;
    let samples = io::read_matrix(&run_dir.join(SAMPLES))?;
    let problem = build_problem(&cfg)?;
    if samples.cols() != problem.target.dim() {
        return Err(Error::DimensionMismatch {
            context: "stored samples".into(),
            expected: problem.target.dim(),
            found: samples.cols(),
        });
    }
    let baseline = match baseline {
        Some(p) => Some(MetricsReport::from_key_value(&fs::read_to_string(p)?)?),
        None => None,
    };
    compute_metrics(&cfg, &problem, &samples, &summary, baseline.as_ref())
}

/// Reads two metrics files and returns `(speedup, side-by-side table)`.
pub fn compare(baseline: &Path, candidate: &Path) -> Result<(f64, String)> {
    let read = |p: &Path| -> Result<MetricsReport> {
        let text = fs::read_to_string(p)?;
        MetricsReport::from_key_value(&text).map_err(|e| match e {
            Error::InvalidConfig(v) => Error::InvalidConfig(
                v.into_iter()
                    .map(|m| format!("{}: {m}", p.display()))
                    .collect(),
            ),
            e => e,
        })
    };
    let b = read(baseline)?;
    let c = read(candidate)?;
    Ok((
        diagnostics::speedup(&b, &c),
        diagnostics::compare_table(&b, &c),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn small_regression(kind: &str) -> ExperimentConfig {
        let text = format!(
            r#"
seed = 3
[target]
kind = "synthetic_regression"
n = 120
d = 4
h1 = 6
h2 = 3
[sampler]
kind = "{kind}"
samples = 80
m0 = 20
[sampler.hmc]
step_size = 0.01
[sampler.sghmc]
step_size = 1e-5
burn_in = 50
thin = 2
[sampler.nipa]
refit_every = 30
[sampler.surrogate]
latent_dim = 4
ae_epochs = 20
reg_epochs = 20
"#
        );
        ExperimentConfig::parse(&text, Path::new("t.toml")).unwrap()
    }

    #[test]
    fn problem_is_reproducible() {
        let cfg = small_regression("hmc");
        let a = build_problem(&cfg).unwrap();
        let b = build_problem(&cfg).unwrap();
        assert_eq!(a.target.dim(), 4 * 6 + 6 + 6 * 3 + 3 + 3 + 1);
        assert_eq!(a.split, b.split);
        assert_eq!(a.train().unwrap().x(), b.train().unwrap().x());
        assert_eq!(a.test.as_ref().unwrap().len(), 12);
    }

    #[test]
    fn subsample_caps_rows() {
        let mut cfg = small_regression("hmc");
        cfg.target.subsample = Some(50);
        let p = build_problem(&cfg).unwrap();
        assert_eq!(p.train().unwrap().len() + p.test.unwrap().len(), 50);
    }

    #[test]
    fn every_sampler_writes_the_same_metrics_schema() {
        let dir = tempfile::tempdir().unwrap();
        let mut keys = Vec::new();
        for kind in ["nipa", "hmc", "sghmc", "rw"] {
            let out = dir.path().join(kind);
            let run = sample(&small_regression(kind), &out).unwrap();
            let text = fs::read_to_string(out.join(METRICS)).unwrap();
            let k: Vec<String> = text
                .lines()
                .map(|l| l.split('=').next().unwrap().trim().to_string())
                .collect();
            keys.push(k);
            assert_eq!(run.metrics.samples, 64);
            assert!(run.metrics.rmse_or_acc.is_finite());
            for f in [
                SAMPLES,
                TRACE,
                TIMINGS,
                RUN_SUMMARY,
                RESOLVED_CONFIG,
                "train_indices.txt",
            ] {
                assert!(out.join(f).is_file(), "{kind}: {f}");
            }
            let again = recompute_metrics(&out, None).unwrap();
            assert_eq!(again.min_ess.to_bits(), run.metrics.min_ess.to_bits());
            assert_eq!(
                again.cp95_or_ece.to_bits(),
                run.metrics.cp95_or_ece.to_bits()
            );
        }
        assert!(keys.windows(2).all(|w| w[0] == w[1]));
        assert!(dir.path().join("nipa").join(CHECKPOINT).is_file());
    }

    #[test]
    fn existing_output_is_never_reused() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        fs::create_dir(&out).unwrap();
        fs::write(out.join("keep.txt"), "x").unwrap();
        assert!(matches!(
            sample(&small_regression("rw"), &out),
            Err(Error::OutputExists(_))
        ));
        assert_eq!(fs::read_dir(&out).unwrap().count(), 1);
    }

    #[test]
    fn generated_data_reloads_as_delimited() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data");
        let cfg = small_regression("hmc");
        generate(&cfg, &out).unwrap();
        let orig = build_problem(&cfg).unwrap();
        let text = format!(
            "[target]\nkind = \"delimited\"\npath = {:?}\ntest_path = {:?}\nhidden = [6, 3]\n",
            out.join("train.csv"),
            out.join("test.csv")
        );
        let reload =
            build_problem(&ExperimentConfig::parse(&text, Path::new("r.toml")).unwrap()).unwrap();
        assert_eq!(reload.target.dim(), orig.target.dim());
        assert_eq!(reload.train().unwrap().x(), orig.train().unwrap().x());
        assert_eq!(reload.train().unwrap().y(), orig.train().unwrap().y());
        assert!(io::read_matrix(&out.join("theta_star.bin")).is_ok());
    }
}
