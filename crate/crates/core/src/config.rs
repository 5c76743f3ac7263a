//! TOML experiment configuration.
//!
//! ```toml
//! seed = 7
//!
//! [target]
//! kind = "synthetic_regression"   # synthetic_classification | delimited | gaussian | banana
//! n = 5000
//!
//! [sampler]
//! kind = "nipa"                   # hmc | sghmc | rw
//! samples = 2000
//!
//! [diagnostics]
//! burn_in = 0.2
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::Baseline;
use crate::error::{Error, Result};
use crate::nipa::{HmcSettings, NipaConfig, SghmcSettings, ThresholdRule};
use crate::nn::Activation;
use crate::surrogate::SurrogateHyper;
use crate::targets::Task;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetType {
    #[default]
    SyntheticRegression,
    SyntheticClassification,
    Delimited,
    Gaussian,
    Banana,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub kind: TargetType,
    pub prior_var: f64,
    /// Likelihood noise variance for regression targets.
    pub noise_var: f64,
    /// Synthetic generators: rows, features and hidden widths. Unset values
    /// take the generator defaults.
    pub n: Option<usize>,
    pub d: Option<usize>,
    pub h1: Option<usize>,
    pub h2: Option<usize>,
    pub theta_bound: f64,
    /// Delimited data: training (or full) file and an optional held-out file.
    pub path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// 0-based target column; unset means the last column.
    pub target_column: Option<usize>,
    pub has_header: bool,
    pub task: Task,
    /// Map digit labels 0-9 to odd (1) / even (0).
    pub parity_labels: bool,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Analytic targets.
    pub dim: usize,
    pub scale: f64,
    pub curvature: f64,
    /// Keep at most this many rows (synthetic: caps `n`).
    pub subsample: Option<usize>,
    /// Seeded random rows instead of the first rows.
    pub subsample_random: bool,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            kind: TargetType::default(),
            prior_var: 1.0,
            noise_var: 0.1,
            n: None,
            d: None,
            h1: None,
            h2: None,
            theta_bound: 1.0,
            path: None,
            test_path: None,
            target_column: None,
            has_header: false,
            task: Task::Regression,
            parity_labels: false,
            hidden: vec![32, 8],
            activation: Activation::Relu,
            dim: 10,
            scale: 1.0,
            curvature: 1.0,
            subsample: None,
            subsample_random: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_fraction: f64,
    /// Defaults to the experiment seed.
    pub split_seed: Option<u64>,
    /// Defaults to on for classification.
    pub stratify: Option<bool>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.9,
            split_seed: None,
            stratify: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    #[default]
    Nipa,
    Hmc,
    Sghmc,
    Rw,
}

impl SamplerKind {
    pub fn baseline(self) -> Option<Baseline> {
        match self {
            SamplerKind::Nipa => None,
            SamplerKind::Hmc => Some(Baseline::Hmc),
            SamplerKind::Sghmc => Some(Baseline::Sghmc),
            SamplerKind::Rw => Some(Baseline::Rw),
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerKind::Nipa => "nipa",
            SamplerKind::Hmc => "hmc",
            SamplerKind::Sghmc => "sghmc",
            SamplerKind::Rw => "rw",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NipaSection {
    pub refit_every: usize,
    /// Fixed thresholds; both or neither must be set. `t2 = inf` is allowed.
    pub t1: Option<f64>,
    pub t2: Option<f64>,
    pub t1_quantile: f64,
    pub t2_quantile: f64,
    pub allow_degenerate_thresholds: bool,
    pub threshold_queries: usize,
    pub sigma_rw: Option<f64>,
    pub sigma_rw_factor: f64,
}

impl Default for NipaSection {
    fn default() -> Self {
        let d = NipaConfig::default();
        Self {
            refit_every: d.refit_every,
            t1: None,
            t2: None,
            t1_quantile: 0.25,
            t2_quantile: 0.90,
            allow_degenerate_thresholds: false,
            threshold_queries: d.threshold_queries,
            sigma_rw: None,
            sigma_rw_factor: d.sigma_rw_factor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Recorded iterations after the pool phase.
    pub samples: usize,
    pub m0: usize,
    pub hmc: HmcSettings,
    pub sghmc: SghmcSettings,
    pub nipa: NipaSection,
    pub surrogate: SurrogateHyper,
    /// Random-walk baseline scale; defaults to the gated sampler's `sigma_rw`.
    pub rw_sigma: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::default(),
            samples: 2000,
            m0: 100,
            hmc: HmcSettings::default(),
            sghmc: SghmcSettings::default(),
            nipa: NipaSection::default(),
            surrogate: SurrogateHyper::default(),
            rw_sigma: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Leading fraction of the recorded chain excluded from diagnostics.
    pub burn_in: f64,
    pub bins: usize,
    pub level: f64,
    /// Metrics file of a baseline run; fills in `speedup`.
    pub baseline_metrics: Option<PathBuf>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            burn_in: 0.2,
            bins: 15,
            level: 0.95,
            baseline_metrics: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub target: TargetConfig,
    pub data: DataConfig,
    pub sampler: SamplerConfig,
    pub diagnostics: DiagnosticsConfig,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
    (line, col)
}

impl ExperimentConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
            Error::Parse {
                path: path.to_path_buf(),
                line,
                column,
                message: e.message().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    /// Snapshot with every default spelled out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn task(&self) -> Option<Task> {
        match self.target.kind {
            TargetType::SyntheticRegression => Some(Task::Regression),
            TargetType::SyntheticClassification => Some(Task::Classification),
            TargetType::Delimited => Some(self.target.task),
            TargetType::Gaussian | TargetType::Banana => None,
        }
    }

    pub fn threshold_rule(&self) -> ThresholdRule {
        let n = &self.sampler.nipa;
        match (n.t1, n.t2) {
            (Some(t1), Some(t2)) => ThresholdRule::Fixed { t1, t2 },
            _ => ThresholdRule::Quantile {
                lower: n.t1_quantile,
                upper: n.t2_quantile,
            },
        }
    }

    /// Sampler settings in the form the gated sampler and baselines take.
    pub fn nipa_config(&self) -> NipaConfig {
        let s = &self.sampler;
        NipaConfig {
            m0: s.m0,
            total_iters: s.m0 + s.samples,
            refit_every: s.nipa.refit_every,
            thresholds: self.threshold_rule(),
            allow_degenerate_thresholds: s.nipa.allow_degenerate_thresholds,
            threshold_queries: s.nipa.threshold_queries,
            sigma_rw: s.nipa.sigma_rw,
            sigma_rw_factor: s.nipa.sigma_rw_factor,
            hmc: s.hmc,
            sghmc: s.sghmc,
            surrogate: s.surrogate.clone(),
            seed: self.seed,
        }
    }

    /// Problems that can be detected without loading data. `dim` (when known)
    /// enables the sampler checks that depend on the parameter count.
    pub fn validate(&self, dim: Option<usize>) -> Vec<String> {
        let mut errs = Vec::new();
        let t = &self.target;
        if !(t.prior_var > 0.0 && t.prior_var.is_finite()) {
            errs.push(format!(
                "target.prior_var must be positive, got {}",
                t.prior_var
            ));
        }
        match t.kind {
            TargetType::SyntheticRegression | TargetType::SyntheticClassification => {
                for (name, v) in [("n", t.n), ("d", t.d), ("h1", t.h1), ("h2", t.h2)] {
                    if v == Some(0) {
                        errs.push(format!("target.{name} must be positive"));
                    }
                }
                if t.n.is_some_and(|n| n < 2) {
                    errs.push("target.n must be at least 2".into());
                }
            }
            TargetType::Delimited => {
                match &t.path {
                    None => errs.push("target.path is required for delimited data".into()),
                    Some(p) if !p.is_file() => {
                        errs.push(format!("target.path {} does not exist", p.display()))
                    }
                    _ => {}
                }
                if let Some(p) = &t.test_path {
                    if !p.is_file() {
                        errs.push(format!("target.test_path {} does not exist", p.display()));
                    }
                }
                if t.hidden.contains(&0) {
                    errs.push("target.hidden widths must be positive".into());
                }
            }
            TargetType::Gaussian | TargetType::Banana => {
                if t.dim == 0 || (t.kind == TargetType::Banana && t.dim < 2) {
                    errs.push(format!("target.dim {} is too small", t.dim));
                }
                if !(t.scale > 0.0) {
                    errs.push(format!("target.scale must be positive, got {}", t.scale));
                }
            }
        }
        if self.task() == Some(Task::Regression) && !(t.noise_var > 0.0 && t.noise_var.is_finite())
        {
            errs.push(format!(
                "target.noise_var must be positive, got {}",
                t.noise_var
            ));
        }
        if t.subsample == Some(0) {
            errs.push("target.subsample must be positive".into());
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            errs.push(format!(
                "data.train_fraction must be in (0, 1), got {}",
                self.data.train_fraction
            ));
        }
        let s = &self.sampler;
        if s.samples == 0 {
            errs.push("sampler.samples must be at least 1".into());
        }
        if s.nipa.t1.is_some() != s.nipa.t2.is_some() {
            errs.push("sampler.nipa.t1 and sampler.nipa.t2 must be set together".into());
        }
        if let Some(sigma) = s.rw_sigma {
            if !(sigma > 0.0 && sigma.is_finite()) {
                errs.push(format!("sampler.rw_sigma must be positive, got {sigma}"));
            }
        }
        let d = &self.diagnostics;
        if !(0.0..1.0).contains(&d.burn_in) {
            errs.push(format!(
                "diagnostics.burn_in must be in [0, 1), got {}",
                d.burn_in
            ));
        } else {
            let kept = s.samples - (s.samples as f64 * d.burn_in).floor() as usize;
            let need = if self.task().is_some() {
                crate::diagnostics::MIN_PREDICTIVE_SAMPLES
            } else {
                crate::diagnostics::MIN_CHAIN
            };
            if kept < need {
                errs.push(format!(
                    "only {kept} samples remain after burn-in; need at least {need}"
                ));
            }
        }
        if d.bins == 0 {
            errs.push("diagnostics.bins must be at least 1".into());
        }
        if !(d.level > 0.0 && d.level < 1.0) {
            errs.push(format!(
                "diagnostics.level must be in (0, 1), got {}",
                d.level
            ));
        }
        if let Some(p) = &d.baseline_metrics {
            if !p.is_file() {
                errs.push(format!(
                    "diagnostics.baseline_metrics {} does not exist",
                    p.display()
                ));
            }
        }
        if let Some(dim) = dim {
            let mut nipa = self.nipa_config();
            if s.kind != SamplerKind::Nipa {
                // Baselines only run the warm-up.
                nipa.total_iters = nipa.m0;
            }
            errs.extend(
                nipa.validate(dim)
                    .into_iter()
                    .map(|e| format!("sampler: {e}")),
            );
        }
        errs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::parse("[target]\nkind = \"gaussian\"\n", Path::new("x.toml"))
            .unwrap();
        assert_eq!(cfg.target.kind, TargetType::Gaussian);
        assert_eq!(cfg.sampler.kind, SamplerKind::Nipa);
        assert_eq!(cfg.sampler.samples, 2000);
        assert_eq!(cfg.sampler.m0, 100);
        assert_eq!(cfg.diagnostics.bins, 15);
        assert!(
            cfg.validate(Some(10)).is_empty(),
            "{:?}",
            cfg.validate(Some(10))
        );
        assert_eq!(cfg.nipa_config().total_iters, 2100);
    }

    #[test]
    fn snapshot_roundtrips() {
        let text = r#"
seed = 5
[target]
kind = "banana"
dim = 2
[sampler]
kind = "hmc"
samples = 300
[sampler.nipa]
t1 = 0.0
t2 = inf
[sampler.hmc]
step_size = 0.2
"#;
        let cfg = ExperimentConfig::parse(text, Path::new("x.toml")).unwrap();
        assert_eq!(
            cfg.threshold_rule(),
            ThresholdRule::Fixed {
                t1: 0.0,
                t2: f64::INFINITY
            }
        );
        let snap = cfg.to_toml().unwrap();
        let back = ExperimentConfig::parse(&snap, Path::new("snap.toml")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_report_position() {
        let text = "seed = 1\n[sampler]\nsampels = 10\n";
        match ExperimentConfig::parse(text, Path::new("bad.toml")) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("sampels"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation_collects_all_problems() {
        let text = r#"
[target]
kind = "delimited"
path = "/definitely/missing.csv"
prior_var = -1.0
[data]
train_fraction = 1.5
[sampler]
samples = 5
[sampler.nipa]
t1 = 3.0
t2 = 1.0
[diagnostics]
level = 2.0
"#;
        let cfg = ExperimentConfig::parse(text, Path::new("x.toml")).unwrap();
        let errs = cfg.validate(Some(50));
        let joined = errs.join("\n");
        for needle in [
            "prior_var",
            "target.path",
            "train_fraction",
            "remain after burn-in",
            "t1 < t2",
            "level",
        ] {
            assert!(joined.contains(needle), "missing {needle} in:\n{joined}");
        }
    }

    #[test]
    fn single_threshold_is_rejected() {
        let cfg = ExperimentConfig::parse(
            "[target]\nkind = \"gaussian\"\n[sampler.nipa]\nt1 = 0.5\n",
            Path::new("x.toml"),
        )
        .unwrap();
        assert!(cfg
            .validate(Some(10))
            .iter()
            .any(|e| e.contains("set together")));
    }
}
