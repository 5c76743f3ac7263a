//! Log-posterior targets.
//!
//! Bayesian neural network targets combine a likelihood over a [`Dataset`]
//! with an iid zero-mean Gaussian prior on every parameter. Analytic targets
//! (standard Gaussian, banana) exist to validate the kernels against known
//! answers. Every full-data evaluation bumps an exact-evaluation counter so
//! callers can audit how many expensive calls a sampler made.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{self, Loss, NetSpec, ParamVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    x: Matrix,
    y: Vec<f64>,
    task: Task,
    split: SplitTag,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<f64>, task: Task, split: SplitTag) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::DimensionMismatch {
                context: "dataset rows vs targets".into(),
                expected: x.rows(),
                found: y.len(),
            });
        }
        if task == Task::Classification {
            if let Some(i) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "classification label {} at row {i} is not 0 or 1",
                    y[i]
                )));
            }
        }
        Ok(Self { x, y, task, split })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.x.cols()
    }

    pub fn targets(&self) -> Matrix {
        Matrix::column(&self.y)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let x = self.x.select_rows(indices)?;
        let y = indices.iter().map(|&i| self.y[i]).collect();
        Ok(Self {
            x,
            y,
            task: self.task,
            split: self.split,
        })
    }
}

#[derive(Clone, Debug)]
pub enum TargetKind {
    BnnRegression {
        spec: NetSpec,
        data: Arc<Dataset>,
        noise_var: f64,
    },
    BnnClassification {
        spec: NetSpec,
        data: Arc<Dataset>,
    },
    /// Independent zero-mean Gaussian with per-coordinate standard deviations.
    AnalyticGaussian {
        std: Vec<f64>,
    },
    /// First coordinate `N(0, scale^2)`, second warped by
    /// `curvature * (x1^2 - scale^2)`, the rest standard normal.
    AnalyticBanana {
        dim: usize,
        scale: f64,
        curvature: f64,
    },
}

#[derive(Debug, Default)]
struct Counters {
    exact: AtomicU64,
    stochastic: AtomicU64,
}

#[derive(Debug)]
pub struct TargetModel {
    kind: TargetKind,
    prior_var: f64,
    include_likelihood: bool,
    counters: Counters,
}

impl Clone for TargetModel {
    fn clone(&self) -> Self {
        Self {
            kind: self.kind.clone(),
            prior_var: self.prior_var,
            include_likelihood: self.include_likelihood,
            counters: Counters::default(),
        }
    }
}

impl TargetModel {
    pub fn bnn_regression(
        spec: NetSpec,
        data: Arc<Dataset>,
        noise_var: f64,
        prior_var: f64,
    ) -> Result<Self> {
        check_bnn(&spec, &data, Task::Regression)?;
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise_var {noise_var} must be > 0"
            )));
        }
        Self::build(
            TargetKind::BnnRegression {
                spec,
                data,
                noise_var,
            },
            prior_var,
        )
    }

    pub fn bnn_classification(spec: NetSpec, data: Arc<Dataset>, prior_var: f64) -> Result<Self> {
        check_bnn(&spec, &data, Task::Classification)?;
        if spec.output_dim() != 1 {
            return Err(Error::InvalidSpec(
                "classification network must have a single logit output".into(),
            ));
        }
        Self::build(TargetKind::BnnClassification { spec, data }, prior_var)
    }

    pub fn standard_gaussian(dim: usize) -> Self {
        Self::gaussian(vec![1.0; dim]).expect("unit scales are valid")
    }

    pub fn gaussian(std: Vec<f64>) -> Result<Self> {
        if std.is_empty() || std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(
                "gaussian target needs positive finite scales".into(),
            ));
        }
        Self::build(TargetKind::AnalyticGaussian { std }, 1.0)
    }

    pub fn banana(dim: usize, scale: f64, curvature: f64) -> Result<Self> {
        if dim < 2 || !(scale > 0.0) || !curvature.is_finite() {
            return Err(Error::InvalidArgument(
                "banana target needs dim >= 2, scale > 0, finite curvature".into(),
            ));
        }
        Self::build(
            TargetKind::AnalyticBanana {
                dim,
                scale,
                curvature,
            },
            1.0,
        )
    }

    fn build(kind: TargetKind, prior_var: f64) -> Result<Self> {
        if !(prior_var > 0.0 && prior_var.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "prior_var {prior_var} must be > 0"
            )));
        }
        Ok(Self {
            kind,
            prior_var,
            include_likelihood: true,
            counters: Counters::default(),
        })
    }

    /// Drop the likelihood term, leaving the prior alone (BNN targets only).
    pub fn prior_only(mut self) -> Self {
        self.include_likelihood = false;
        self
    }

    pub fn kind(&self) -> &TargetKind {
        &self.kind
    }

    pub fn prior_var(&self) -> f64 {
        self.prior_var
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            TargetKind::BnnRegression { spec, .. } | TargetKind::BnnClassification { spec, .. } => {
                spec.num_params()
            }
            TargetKind::AnalyticGaussian { std } => std.len(),
            TargetKind::AnalyticBanana { dim, .. } => *dim,
        }
    }

    pub fn net_spec(&self) -> Option<&NetSpec> {
        match &self.kind {
            TargetKind::BnnRegression { spec, .. } | TargetKind::BnnClassification { spec, .. } => {
                Some(spec)
            }
            _ => None,
        }
    }

    pub fn data(&self) -> Option<&Dataset> {
        match &self.kind {
            TargetKind::BnnRegression { data, .. } | TargetKind::BnnClassification { data, .. } => {
                Some(data)
            }
            _ => None,
        }
    }

    pub fn noise_var(&self) -> Option<f64> {
        match &self.kind {
            TargetKind::BnnRegression { noise_var, .. } => Some(*noise_var),
            _ => None,
        }
    }

    /// Number of likelihood terms (0 for analytic targets).
    pub fn num_data(&self) -> usize {
        self.data().map_or(0, Dataset::len)
    }

    /// Full-data log-posterior evaluations (value, gradient or both) so far.
    pub fn exact_evals(&self) -> u64 {
        self.counters.exact.load(Ordering::Relaxed)
    }

    pub fn stochastic_evals(&self) -> u64 {
        self.counters.stochastic.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.counters.exact.store(0, Ordering::Relaxed);
        self.counters.stochastic.store(0, Ordering::Relaxed);
    }

    /// A starting point: Glorot-uniform weights for networks, standard normal otherwise.
    pub fn initial_point<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        match self.net_spec() {
            Some(spec) => nn::glorot_uniform(spec, rng),
            None => (0..self.dim())
                .map(|_| rng.sample(StandardNormal))
                .collect::<Vec<_>>()
                .into(),
        }
    }

    fn check_dim(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "target parameter vector".into(),
                expected: self.dim(),
                found: theta.len(),
            });
        }
        Ok(())
    }

    fn bnn_loss(&self) -> Option<(&NetSpec, &Dataset, Loss)> {
        match &self.kind {
            TargetKind::BnnRegression {
                spec,
                data,
                noise_var,
            } => Some((
                spec,
                data,
                Loss::GaussianNll {
                    noise_var: *noise_var,
                },
            )),
            TargetKind::BnnClassification { spec, data } => {
                Some((spec, data, Loss::BernoulliLogitNll))
            }
            _ => None,
        }
    }

    /// Log-posterior up to a theta-independent constant.
    pub fn log_posterior(&self, theta: &[f64]) -> Result<f64> {
        self.check_dim(theta)?;
        self.counters.exact.fetch_add(1, Ordering::Relaxed);
        let value = match self.bnn_loss() {
            Some((spec, data, loss)) => {
                let nll = if self.include_likelihood {
                    let out = nn::forward(spec, theta, data.x())?;
                    nll_value(loss, &out, data.y())
                } else {
                    0.0
                };
                -nll - self.prior_term(theta)
            }
            None => self.analytic_value_and_grad(theta, false).0,
        };
        finite_or_err(value, theta, "log-posterior")
    }

    pub fn grad_log_posterior(&self, theta: &[f64]) -> Result<ParamVector> {
        Ok(self.value_and_grad(theta)?.1)
    }

    /// Log-posterior and its gradient in one pass; counts as one evaluation.
    pub fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, ParamVector)> {
        self.check_dim(theta)?;
        self.counters.exact.fetch_add(1, Ordering::Relaxed);
        let (value, grad) = match self.bnn_loss() {
            Some((spec, data, loss)) => {
                if self.include_likelihood {
                    self.bnn_value_and_grad(spec, theta, data.x(), &data.targets(), loss, 1.0)?
                } else {
                    let g = theta
                        .iter()
                        .map(|t| -t / self.prior_var)
                        .collect::<Vec<_>>();
                    (-self.prior_term(theta), ParamVector::new(g))
                }
            }
            None => {
                let (v, g) = self.analytic_value_and_grad(theta, true);
                (v, ParamVector::new(g.unwrap()))
            }
        };
        finite_or_err(value, theta, "log-posterior")?;
        if !grad.is_finite() {
            return Err(Error::NonFinite {
                context: "log-posterior gradient".into(),
                iterate: Some(theta.to_vec()),
            });
        }
        Ok((value, grad))
    }

    /// Minibatch gradient estimate: likelihood gradient over `batch` scaled by
    /// `N / |batch|`, plus the full prior gradient. Analytic targets have no
    /// data, so they return the exact gradient.
    pub fn stochastic_grad(&self, theta: &[f64], batch: &[usize]) -> Result<ParamVector> {
        self.check_dim(theta)?;
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        self.counters.stochastic.fetch_add(1, Ordering::Relaxed);
        match self.bnn_loss() {
            Some((spec, data, loss)) => {
                if !self.include_likelihood {
                    return Ok(theta
                        .iter()
                        .map(|t| -t / self.prior_var)
                        .collect::<Vec<_>>()
                        .into());
                }
                let x = data.x().select_rows(batch)?;
                let y = Matrix::column(&batch.iter().map(|&i| data.y()[i]).collect::<Vec<_>>());
                let scale = data.len() as f64 / batch.len() as f64;
                let (_, g) = self.bnn_value_and_grad(spec, theta, &x, &y, loss, scale)?;
                if !g.is_finite() {
                    return Err(Error::NonFinite {
                        context: "stochastic gradient".into(),
                        iterate: Some(theta.to_vec()),
                    });
                }
                Ok(g)
            }
            None => Ok(ParamVector::new(
                self.analytic_value_and_grad(theta, true).1.unwrap(),
            )),
        }
    }

    fn bnn_value_and_grad(
        &self,
        spec: &NetSpec,
        theta: &[f64],
        x: &Matrix,
        y: &Matrix,
        loss: Loss,
        scale: f64,
    ) -> Result<(f64, ParamVector)> {
        let (nll, g_nll) = nn::loss_and_grad(spec, theta, x, y, loss)?;
        let inv_prior = 1.0 / self.prior_var;
        let grad: Vec<f64> = g_nll
            .iter()
            .zip(theta)
            .map(|(&g, &t)| -(scale * g) - t * inv_prior)
            .collect();
        Ok((
            -(scale * nll) - self.prior_term(theta),
            ParamVector::new(grad),
        ))
    }

    fn prior_term(&self, theta: &[f64]) -> f64 {
        theta.iter().map(|t| t * t).sum::<f64>() / (2.0 * self.prior_var)
    }

    fn analytic_value_and_grad(&self, theta: &[f64], want_grad: bool) -> (f64, Option<Vec<f64>>) {
        match &self.kind {
            TargetKind::AnalyticGaussian { std } => {
                let mut sum = 0.0;
                let mut grad = want_grad.then(|| vec![0.0; theta.len()]);
                for (i, (&t, &s)) in theta.iter().zip(std).enumerate() {
                    let inv = 1.0 / (s * s);
                    sum += t * t * inv;
                    if let Some(g) = grad.as_mut() {
                        g[i] = -t * inv;
                    }
                }
                (-0.5 * sum, grad)
            }
            TargetKind::AnalyticBanana {
                scale, curvature, ..
            } => {
                let (x1, x2) = (theta[0], theta[1]);
                let a2 = scale * scale;
                let r = x2 - curvature * (x1 * x1 - a2);
                let rest: f64 = theta[2..].iter().map(|t| t * t).sum();
                let value = -0.5 * (x1 * x1 / a2 + r * r + rest);
                let grad = want_grad.then(|| {
                    let mut g = Vec::with_capacity(theta.len());
                    g.push(-x1 / a2 + 2.0 * curvature * x1 * r);
                    g.push(-r);
                    g.extend(theta[2..].iter().map(|t| -t));
                    g
                });
                (value, grad)
            }
            _ => unreachable!("analytic evaluation on a network target"),
        }
    }
}

fn check_bnn(spec: &NetSpec, data: &Dataset, task: Task) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    if data.task() != task {
        return Err(Error::InvalidArgument(format!(
            "dataset task {:?} does not match target {:?}",
            data.task(),
            task
        )));
    }
    if data.num_features() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "dataset features vs network input".into(),
            expected: spec.input_dim(),
            found: data.num_features(),
        });
    }
    if spec.output_dim() != 1 {
        return Err(Error::InvalidSpec(
            "targets use scalar network outputs".into(),
        ));
    }
    Ok(())
}

/// Same accumulation as the loss inside backprop, so value-only and
/// value-and-gradient evaluations agree bitwise.
fn nll_value(loss: Loss, out: &Matrix, y: &[f64]) -> f64 {
    let mut total = 0.0;
    match loss {
        Loss::GaussianNll { noise_var } => {
            let inv = 1.0 / noise_var;
            for (&f, &t) in out.as_slice().iter().zip(y) {
                let r = f - t;
                total += 0.5 * r * r * inv;
            }
        }
        Loss::BernoulliLogitNll => {
            for (&z, &t) in out.as_slice().iter().zip(y) {
                total += nn::softplus(z) - t * z;
            }
        }
        Loss::MeanSquared => unreachable!("not a likelihood"),
    }
    total
}

fn finite_or_err(value: f64, theta: &[f64], context: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            context: context.into(),
            iterate: Some(theta.to_vec()),
        })
    }
}
