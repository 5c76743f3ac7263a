//! The gated hybrid sampler: a random-walk gating candidate is scored by its
//! standardized distance to the memory pool, which routes each iteration to
//! exact HMC (MB), a surrogate-evaluated Metropolis step (MF), or a Metropolis
//! step that recalls a cached log-density from the nearest pool entry (EC).

use crate::Instant;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::quantile;
use crate::error::{Error, Result};
use crate::kernels::{self, HmcConfig, SghmcConfig};
use crate::matrix::Matrix;
use crate::nn::ParamVector;
use crate::pool::{MemoryPool, Origin};
use crate::surrogate::{Surrogate, SurrogateHyper};
use crate::targets::TargetModel;

const CHECKPOINT_MAGIC: &str = "nipa-chain";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    #[serde(rename = "MB")]
    Mb,
    #[serde(rename = "MF")]
    Mf,
    #[serde(rename = "EC")]
    Ec,
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Branch::Mb => "MB",
            Branch::Mf => "MF",
            Branch::Ec => "EC",
        })
    }
}

/// `d* <= t1` recalls (EC), `t1 < d* <= t2` emulates (MF), otherwise exact (MB).
pub fn gate(d_star: f64, t1: f64, t2: f64) -> Branch {
    if d_star <= t1 {
        Branch::Ec
    } else if d_star <= t2 {
        Branch::Mf
    } else {
        Branch::Mb
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// Quantiles of the within-pool nearest-neighbour distance distribution,
    /// recomputed at every surrogate fit.
    Quantile {
        lower: f64,
        upper: f64,
    },
    Fixed {
        t1: f64,
        t2: f64,
    },
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::Quantile {
            lower: 0.25,
            upper: 0.90,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub t1: f64,
    pub t2: f64,
}

impl ThresholdRule {
    pub fn resolve(&self, pool: &MemoryPool, max_queries: usize) -> Thresholds {
        match *self {
            ThresholdRule::Fixed { t1, t2 } => Thresholds { t1, t2 },
            ThresholdRule::Quantile { lower, upper } => {
                let mut d = pool.nn_distances(max_queries);
                if d.is_empty() {
                    return Thresholds { t1: 0.0, t2: 0.0 };
                }
                d.sort_by(f64::total_cmp);
                Thresholds {
                    t1: quantile(&d, lower),
                    t2: quantile(&d, upper),
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmcSettings {
    /// `None` tunes by doubling/halving at the first phase-3 state.
    pub step_size: Option<f64>,
    pub leapfrog_steps: usize,
    pub target_accept: f64,
    pub tune_trials: usize,
    pub tune_initial: f64,
}

impl Default for HmcSettings {
    fn default() -> Self {
        Self {
            step_size: None,
            leapfrog_steps: 10,
            target_accept: 0.7,
            tune_trials: 10,
            tune_initial: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SghmcSettings {
    /// `None` searches a doubling ladder, starting from the square of an HMC
    /// step size tuned at the starting point, for the best pilot run.
    pub step_size: Option<f64>,
    pub friction: f64,
    pub batch_size: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Pilot length and number of doublings of the automatic search.
    pub tune_steps: usize,
    pub tune_doublings: usize,
    /// Halvings of an automatic step size allowed after divergence.
    pub max_backoff: usize,
}

impl Default for SghmcSettings {
    fn default() -> Self {
        Self {
            step_size: None,
            friction: 0.1,
            batch_size: 128,
            burn_in: 5000,
            thin: 10,
            tune_steps: 200,
            tune_doublings: 20,
            max_backoff: 8,
        }
    }
}

impl SghmcSettings {
    pub fn kernel(&self, step_size: f64, retain: usize) -> SghmcConfig {
        SghmcConfig {
            step_size,
            friction: self.friction,
            batch_size: self.batch_size,
            steps: self.burn_in + retain * self.thin,
            thin: self.thin,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NipaConfig {
    pub m0: usize,
    /// Total iterations including the `m0` pool-phase states.
    pub total_iters: usize,
    pub refit_every: usize,
    pub thresholds: ThresholdRule,
    /// Accept `t1 == t2` for fixed thresholds (degenerate single-branch runs).
    pub allow_degenerate_thresholds: bool,
    /// Pool members queried when computing quantile thresholds.
    pub threshold_queries: usize,
    pub sigma_rw: Option<f64>,
    /// `sigma_rw = factor * mean pool std` when `sigma_rw` is unset.
    pub sigma_rw_factor: f64,
    pub hmc: HmcSettings,
    pub sghmc: SghmcSettings,
    pub surrogate: SurrogateHyper,
    pub seed: u64,
}

impl Default for NipaConfig {
    fn default() -> Self {
        Self {
            m0: 100,
            total_iters: 2100,
            refit_every: 100,
            thresholds: ThresholdRule::default(),
            allow_degenerate_thresholds: false,
            threshold_queries: 512,
            sigma_rw: None,
            sigma_rw_factor: 0.01,
            hmc: HmcSettings::default(),
            sghmc: SghmcSettings::default(),
            surrogate: SurrogateHyper::default(),
            seed: 0,
        }
    }
}

impl NipaConfig {
    /// Every problem with the configuration for a `dim`-dimensional target.
    pub fn validate(&self, dim: usize) -> Vec<String> {
        let mut errs = Vec::new();
        if self.m0 == 0 {
            errs.push("m0 must be at least 1".into());
        }
        if self.total_iters < self.m0 {
            errs.push(format!(
                "total_iters ({}) must be >= m0 ({})",
                self.total_iters, self.m0
            ));
        }
        if self.refit_every == 0 {
            errs.push("refit_every must be at least 1".into());
        }
        match self.thresholds {
            ThresholdRule::Fixed { t1, t2 } => {
                if !(t1 >= 0.0) || !(t2 >= 0.0) || t1.is_infinite() {
                    errs.push(format!(
                        "thresholds must be >= 0 (t1 finite), got t1={t1}, t2={t2}"
                    ));
                } else if !(t1 < t2 || (self.allow_degenerate_thresholds && t1 == t2)) {
                    errs.push(format!("thresholds need t1 < t2, got t1={t1}, t2={t2}"));
                }
            }
            ThresholdRule::Quantile { lower, upper } => {
                if !(0.0 <= lower && lower < upper && upper <= 1.0) {
                    errs.push(format!(
                        "threshold quantiles need 0 <= lower < upper <= 1, got {lower}, {upper}"
                    ));
                }
            }
        }
        if let Some(s) = self.sigma_rw {
            if !(s > 0.0 && s.is_finite()) {
                errs.push(format!("sigma_rw must be positive, got {s}"));
            }
        }
        if !(self.sigma_rw_factor > 0.0 && self.sigma_rw_factor.is_finite()) {
            errs.push(format!(
                "sigma_rw_factor must be positive, got {}",
                self.sigma_rw_factor
            ));
        }
        if let Some(eps) = self.hmc.step_size {
            errs.extend(
                HmcConfig {
                    step_size: eps,
                    leapfrog_steps: self.hmc.leapfrog_steps,
                }
                .validate(),
            );
        } else if self.hmc.leapfrog_steps == 0 {
            errs.push("hmc leapfrog_steps must be at least 1".into());
        }
        if !(self.hmc.target_accept > 0.0 && self.hmc.target_accept < 1.0) {
            errs.push(format!(
                "hmc target_accept must be in (0, 1), got {}",
                self.hmc.target_accept
            ));
        }
        if self.hmc.tune_trials == 0 || !(self.hmc.tune_initial > 0.0) {
            errs.push("hmc tune_trials and tune_initial must be positive".into());
        }
        let sghmc = self
            .sghmc
            .kernel(self.sghmc.step_size.unwrap_or(1.0), self.m0.max(1));
        errs.extend(sghmc.validate());
        if self.sghmc.step_size.is_none() && self.sghmc.tune_steps == 0 {
            errs.push("sghmc tune_steps must be at least 1".into());
        }
        if self.m0 > 0 && self.total_iters > self.m0 {
            errs.extend(self.surrogate.validate(dim));
            let need = self.surrogate.min_pool(dim);
            if self.m0 < need {
                errs.push(format!(
                    "m0 ({}) is below the surrogate minimum pool size {need}",
                    self.m0
                ));
            }
        }
        errs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub theta: ParamVector,
    /// Exact log-posterior of the last accepted MB state.
    pub l_mb: f64,
    /// Surrogate log-posterior of the last accepted MF state.
    pub l_mf: f64,
    /// Last completed iteration.
    pub t: usize,
}

/// Equality ignores `wall_nanos`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub branch: Branch,
    pub d_star: f64,
    /// Length of the gating perturbation.
    pub proposal_norm: f64,
    pub accepted: bool,
    /// Log-density the acceptance test used for the proposal: exact (MB),
    /// surrogate (MF) or recalled (EC).
    pub log_density: f64,
    pub exact_evals: u64,
    pub refit: bool,
    pub wall_nanos: u64,
}

impl PartialEq for IterationRecord {
    fn eq(&self, o: &Self) -> bool {
        self.t == o.t
            && self.branch == o.branch
            && self.d_star.to_bits() == o.d_star.to_bits()
            && self.proposal_norm.to_bits() == o.proposal_norm.to_bits()
            && self.accepted == o.accepted
            && self.log_density.to_bits() == o.log_density.to_bits()
            && self.exact_evals == o.exact_evals
            && self.refit == o.refit
    }
}

/// Read-only context for one iteration.
pub struct StepContext<'a> {
    pub target: &'a TargetModel,
    pub surrogate: Option<&'a Surrogate>,
    pub thresholds: Thresholds,
    pub sigma_rw: f64,
    pub hmc: HmcConfig,
}

/// One iteration of the gated sampler. Mutates the state and pool in place and
/// returns the iteration record (without the refit flag or timing).
pub fn nipa_step<R: Rng + ?Sized>(
    state: &mut ChainState,
    pool: &mut MemoryPool,
    ctx: &StepContext<'_>,
    rng: &mut R,
) -> Result<IterationRecord> {
    let t = state.t + 1;
    let candidate = kernels::rw_propose(&state.theta, ctx.sigma_rw, rng);
    let proposal_norm = candidate
        .iter()
        .zip(state.theta.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let near = pool.nearest(&candidate)?;
    let branch = gate(near.d_star, ctx.thresholds.t1, ctx.thresholds.t2);
    let (accepted, log_density, exact_evals) = match branch {
        Branch::Mb => {
            let out = kernels::hmc_step(ctx.target, &state.theta, &ctx.hmc, rng)?;
            if out.accepted {
                pool.insert(&out.theta, out.log_density, Origin::Mb)?;
                state.theta = out.theta;
                state.l_mb = out.log_density;
            }
            (out.accepted, out.proposal_log_density, out.exact_evals)
        }
        Branch::Mf => {
            let surrogate = ctx.surrogate.ok_or(Error::SurrogateMissing)?;
            let l_new = surrogate.predict_logpi(&candidate)?;
            let accepted = kernels::mh_accept(l_new - state.l_mf, rng)?;
            if accepted {
                pool.insert(&candidate, l_new, Origin::Mf)?;
                state.theta = candidate;
                state.l_mf = l_new;
            }
            (accepted, l_new, 0)
        }
        Branch::Ec => {
            let l_ref = match near.origin {
                Origin::Mb => state.l_mb,
                Origin::Mf => state.l_mf,
            };
            let accepted = kernels::mh_accept(near.log_density - l_ref, rng)?;
            if accepted {
                state.theta = candidate;
            }
            (accepted, near.log_density, 0)
        }
    };
    state.t = t;
    Ok(IterationRecord {
        t,
        branch,
        d_star: near.d_star,
        proposal_norm,
        accepted,
        log_density,
        exact_evals,
        refit: false,
        wall_nanos: 0,
    })
}

/// Output of the pool-construction phase, shared with the baselines so that
/// every sampler starts from the same warm state.
#[derive(Clone, Debug)]
pub struct Warmup {
    pub states: Vec<ParamVector>,
    pub log_densities: Vec<f64>,
    pub sghmc_step_size: f64,
    pub hmc_step_size: f64,
    pub seconds: f64,
}

/// SGHMC warm-up retaining `m0` states, exact log-posterior of each, and the
/// HMC step size (tuned at the last state unless fixed).
pub fn warmup<R: Rng + ?Sized>(
    target: &TargetModel,
    cfg: &NipaConfig,
    rng: &mut R,
) -> Result<Warmup> {
    let start = Instant::now();
    let theta0 = target.initial_point(rng);
    let (states, eta) = match cfg.sghmc.step_size {
        Some(eta) => {
            let states =
                kernels::sghmc_run(target, &theta0, &cfg.sghmc.kernel(eta, cfg.m0), cfg.m0, rng)?;
            (states, eta)
        }
        None => {
            let eps0 = kernels::tune_step_size(
                target,
                &theta0,
                cfg.hmc.tune_initial,
                cfg.hmc.leapfrog_steps,
                cfg.hmc.target_accept,
                cfg.hmc.tune_trials,
                rng,
            )?;
            let mut eta = kernels::tune_sghmc_step_size(
                target,
                &theta0,
                &cfg.sghmc.kernel(eps0 * eps0, 1),
                eps0 * eps0,
                cfg.sghmc.tune_steps,
                cfg.sghmc.tune_doublings,
                rng,
            )?;
            let mut attempt = 0;
            loop {
                match kernels::sghmc_run(
                    target,
                    &theta0,
                    &cfg.sghmc.kernel(eta, cfg.m0),
                    cfg.m0,
                    rng,
                ) {
                    Ok(states) => break (states, eta),
                    Err(Error::Divergence { iteration, .. }) if attempt < cfg.sghmc.max_backoff => {
                        log::warn!(
                            "sghmc diverged at step {iteration} with step size {eta:.3e}; halving"
                        );
                        eta *= 0.5;
                        attempt += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    };
    let log_densities = states
        .iter()
        .map(|s| target.log_posterior(s))
        .collect::<Result<Vec<_>>>()?;
    let last = states.last().ok_or(Error::EmptyPool)?;
    let hmc_step_size = match cfg.hmc.step_size {
        Some(eps) => eps,
        None => kernels::tune_step_size(
            target,
            last,
            cfg.hmc.tune_initial,
            cfg.hmc.leapfrog_steps,
            cfg.hmc.target_accept,
            cfg.hmc.tune_trials,
            rng,
        )?,
    };
    Ok(Warmup {
        states,
        log_densities,
        sghmc_step_size: eta,
        hmc_step_size,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Everything a finished (or interrupted) run produced. Equality ignores the
/// wall-clock fields.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainTrace {
    pub records: Vec<IterationRecord>,
    /// Phase-3 states, one row per iteration.
    pub samples: Matrix,
    /// Pool-phase states.
    pub pool_states: Matrix,
    pub thresholds: Vec<Thresholds>,
    pub sigma_rw: f64,
    pub hmc_step_size: f64,
    pub sghmc_step_size: f64,
    pub phase3_exact_evals: u64,
    pub pool_seconds: f64,
    pub surrogate_seconds: f64,
    /// Phase-3 wall-clock, refits included.
    pub sampling_seconds: f64,
}

impl PartialEq for ChainTrace {
    fn eq(&self, o: &Self) -> bool {
        self.records == o.records
            && self.samples == o.samples
            && self.pool_states == o.pool_states
            && self.thresholds == o.thresholds
            && self.sigma_rw == o.sigma_rw
            && self.hmc_step_size == o.hmc_step_size
            && self.sghmc_step_size == o.sghmc_step_size
            && self.phase3_exact_evals == o.phase3_exact_evals
    }
}

impl ChainTrace {
    pub fn branch_count(&self, branch: Branch) -> usize {
        self.records.iter().filter(|r| r.branch == branch).count()
    }

    pub fn branch_fraction(&self, branch: Branch) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.branch_count(branch) as f64 / self.records.len() as f64
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.accepted).count() as f64 / self.records.len() as f64
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NipaSampler {
    cfg: NipaConfig,
    state: ChainState,
    pool: MemoryPool,
    surrogate: Option<Surrogate>,
    thresholds: Thresholds,
    rng: ChaCha8Rng,
    trace: ChainTrace,
}

impl NipaSampler {
    /// Phases one and two: seed the pool with SGHMC states and exact
    /// log-densities, fit the surrogate, and set thresholds and `sigma_rw`.
    pub fn initialize(target: &TargetModel, cfg: NipaConfig) -> Result<Self> {
        let errs = cfg.validate(target.dim());
        if !errs.is_empty() {
            return Err(Error::InvalidConfig(errs));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let warm = warmup(target, &cfg, &mut rng)?;
        let mut pool = MemoryPool::new(target.dim());
        let mut pool_states = Matrix::zeros(0, target.dim());
        for (s, &l) in warm.states.iter().zip(&warm.log_densities) {
            pool.insert(s, l, Origin::Mb)?;
            pool_states.push_row(s)?;
        }
        let theta = warm.states.last().cloned().ok_or(Error::EmptyPool)?;
        let l_mb = *warm.log_densities.last().ok_or(Error::EmptyPool)?;

        let fit_start = Instant::now();
        let surrogate = if cfg.total_iters > cfg.m0 {
            let mut hyper = cfg.surrogate.clone();
            hyper.seed = rng.random();
            Some(Surrogate::fit(&pool, &hyper)?)
        } else {
            None
        };
        let surrogate_seconds = fit_start.elapsed().as_secs_f64();
        let thresholds = cfg.thresholds.resolve(&pool, cfg.threshold_queries);
        let sigma_rw = cfg
            .sigma_rw
            .unwrap_or_else(|| cfg.sigma_rw_factor * pool.mean_std());
        let l_mf = match &surrogate {
            Some(s) => s.predict_logpi(&theta)?,
            None => f64::NAN,
        };
        log::info!(
            "pool ready: {} states in {:.2}s; eps={:.3e}, eta={:.3e}, sigma_rw={:.3e}, t1={:.4}, t2={:.4}",
            pool.len(),
            warm.seconds,
            warm.hmc_step_size,
            warm.sghmc_step_size,
            sigma_rw,
            thresholds.t1,
            thresholds.t2
        );
        let dim = target.dim();
        Ok(Self {
            state: ChainState {
                theta,
                l_mb,
                l_mf,
                t: cfg.m0,
            },
            pool,
            surrogate,
            thresholds,
            rng,
            trace: ChainTrace {
                records: Vec::new(),
                samples: Matrix::zeros(0, dim),
                pool_states,
                thresholds: vec![thresholds],
                sigma_rw,
                hmc_step_size: warm.hmc_step_size,
                sghmc_step_size: warm.sghmc_step_size,
                phase3_exact_evals: 0,
                pool_seconds: warm.seconds,
                surrogate_seconds,
                sampling_seconds: 0.0,
            },
            cfg,
        })
    }

    pub fn config(&self) -> &NipaConfig {
        &self.cfg
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn pool(&self) -> &MemoryPool {
        &self.pool
    }

    pub fn surrogate(&self) -> Option<&Surrogate> {
        self.surrogate.as_ref()
    }

    pub fn thresholds(&self) -> Thresholds {
        self.thresholds
    }

    pub fn trace(&self) -> &ChainTrace {
        &self.trace
    }

    pub fn is_done(&self) -> bool {
        self.state.t >= self.cfg.total_iters
    }

    /// Runs one iteration, records the state, and refits on schedule.
    pub fn step(&mut self, target: &TargetModel) -> Result<&IterationRecord> {
        let start = Instant::now();
        let ctx = StepContext {
            target,
            surrogate: self.surrogate.as_ref(),
            thresholds: self.thresholds,
            sigma_rw: self.trace.sigma_rw,
            hmc: HmcConfig {
                step_size: self.trace.hmc_step_size,
                leapfrog_steps: self.cfg.hmc.leapfrog_steps,
            },
        };
        let mut record = nipa_step(&mut self.state, &mut self.pool, &ctx, &mut self.rng)?;
        self.trace.samples.push_row(&self.state.theta)?;
        if let Some(s) = self.surrogate.as_mut() {
            if s.maybe_refit(&self.pool, record.t, self.cfg.refit_every)? {
                self.thresholds = self
                    .cfg
                    .thresholds
                    .resolve(&self.pool, self.cfg.threshold_queries);
                self.trace.thresholds.push(self.thresholds);
                record.refit = true;
            }
        }
        record.wall_nanos = start.elapsed().as_nanos() as u64;
        self.trace.phase3_exact_evals += record.exact_evals;
        self.trace.sampling_seconds += record.wall_nanos as f64 * 1e-9;
        self.trace.records.push(record);
        Ok(self.trace.records.last().expect("just pushed"))
    }

    /// Iterates to `total_iters`. On error, writes a checkpoint to
    /// `checkpoint` (when given) before returning the error.
    pub fn run(&mut self, target: &TargetModel, checkpoint: Option<&Path>) -> Result<()> {
        while !self.is_done() {
            if let Err(e) = self.step(target) {
                if let Some(path) = checkpoint {
                    if let Err(ce) = self.save(path) {
                        log::error!("could not write checkpoint {}: {ce}", path.display());
                    }
                }
                return Err(e);
            }
        }
        Ok(())
    }

    pub fn into_parts(self) -> (ChainTrace, MemoryPool, Option<Surrogate>) {
        (self.trace, self.pool, self.surrogate)
    }

    /// Serializes the complete sampler (state, pool, surrogate, rng, trace so far).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        bincode::serialize_into(&mut w, &(CHECKPOINT_MAGIC, CHECKPOINT_VERSION))?;
        bincode::serialize_into(&mut w, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let (magic, version): (String, u32) = bincode::deserialize_from(&mut r)?;
        if magic != CHECKPOINT_MAGIC || version != CHECKPOINT_VERSION {
            return Err(Error::Serialization(format!(
                "{}: not a version {CHECKPOINT_VERSION} chain checkpoint",
                path.display()
            )));
        }
        Ok(bincode::deserialize_from(&mut r)?)
    }
}

/// Initializes and runs a full chain.
pub fn run(
    target: &TargetModel,
    cfg: NipaConfig,
) -> Result<(ChainTrace, MemoryPool, Option<Surrogate>)> {
    let mut sampler = NipaSampler::initialize(target, cfg)?;
    sampler.run(target, None)?;
    Ok(sampler.into_parts())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_cfg() -> NipaConfig {
        NipaConfig {
            m0: 20,
            total_iters: 120,
            refit_every: 50,
            hmc: HmcSettings {
                step_size: Some(0.2),
                ..HmcSettings::default()
            },
            sghmc: SghmcSettings {
                step_size: Some(0.01),
                friction: 0.5,
                burn_in: 200,
                thin: 5,
                ..SghmcSettings::default()
            },
            surrogate: SurrogateHyper {
                ae_hidden: 8,
                reg_hidden: vec![8, 8],
                ae_epochs: 20,
                reg_epochs: 20,
                refit_ae_epochs: 5,
                refit_reg_epochs: 5,
                ..SurrogateHyper::default()
            },
            seed: 3,
            ..NipaConfig::default()
        }
    }

    #[test]
    fn boundaries_follow_inequalities() {
        assert_eq!(gate(1.0, 1.0, 2.0), Branch::Ec);
        assert_eq!(gate(2.0, 1.0, 2.0), Branch::Mf);
        assert_eq!(gate(2.0 + 1e-12, 1.0, 2.0), Branch::Mb);
        assert_eq!(gate(0.0, 0.0, 0.0), Branch::Ec);
        assert_eq!(gate(1e-300, 0.0, 0.0), Branch::Mb);
        assert_eq!(gate(1e300, 0.0, f64::INFINITY), Branch::Mf);
    }

    proptest! {
        #[test]
        fn gate_partitions(a in 0.0f64..10.0, b in 0.0f64..10.0, d in 0.0f64..12.0) {
            let (t1, t2) = if a < b { (a, b) } else { (b, a + 1e-9) };
            let br = gate(d, t1, t2);
            let hits = [d <= t1, t1 < d && d <= t2, d > t2];
            prop_assert_eq!(hits.iter().filter(|&&h| h).count(), 1);
            let expect = if hits[0] { Branch::Ec } else if hits[1] { Branch::Mf } else { Branch::Mb };
            prop_assert_eq!(br, expect);
        }
    }

    fn crafted_pool() -> MemoryPool {
        let mut pool = MemoryPool::new(2);
        pool.insert(&[0.0, 0.0], -1.0, Origin::Mb).unwrap();
        pool.insert(&[1.0, 1.0], -2.0, Origin::Mf).unwrap();
        pool
    }

    #[test]
    fn mb_with_identity_trajectory_grows_pool() {
        let target = TargetModel::standard_gaussian(2);
        let mut pool = crafted_pool();
        let mut state = ChainState {
            theta: vec![0.5, 0.5].into(),
            l_mb: -1.0,
            l_mf: -2.0,
            t: 10,
        };
        let ctx = StepContext {
            target: &target,
            surrogate: None,
            thresholds: Thresholds { t1: 0.0, t2: 0.0 },
            sigma_rw: 0.1,
            hmc: HmcConfig {
                step_size: 0.0,
                leapfrog_steps: 3,
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rec = nipa_step(&mut state, &mut pool, &ctx, &mut rng).unwrap();
        assert_eq!(rec.branch, Branch::Mb);
        assert!(rec.accepted);
        assert_eq!(rec.t, 11);
        assert_eq!(rec.exact_evals, 4);
        assert_eq!(pool.len(), 3);
        assert_eq!(pool.origins()[2], Origin::Mb);
        assert_eq!(pool.theta(2), &[0.5, 0.5]);
        assert_eq!(state.l_mb, -0.25);
    }

    #[test]
    fn mf_with_zero_log_ratio_accepts() {
        let target = TargetModel::standard_gaussian(2);
        let mut big = MemoryPool::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let t: Vec<f64> = (0..2)
                .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
                .collect();
            big.insert(&t, -4.0, Origin::Mb).unwrap();
        }
        // Constant targets make the surrogate predict exactly -4.
        let s = Surrogate::fit(&big, &tiny_cfg().surrogate).unwrap();
        let mut state = ChainState {
            theta: vec![0.1, 0.1].into(),
            l_mb: -9.0,
            l_mf: -4.0,
            t: 0,
        };
        let ctx = StepContext {
            target: &target,
            surrogate: Some(&s),
            thresholds: Thresholds {
                t1: 0.0,
                t2: f64::INFINITY,
            },
            sigma_rw: 0.05,
            hmc: HmcConfig::default(),
        };
        for i in 0..20 {
            let rec = nipa_step(&mut state, &mut big, &ctx, &mut rng).unwrap();
            assert_eq!(rec.branch, Branch::Mf);
            assert!(rec.accepted);
            assert_eq!(rec.log_density, -4.0);
            assert_eq!(big.len(), 31 + i);
            assert_eq!(big.origins()[30 + i], Origin::Mf);
        }
        assert_eq!(target.exact_evals(), 0);
    }

    #[test]
    fn mf_without_surrogate_is_an_error() {
        let target = TargetModel::standard_gaussian(2);
        let mut pool = crafted_pool();
        let mut state = ChainState {
            theta: vec![5.0, 5.0].into(),
            l_mb: 0.0,
            l_mf: 0.0,
            t: 0,
        };
        let ctx = StepContext {
            target: &target,
            surrogate: None,
            thresholds: Thresholds {
                t1: 0.0,
                t2: f64::INFINITY,
            },
            sigma_rw: 0.1,
            hmc: HmcConfig::default(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            nipa_step(&mut state, &mut pool, &ctx, &mut rng),
            Err(Error::SurrogateMissing)
        ));
    }

    #[test]
    fn ec_moves_without_inserting() {
        let target = TargetModel::standard_gaussian(2);
        let mut pool = crafted_pool();
        let mut state = ChainState {
            theta: vec![0.0, 0.0].into(),
            l_mb: -1.0,
            l_mf: -50.0,
            t: 0,
        };
        let ctx = StepContext {
            target: &target,
            surrogate: None,
            thresholds: Thresholds {
                t1: f64::MAX,
                t2: f64::INFINITY,
            },
            sigma_rw: 1e-3,
            hmc: HmcConfig::default(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rec = nipa_step(&mut state, &mut pool, &ctx, &mut rng).unwrap();
        assert_eq!(rec.branch, Branch::Ec);
        assert!(rec.accepted);
        assert_eq!(rec.log_density, -1.0);
        assert_ne!(&*state.theta, &[0.0, 0.0]);
        assert_eq!(pool.len(), 2);
        assert_eq!((state.l_mb, state.l_mf), (-1.0, -50.0));
        assert_eq!(target.exact_evals(), 0);
    }

    #[test]
    fn ec_references_depend_on_neighbour_origin() {
        // Nearest entry is MF with L = -2; L_MF = -2 gives ratio 0, L_MF = +inf-ish never accepts.
        let target = TargetModel::standard_gaussian(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ctx = StepContext {
            target: &target,
            surrogate: None,
            thresholds: Thresholds {
                t1: f64::MAX,
                t2: f64::INFINITY,
            },
            sigma_rw: 1e-3,
            hmc: HmcConfig::default(),
        };
        let mut pool = crafted_pool();
        let mut state = ChainState {
            theta: vec![1.0, 1.0].into(),
            l_mb: 1e6,
            l_mf: -2.0,
            t: 0,
        };
        assert!(
            nipa_step(&mut state, &mut pool, &ctx, &mut rng)
                .unwrap()
                .accepted
        );
        state.theta = vec![1.0, 1.0].into();
        state.l_mf = 1e6;
        assert!(
            !nipa_step(&mut state, &mut pool, &ctx, &mut rng)
                .unwrap()
                .accepted
        );
        assert_eq!(&*state.theta, &[1.0, 1.0]);
    }

    #[test]
    fn degenerate_horizon_has_no_iterations() {
        let target = TargetModel::standard_gaussian(3);
        let cfg = NipaConfig {
            total_iters: 20,
            ..tiny_cfg()
        };
        let (trace, pool, surrogate) = run(&target, cfg).unwrap();
        assert!(trace.records.is_empty());
        assert_eq!(trace.samples.rows(), 0);
        assert_eq!(trace.pool_states.rows(), 20);
        assert_eq!(pool.len(), 20);
        assert!(surrogate.is_none());
    }

    #[test]
    fn all_mb_run_accounts_exact_evaluations() {
        let target = TargetModel::standard_gaussian(3);
        let cfg = NipaConfig {
            thresholds: ThresholdRule::Fixed { t1: 0.0, t2: 0.0 },
            allow_degenerate_thresholds: true,
            ..tiny_cfg()
        };
        let mut sampler = NipaSampler::initialize(&target, cfg).unwrap();
        let before = target.exact_evals();
        sampler.run(&target, None).unwrap();
        let trace = sampler.trace();
        assert_eq!(trace.branch_count(Branch::Mb), 100);
        assert_eq!(target.exact_evals() - before, trace.phase3_exact_evals);
        assert_eq!(trace.phase3_exact_evals, 100 * 11);
        let accepted = trace.records.iter().filter(|r| r.accepted).count();
        assert_eq!(sampler.pool().len(), 20 + accepted);
        assert!(sampler.pool().origins()[20..]
            .iter()
            .all(|&o| o == Origin::Mb));
    }

    #[test]
    fn all_mf_run_makes_no_exact_calls() {
        let target = TargetModel::standard_gaussian(3);
        let cfg = NipaConfig {
            thresholds: ThresholdRule::Fixed {
                t1: 0.0,
                t2: f64::INFINITY,
            },
            ..tiny_cfg()
        };
        let mut sampler = NipaSampler::initialize(&target, cfg).unwrap();
        let before = target.exact_evals();
        sampler.run(&target, None).unwrap();
        assert_eq!(target.exact_evals(), before);
        assert_eq!(sampler.trace().phase3_exact_evals, 0);
        assert_eq!(sampler.trace().branch_count(Branch::Mf), 100);
        assert_eq!(
            sampler.trace().records.iter().filter(|r| r.refit).count(),
            2
        );
    }

    #[test]
    fn origins_match_creating_branch() {
        let target = TargetModel::standard_gaussian(4);
        let cfg = NipaConfig {
            sigma_rw: Some(0.3),
            ..tiny_cfg()
        };
        let mut sampler = NipaSampler::initialize(&target, cfg).unwrap();
        sampler.run(&target, None).unwrap();
        let mut expected = Vec::new();
        for r in &sampler.trace().records {
            match (r.branch, r.accepted) {
                (Branch::Mb, true) => expected.push(Origin::Mb),
                (Branch::Mf, true) => expected.push(Origin::Mf),
                _ => {}
            }
        }
        assert_eq!(&sampler.pool().origins()[20..], &expected[..]);
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let target = TargetModel::banana(3, 1.0, 0.5).unwrap();
        let a = run(&target, tiny_cfg()).unwrap().0;
        let b = run(&target, tiny_cfg()).unwrap().0;
        assert_eq!(a, b);
        let c = run(
            &target,
            NipaConfig {
                seed: 4,
                ..tiny_cfg()
            },
        )
        .unwrap()
        .0;
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let target = TargetModel::standard_gaussian(3);
        let full = run(&target, tiny_cfg()).unwrap().0;
        let mut first = NipaSampler::initialize(&target, tiny_cfg()).unwrap();
        for _ in 0..37 {
            first.step(&target).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.bin");
        first.save(&path).unwrap();
        let mut resumed = NipaSampler::load(&path).unwrap();
        resumed.run(&target, None).unwrap();
        assert_eq!(resumed.trace().samples, full.samples);
        assert_eq!(resumed.trace().records, full.records);
    }

    #[test]
    fn validation_lists_every_problem() {
        let cfg = NipaConfig {
            m0: 0,
            refit_every: 0,
            thresholds: ThresholdRule::Fixed { t1: 2.0, t2: 1.0 },
            sigma_rw: Some(-1.0),
            ..NipaConfig::default()
        };
        let errs = cfg.validate(10);
        assert!(errs.len() >= 4, "{errs:?}");
        let eq = NipaConfig {
            thresholds: ThresholdRule::Fixed { t1: 0.0, t2: 0.0 },
            ..NipaConfig::default()
        };
        assert_eq!(eq.validate(10).len(), 1);
        let ok = NipaConfig {
            allow_degenerate_thresholds: true,
            ..eq
        };
        assert!(ok.validate(10).is_empty(), "{:?}", ok.validate(10));
    }
}
