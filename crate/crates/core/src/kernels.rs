//! Transition kernels: Gaussian random walk, exact-gradient HMC with a
//! Metropolis correction, and constant-friction SGHMC for seeding the pool.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamVector;
use crate::targets::TargetModel;

/// Energy errors above this are treated as divergent trajectories and rejected.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            leapfrog_steps: 10,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            errs.push(format!(
                "hmc step_size must be positive, got {}",
                self.step_size
            ));
        }
        if self.leapfrog_steps == 0 {
            errs.push("hmc leapfrog_steps must be at least 1".into());
        }
        errs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SghmcConfig {
    /// Learning rate `eta` in `v <- (1 - friction) v + eta g + N(0, 2 friction eta)`.
    pub step_size: f64,
    pub friction: f64,
    pub batch_size: usize,
    /// Total number of updates; the retained states are the last ones at
    /// multiples of `thin`.
    pub steps: usize,
    pub thin: usize,
}

impl Default for SghmcConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-4,
            friction: 0.1,
            batch_size: 128,
            steps: 2000,
            thin: 10,
        }
    }
}

impl SghmcConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            errs.push(format!(
                "sghmc step_size must be positive, got {}",
                self.step_size
            ));
        }
        if !(self.friction > 0.0 && self.friction <= 1.0) {
            errs.push(format!(
                "sghmc friction must be in (0, 1], got {}",
                self.friction
            ));
        }
        if self.batch_size == 0 {
            errs.push("sghmc batch_size must be at least 1".into());
        }
        if self.steps == 0 {
            errs.push("sghmc steps must be at least 1".into());
        }
        if self.thin == 0 {
            errs.push("sghmc thin must be at least 1".into());
        }
        errs
    }
}

/// `theta + sigma * N(0, I)`. `sigma = 0` returns a copy of `theta`.
pub fn rw_propose<R: Rng + ?Sized>(theta: &[f64], sigma: f64, rng: &mut R) -> ParamVector {
    theta
        .iter()
        .map(|&t| {
            let e: f64 = rng.sample(StandardNormal);
            t + sigma * e
        })
        .collect::<Vec<_>>()
        .into()
}

/// Metropolis test: accept with probability `min(1, exp(log_ratio))`.
/// One uniform is consumed on every call so that rng streams do not depend
/// on the ratio.
pub fn mh_accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> Result<bool> {
    if log_ratio.is_nan() {
        return Err(Error::NanLogRatio);
    }
    let u: f64 = rng.random();
    Ok(log_ratio >= 0.0 || u.ln() < log_ratio)
}

/// End point of a leapfrog trajectory.
#[derive(Clone, Debug)]
pub struct LeapfrogEnd {
    pub theta: ParamVector,
    pub momentum: ParamVector,
    pub log_density: f64,
    pub grad: ParamVector,
}

fn to_divergence(err: Error, iteration: usize, last_stable: &[f64]) -> Error {
    match err {
        Error::NonFinite { .. } => Error::Divergence {
            iteration,
            last_stable: last_stable.to_vec(),
        },
        other => other,
    }
}

/// Leapfrog integration with a caller-supplied `(log pi, grad log pi)` oracle.
/// `start` is the oracle's value at `theta`; `path`, when given, receives every
/// intermediate position.
pub(crate) fn leapfrog_with<F>(
    mut eval: F,
    theta: &[f64],
    momentum: &[f64],
    start_grad: &[f64],
    step_size: f64,
    steps: usize,
    mut path: Option<&mut Vec<ParamVector>>,
) -> Result<LeapfrogEnd>
where
    F: FnMut(&[f64]) -> Result<(f64, ParamVector)>,
{
    let mut q = theta.to_vec();
    let mut p = momentum.to_vec();
    for (pi, g) in p.iter_mut().zip(start_grad) {
        *pi += 0.5 * step_size * g;
    }
    let mut value = f64::NAN;
    let mut grad = ParamVector::zeros(q.len());
    for i in 0..steps {
        let prev = q.clone();
        for (qi, pi) in q.iter_mut().zip(&p) {
            *qi += step_size * pi;
        }
        if !q.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence {
                iteration: i,
                last_stable: prev,
            });
        }
        let (v, g) = eval(&q).map_err(|e| to_divergence(e, i, &prev))?;
        let scale = if i + 1 == steps { 0.5 } else { 1.0 };
        for (pi, gi) in p.iter_mut().zip(g.iter()) {
            *pi += scale * step_size * gi;
        }
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence {
                iteration: i,
                last_stable: prev,
            });
        }
        if let Some(path) = path.as_deref_mut() {
            path.push(q.clone().into());
        }
        value = v;
        grad = g;
    }
    if steps == 0 {
        return Err(Error::InvalidArgument(
            "leapfrog needs at least one step".into(),
        ));
    }
    Ok(LeapfrogEnd {
        theta: q.into(),
        momentum: p.into(),
        log_density: value,
        grad,
    })
}

/// `steps` leapfrog steps of size `step_size` from `(theta, momentum)` with
/// identity mass. Costs `steps + 1` gradient evaluations.
pub fn leapfrog(
    target: &TargetModel,
    theta: &[f64],
    momentum: &[f64],
    step_size: f64,
    steps: usize,
) -> Result<(ParamVector, ParamVector)> {
    let (_, g0) = target.value_and_grad(theta)?;
    let end = leapfrog_with(
        |q| target.value_and_grad(q),
        theta,
        momentum,
        &g0,
        step_size,
        steps,
        None,
    )?;
    Ok((end.theta, end.momentum))
}

/// As [`leapfrog`], also returning every intermediate position (starting point first).
pub fn leapfrog_path(
    target: &TargetModel,
    theta: &[f64],
    momentum: &[f64],
    step_size: f64,
    steps: usize,
) -> Result<Vec<ParamVector>> {
    let (_, g0) = target.value_and_grad(theta)?;
    let mut path = vec![ParamVector::new(theta.to_vec())];
    leapfrog_with(
        |q| target.value_and_grad(q),
        theta,
        momentum,
        &g0,
        step_size,
        steps,
        Some(&mut path),
    )?;
    Ok(path)
}

fn kinetic(p: &[f64]) -> f64 {
    0.5 * p.iter().map(|v| v * v).sum::<f64>()
}

#[derive(Clone, Debug)]
pub struct HmcOutcome {
    pub theta: ParamVector,
    pub accepted: bool,
    /// Exact log-density of the returned state.
    pub log_density: f64,
    pub proposal_log_density: f64,
    /// `H(proposal) - H(start)`; infinite for divergent trajectories.
    pub delta_h: f64,
    pub accept_prob: f64,
    pub diverged: bool,
    /// Full-data evaluations spent, always `leapfrog_steps + 1`
    /// (fewer when the trajectory diverges early).
    pub exact_evals: u64,
}

/// One HMC transition from `theta`. Divergent trajectories are rejected.
pub fn hmc_step<R: Rng + ?Sized>(
    target: &TargetModel,
    theta: &[f64],
    cfg: &HmcConfig,
    rng: &mut R,
) -> Result<HmcOutcome> {
    let before = target.exact_evals();
    let (l0, g0) = target.value_and_grad(theta)?;
    let p0: Vec<f64> = (0..theta.len())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let h0 = -l0 + kinetic(&p0);
    let traj = leapfrog_with(
        |q| target.value_and_grad(q),
        theta,
        &p0,
        &g0,
        cfg.step_size,
        cfg.leapfrog_steps,
        None,
    );
    let (delta_h, proposal) = match traj {
        Ok(end) => {
            let dh = (-end.log_density + kinetic(&end.momentum)) - h0;
            (dh, Some(end))
        }
        Err(Error::Divergence { .. }) => (f64::INFINITY, None),
        Err(e) => return Err(e),
    };
    let diverged =
        proposal.is_none() || !delta_h.is_finite() || delta_h.abs() > DIVERGENCE_THRESHOLD;
    let (accepted, accept_prob) = if diverged {
        // Keep the rng stream aligned with the non-divergent path.
        let _: f64 = rng.random();
        (false, 0.0)
    } else {
        (mh_accept(-delta_h, rng)?, (-delta_h).exp().min(1.0))
    };
    let exact_evals = target.exact_evals() - before;
    let proposal_log_density = proposal.as_ref().map_or(f64::NAN, |e| e.log_density);
    Ok(match (accepted, proposal) {
        (true, Some(end)) => HmcOutcome {
            theta: end.theta,
            accepted,
            log_density: end.log_density,
            proposal_log_density,
            delta_h,
            accept_prob,
            diverged,
            exact_evals,
        },
        _ => HmcOutcome {
            theta: ParamVector::new(theta.to_vec()),
            accepted: false,
            log_density: l0,
            proposal_log_density,
            delta_h,
            accept_prob,
            diverged,
            exact_evals,
        },
    })
}

/// Mean acceptance probability of `trials` fresh-momentum trajectories from a fixed point.
pub fn mean_accept_prob<R: Rng + ?Sized>(
    target: &TargetModel,
    theta: &[f64],
    cfg: &HmcConfig,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..trials {
        total += hmc_step(target, theta, cfg, rng)?.accept_prob;
    }
    Ok(total / trials.max(1) as f64)
}

/// Doubling/halving search for a step size whose mean acceptance at `theta`
/// brackets `target_accept`. Returns the largest tried step whose acceptance
/// is at least the target.
pub fn tune_step_size<R: Rng + ?Sized>(
    target: &TargetModel,
    theta: &[f64],
    initial: f64,
    leapfrog_steps: usize,
    target_accept: f64,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    const MAX_ROUNDS: usize = 40;
    if !(initial > 0.0 && initial.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "initial step size {initial}"
        )));
    }
    let rate = |eps: f64, rng: &mut R| {
        let cfg = HmcConfig {
            step_size: eps,
            leapfrog_steps,
        };
        mean_accept_prob(target, theta, &cfg, trials, rng)
    };
    let mut eps = initial;
    let mut a = rate(eps, rng)?;
    if a >= target_accept {
        for _ in 0..MAX_ROUNDS {
            let next = 2.0 * eps;
            let an = rate(next, rng)?;
            if an < target_accept {
                break;
            }
            eps = next;
            a = an;
        }
    } else {
        for _ in 0..MAX_ROUNDS {
            eps *= 0.5;
            a = rate(eps, rng)?;
            if a >= target_accept {
                break;
            }
        }
    }
    log::debug!("tuned step size {eps:.3e} (mean acceptance {a:.3})");
    Ok(eps)
}

/// SGHMC with a caller-supplied gradient oracle. Returns the retained states.
pub(crate) fn sghmc_with<R, F>(
    mut grad: F,
    theta0: &[f64],
    cfg: &SghmcConfig,
    retain: usize,
    rng: &mut R,
) -> Result<Vec<ParamVector>>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64], &mut R) -> Result<ParamVector>,
{
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::InvalidConfig(errs));
    }
    if retain == 0 || cfg.steps < retain * cfg.thin {
        return Err(Error::InvalidArgument(format!(
            "sghmc needs steps >= retain * thin ({} < {} * {})",
            cfg.steps, retain, cfg.thin
        )));
    }
    let first_kept = cfg.steps - retain * cfg.thin;
    let noise_sd = (2.0 * cfg.friction * cfg.step_size).sqrt();
    let mut theta = theta0.to_vec();
    let mut v = vec![0.0; theta.len()];
    let mut kept = Vec::with_capacity(retain);
    for step in 0..cfg.steps {
        let g = grad(&theta, rng).map_err(|e| to_divergence(e, step, &theta))?;
        let prev = theta.clone();
        for ((vi, qi), gi) in v.iter_mut().zip(theta.iter_mut()).zip(g.iter()) {
            let e: f64 = rng.sample(StandardNormal);
            *vi = (1.0 - cfg.friction) * *vi + cfg.step_size * gi + noise_sd * e;
            *qi += *vi;
        }
        if !theta.iter().all(|t| t.is_finite()) {
            return Err(Error::Divergence {
                iteration: step,
                last_stable: prev,
            });
        }
        if step >= first_kept && (step + 1 - first_kept) % cfg.thin == 0 {
            kept.push(ParamVector::new(theta.clone()));
        }
    }
    Ok(kept)
}

/// Constant-friction SGHMC without Metropolis correction, retaining `retain`
/// states thinned by `cfg.thin` from the end of the run. Minibatches are drawn
/// without replacement; when `batch_size >= N` every step uses the full data
/// and no rng is spent on batching.
pub fn sghmc_run<R: Rng + ?Sized>(
    target: &TargetModel,
    theta0: &[f64],
    cfg: &SghmcConfig,
    retain: usize,
    rng: &mut R,
) -> Result<Vec<ParamVector>> {
    let n = target.num_data();
    let full: Vec<usize> = (0..n).collect();
    sghmc_with(
        |theta, rng: &mut R| {
            if n == 0 {
                target.grad_log_posterior(theta)
            } else if cfg.batch_size >= n {
                target.stochastic_grad(theta, &full)
            } else {
                let batch = index::sample(rng, n, cfg.batch_size).into_vec();
                target.stochastic_grad(theta, &batch)
            }
        },
        theta0,
        cfg,
        retain,
        rng,
    )
}

/// SGHMC step size from the doubling ladder `initial * 2^k` whose
/// `pilot_steps`-step pilot from `theta0` ends at the highest log-posterior.
/// The search stops at the first pilot that diverges or ends more than `dim`
/// nats below the best so far. Falls back to `initial` when no pilot is stable.
pub fn tune_sghmc_step_size<R: Rng + ?Sized>(
    target: &TargetModel,
    theta0: &[f64],
    base: &SghmcConfig,
    initial: f64,
    pilot_steps: usize,
    doublings: usize,
    rng: &mut R,
) -> Result<f64> {
    let slack = theta0.len() as f64;
    let mut best: Option<(f64, f64)> = None;
    let mut eta = initial;
    for _ in 0..=doublings {
        let cfg = SghmcConfig {
            step_size: eta,
            steps: pilot_steps,
            thin: 1,
            ..*base
        };
        let end = match sghmc_run(target, theta0, &cfg, 1, rng) {
            Ok(end) => match target.log_posterior(&end[0]) {
                Ok(l) if l.is_finite() => Some(l),
                Ok(_) | Err(Error::NonFinite { .. }) => None,
                Err(e) => return Err(e),
            },
            Err(Error::Divergence { .. }) => None,
            Err(e) => return Err(e),
        };
        match (end, best) {
            (None, _) => break,
            (Some(l), Some((_, b))) if l < b - slack => break,
            (Some(l), Some((_, b))) if l <= b => {}
            (Some(l), _) => best = Some((eta, l)),
        }
        eta *= 2.0;
    }
    let eta = best.map_or(initial, |(e, _)| e);
    log::debug!("tuned sghmc step size {eta:.3e}");
    Ok(eta)
}
