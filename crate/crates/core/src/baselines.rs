//! Reference samplers run from the same SGHMC warm start as the gated sampler:
//! plain HMC, SGHMC and random-walk Metropolis.

use crate::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::KernelRecord;
use crate::kernels::{self, HmcConfig};
use crate::matrix::Matrix;
use crate::nipa::{warmup, NipaConfig};
use crate::pool::MemoryPool;
use crate::targets::TargetModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Hmc,
    Sghmc,
    Rw,
}

impl std::fmt::Display for Baseline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Baseline::Hmc => "hmc",
            Baseline::Sghmc => "sghmc",
            Baseline::Rw => "rw",
        })
    }
}

#[derive(Clone, Debug)]
pub struct BaselineRun {
    pub kind: Baseline,
    pub records: Vec<KernelRecord>,
    pub samples: Matrix,
    pub pool_states: Matrix,
    pub step_size: f64,
    pub warmup_seconds: f64,
    pub sampling_seconds: f64,
    pub exact_evals: u64,
}

impl BaselineRun {
    pub fn acceptance_rate(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.accepted).count() as f64 / self.records.len() as f64
    }
}

/// Runs `samples` iterations of `kind` after the shared warm-up. `rw_sigma`
/// defaults to `cfg.sigma_rw`, then to `sigma_rw_factor` times the mean std of
/// the warm-up states.
pub fn run_baseline(
    target: &TargetModel,
    cfg: &NipaConfig,
    kind: Baseline,
    samples: usize,
    rw_sigma: Option<f64>,
) -> Result<BaselineRun> {
    let mut warm_cfg = cfg.clone();
    warm_cfg.total_iters = cfg.m0;
    let errs = warm_cfg.validate(target.dim());
    if !errs.is_empty() {
        return Err(Error::InvalidConfig(errs));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let warm = warmup(target, cfg, &mut rng)?;
    let mut pool_states = Matrix::zeros(0, target.dim());
    for s in &warm.states {
        pool_states.push_row(s)?;
    }
    let mut theta = warm.states.last().cloned().ok_or(Error::EmptyPool)?;
    let mut log_density = *warm.log_densities.last().ok_or(Error::EmptyPool)?;
    let mut out = Matrix::zeros(0, target.dim());
    let mut records = Vec::with_capacity(samples);
    let evals_before = target.exact_evals();
    let mut sampling_seconds = 0.0;
    let step_size = match kind {
        Baseline::Hmc => {
            let hmc = HmcConfig {
                step_size: warm.hmc_step_size,
                leapfrog_steps: cfg.hmc.leapfrog_steps,
            };
            for t in 0..samples {
                let start = Instant::now();
                let step = kernels::hmc_step(target, &theta, &hmc, &mut rng)?;
                theta = step.theta;
                out.push_row(&theta)?;
                let ns = start.elapsed().as_nanos() as u64;
                sampling_seconds += ns as f64 * 1e-9;
                records.push(KernelRecord {
                    t: cfg.m0 + t + 1,
                    accepted: step.accepted,
                    log_density: Some(step.log_density),
                    exact_evals: step.exact_evals,
                    wall_nanos: ns,
                });
            }
            warm.hmc_step_size
        }
        Baseline::Sghmc => {
            let sg = cfg.sghmc.kernel(warm.sghmc_step_size, samples);
            let sg = kernels::SghmcConfig {
                steps: samples,
                thin: 1,
                ..sg
            };
            let start = Instant::now();
            let states = kernels::sghmc_run(target, &theta, &sg, samples, &mut rng)?;
            sampling_seconds = start.elapsed().as_secs_f64();
            let per = (sampling_seconds * 1e9 / samples.max(1) as f64) as u64;
            for (t, s) in states.iter().enumerate() {
                out.push_row(s)?;
                records.push(KernelRecord {
                    t: cfg.m0 + t + 1,
                    accepted: true,
                    log_density: None,
                    exact_evals: 0,
                    wall_nanos: per,
                });
            }
            warm.sghmc_step_size
        }
        Baseline::Rw => {
            let sigma = match rw_sigma.or(cfg.sigma_rw) {
                Some(s) => s,
                None => {
                    let mut pool = MemoryPool::new(target.dim());
                    for (s, &l) in warm.states.iter().zip(&warm.log_densities) {
                        pool.insert(s, l, crate::pool::Origin::Mb)?;
                    }
                    cfg.sigma_rw_factor * pool.mean_std()
                }
            };
            for t in 0..samples {
                let start = Instant::now();
                let prop = kernels::rw_propose(&theta, sigma, &mut rng);
                let lp = target.log_posterior(&prop)?;
                let accepted = kernels::mh_accept(lp - log_density, &mut rng)?;
                if accepted {
                    theta = prop;
                    log_density = lp;
                }
                out.push_row(&theta)?;
                let ns = start.elapsed().as_nanos() as u64;
                sampling_seconds += ns as f64 * 1e-9;
                records.push(KernelRecord {
                    t: cfg.m0 + t + 1,
                    accepted,
                    log_density: Some(log_density),
                    exact_evals: 1,
                    wall_nanos: ns,
                });
            }
            sigma
        }
    };
    Ok(BaselineRun {
        kind,
        records,
        samples: out,
        pool_states,
        step_size,
        warmup_seconds: warm.seconds,
        sampling_seconds,
        exact_evals: target.exact_evals() - evals_before,
    })
}
