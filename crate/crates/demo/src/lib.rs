//! Browser demo: a gated sampler on the banana density, a leapfrog trajectory
//! viewer and an ESS explorer for AR(1) chains.
//!
//! The computations are plain Rust functions so they can be tested natively;
//! the `wasm` module wraps them for JavaScript.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use nipa::diagnostics;
use nipa::error::{Error, Result};
use nipa::kernels;
use nipa::nipa::{Branch, HmcSettings, NipaConfig, NipaSampler};
use nipa::nn::Activation;
use nipa::surrogate::SurrogateHyper;
use nipa::targets::TargetModel;

pub mod wasm;

/// Scale of the banana's first coordinate.
pub const BANANA_SCALE: f64 = 1.0;

/// Phase-3 draws of one gated run on the 2-d banana.
#[derive(Clone, Debug, PartialEq)]
pub struct BananaRun {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub branches: Vec<Branch>,
    /// Pool-phase states.
    pub pool_xs: Vec<f64>,
    pub pool_ys: Vec<f64>,
    pub t1: f64,
    pub t2: f64,
    pub acceptance: f64,
}

impl BananaRun {
    pub fn fraction(&self, branch: Branch) -> f64 {
        if self.branches.is_empty() {
            return 0.0;
        }
        self.branches.iter().filter(|b| **b == branch).count() as f64 / self.branches.len() as f64
    }
}

/// Small-network settings that fit in a browser frame budget.
pub fn banana_config(samples: usize, sigma_rw_factor: f64, seed: u64) -> NipaConfig {
    NipaConfig {
        sigma_rw_factor,
        m0: 100,
        total_iters: 100 + samples,
        refit_every: 250,
        hmc: HmcSettings {
            leapfrog_steps: 10,
            ..HmcSettings::default()
        },
        surrogate: SurrogateHyper {
            latent_dim: Some(2),
            ae_hidden: 16,
            reg_hidden: vec![32, 32],
            reg_activation: Activation::Tanh,
            ae_epochs: 100,
            reg_epochs: 200,
            ..SurrogateHyper::default()
        },
        seed,
        ..NipaConfig::default()
    }
}

/// `sigma_rw_factor` scales the gating perturbation relative to the pool
/// spread; larger values push more iterations toward the exact branch.
pub fn sample_banana(
    samples: usize,
    curvature: f64,
    sigma_rw_factor: f64,
    seed: u64,
) -> Result<BananaRun> {
    let target = TargetModel::banana(2, BANANA_SCALE, curvature)?;
    let mut sampler =
        NipaSampler::initialize(&target, banana_config(samples, sigma_rw_factor, seed))?;
    sampler.run(&target, None)?;
    let th = sampler.thresholds();
    let (trace, _, _) = sampler.into_parts();
    Ok(BananaRun {
        xs: trace.samples.column_values(0),
        ys: trace.samples.column_values(1),
        branches: trace.records.iter().map(|r| r.branch).collect(),
        pool_xs: trace.pool_states.column_values(0),
        pool_ys: trace.pool_states.column_values(1),
        t1: th.t1,
        t2: th.t2,
        acceptance: trace.acceptance_rate(),
    })
}

/// Positions and Hamiltonian along one leapfrog trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `H` after each step, starting point first.
    pub energy: Vec<f64>,
}

pub fn leapfrog_trajectory(
    curvature: f64,
    q: [f64; 2],
    p: [f64; 2],
    step_size: f64,
    steps: usize,
) -> Result<Trajectory> {
    if !(step_size > 0.0 && step_size.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "step size {step_size} must be > 0"
        )));
    }
    let target = TargetModel::banana(2, BANANA_SCALE, curvature)?;
    let hamiltonian = |q: &[f64], p: &[f64]| -> Result<f64> {
        Ok(-target.log_posterior(q)? + 0.5 * p.iter().map(|v| v * v).sum::<f64>())
    };
    let mut xs = vec![q[0]];
    let mut ys = vec![q[1]];
    let mut energy = vec![hamiltonian(&q, &p)?];
    let (mut q, mut p) = (q.to_vec(), p.to_vec());
    for _ in 0..steps {
        let (q1, p1) = kernels::leapfrog(&target, &q, &p, step_size, 1)?;
        q = q1.into_inner();
        p = p1.into_inner();
        xs.push(q[0]);
        ys.push(q[1]);
        energy.push(hamiltonian(&q, &p)?);
    }
    Ok(Trajectory { xs, ys, energy })
}

/// ESS of a simulated AR(1) chain next to its analytic value.
#[derive(Clone, Debug, PartialEq)]
pub struct EssReport {
    pub chain: Vec<f64>,
    pub ess: f64,
    /// `S (1 - rho) / (1 + rho)`.
    pub analytic: f64,
    /// Autocorrelations at lags `0..=max_lag`.
    pub acf: Vec<f64>,
}

pub fn ar1_chain(rho: f64, len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let innovation = (1.0 - rho * rho).sqrt();
    let mut x: f64 = StandardNormal.sample(&mut rng);
    (0..len)
        .map(|_| {
            let out = x;
            let e: f64 = StandardNormal.sample(&mut rng);
            x = rho * x + innovation * e;
            out
        })
        .collect()
}

pub fn ess_ar1(rho: f64, len: usize, seed: u64, max_lag: usize) -> Result<EssReport> {
    if !(rho.abs() < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "|rho| = {} must be < 1",
            rho.abs()
        )));
    }
    let chain = ar1_chain(rho, len, seed);
    let ess = diagnostics::ess(&chain)?;
    let cov = diagnostics::autocovariance(&chain);
    let acf = cov
        .iter()
        .take(max_lag + 1)
        .map(|c| if cov[0] > 0.0 { c / cov[0] } else { 0.0 })
        .collect();
    Ok(EssReport {
        chain,
        ess,
        analytic: len as f64 * (1.0 - rho) / (1.0 + rho),
        acf,
    })
}
