//! Synthetic regression and classification benchmarks generated by a
//! two-hidden-layer ReLU network with a known ground-truth parameter vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{self, Split, SplitSpec};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{self, sigmoid, Activation, NetSpec, ParamVector};
use crate::targets::{Dataset, SplitTag, Task};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRegression {
    pub n: usize,
    pub d: usize,
    pub h1: usize,
    pub h2: usize,
    pub noise_var: f64,
    /// Ground-truth entries are iid uniform on `[-theta_bound, theta_bound]`.
    pub theta_bound: f64,
    pub train_fraction: f64,
}

impl Default for SyntheticRegression {
    /// 5000 rows, 100 features, widths 32/8: 3505 parameters.
    fn default() -> Self {
        Self {
            n: 5000,
            d: 100,
            h1: 32,
            h2: 8,
            noise_var: 0.1,
            theta_bound: 1.0,
            train_fraction: 0.9,
        }
    }
}

/// Variances of the ground-truth prior, one weight and one bias variance per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockVariances {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl BlockVariances {
    /// `2/fan_in` for hidden weights, `1/fan_in` for the output layer, 0.01 for biases.
    pub fn scaled(spec: &NetSpec) -> Self {
        let layers = spec.num_layers();
        let weights = (0..layers)
            .map(|l| {
                let fan_in = spec.widths()[l] as f64;
                if l + 1 == layers {
                    1.0 / fan_in
                } else {
                    2.0 / fan_in
                }
            })
            .collect();
        Self {
            weights,
            biases: vec![0.01; layers],
        }
    }

    pub fn uniform(layers: usize, weight_var: f64, bias_var: f64) -> Self {
        Self {
            weights: vec![weight_var; layers],
            biases: vec![bias_var; layers],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClassification {
    pub n: usize,
    pub d: usize,
    pub h1: usize,
    pub h2: usize,
    /// `None` uses [`BlockVariances::scaled`].
    pub blocks: Option<BlockVariances>,
    pub train_fraction: f64,
}

impl Default for SyntheticClassification {
    /// 20000 rows, 512 features, widths 256/64: 147841 parameters.
    fn default() -> Self {
        Self {
            n: 20_000,
            d: 512,
            h1: 256,
            h2: 64,
            blocks: None,
            train_fraction: 0.9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub spec: NetSpec,
    pub theta_star: ParamVector,
    pub full: Dataset,
    pub train: Dataset,
    pub test: Dataset,
    pub split: Split,
}

pub fn generator_spec(d: usize, h1: usize, h2: usize) -> Result<NetSpec> {
    NetSpec::mlp(d, &[h1, h2], 1, Activation::Relu, Activation::Identity)
}

pub fn make_synthetic_regression(cfg: &SyntheticRegression, seed: u64) -> Result<SyntheticData> {
    if cfg.n < 2 || cfg.d == 0 || cfg.h1 == 0 || cfg.h2 == 0 {
        return Err(Error::InvalidArgument(
            "synthetic sizes must be positive".into(),
        ));
    }
    if !(cfg.noise_var >= 0.0) || !(cfg.theta_bound > 0.0) {
        return Err(Error::InvalidArgument(
            "noise_var must be >= 0 and theta_bound > 0".into(),
        ));
    }
    let spec = generator_spec(cfg.d, cfg.h1, cfg.h2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    let x = Matrix::from_vec(
        cfg.n,
        cfg.d,
        (0..cfg.n * cfg.d).map(|_| unit.sample(&mut rng)).collect(),
    )?;
    let bound = Uniform::new_inclusive(-cfg.theta_bound, cfg.theta_bound).expect("valid range");
    let theta_star = ParamVector::new(
        (0..spec.num_params())
            .map(|_| bound.sample(&mut rng))
            .collect(),
    );
    let signal = nn::forward(&spec, &theta_star, &x)?.into_vec();
    let sd = cfg.noise_var.sqrt();
    let y: Vec<f64> = signal
        .iter()
        .map(|&f| {
            let e: f64 = rng.sample(StandardNormal);
            f + sd * e
        })
        .collect();
    let full = Dataset::new(x, y, Task::Regression, SplitTag::Train)?;
    finish(spec, theta_star, full, cfg.train_fraction, seed, false)
}

pub fn make_synthetic_classification(
    cfg: &SyntheticClassification,
    seed: u64,
) -> Result<SyntheticData> {
    if cfg.n < 2 || cfg.d == 0 || cfg.h1 == 0 || cfg.h2 == 0 {
        return Err(Error::InvalidArgument(
            "synthetic sizes must be positive".into(),
        ));
    }
    let spec = generator_spec(cfg.d, cfg.h1, cfg.h2)?;
    let blocks = cfg
        .blocks
        .clone()
        .unwrap_or_else(|| BlockVariances::scaled(&spec));
    if blocks.weights.len() != spec.num_layers() || blocks.biases.len() != spec.num_layers() {
        return Err(Error::InvalidArgument(format!(
            "block variances need {} entries per group",
            spec.num_layers()
        )));
    }
    if blocks
        .weights
        .iter()
        .chain(&blocks.biases)
        .any(|&v| !(v >= 0.0))
    {
        return Err(Error::InvalidArgument(
            "block variances must be >= 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_vec(
        cfg.n,
        cfg.d,
        (0..cfg.n * cfg.d)
            .map(|_| rng.sample(StandardNormal))
            .collect(),
    )?;
    let mut theta = Vec::with_capacity(spec.num_params());
    for l in 0..spec.num_layers() {
        let (fan_in, fan_out) = (spec.widths()[l], spec.widths()[l + 1]);
        let w = Normal::new(0.0, blocks.weights[l].sqrt()).expect("finite sd");
        theta.extend((0..fan_in * fan_out).map(|_| w.sample(&mut rng)));
        let b = Normal::new(0.0, blocks.biases[l].sqrt()).expect("finite sd");
        theta.extend((0..fan_out).map(|_| b.sample(&mut rng)));
    }
    let theta_star = ParamVector::new(theta);
    let logits = nn::forward(&spec, &theta_star, &x)?.into_vec();
    let y: Vec<f64> = logits
        .iter()
        .map(|&z| f64::from(rng.random::<f64>() < sigmoid(z)))
        .collect();
    let full = Dataset::new(x, y, Task::Classification, SplitTag::Train)?;
    finish(spec, theta_star, full, cfg.train_fraction, seed, true)
}

fn finish(
    spec: NetSpec,
    theta_star: ParamVector,
    full: Dataset,
    train_fraction: f64,
    seed: u64,
    stratify: bool,
) -> Result<SyntheticData> {
    let split_spec = SplitSpec {
        train_fraction,
        seed: seed.wrapping_add(1),
        stratify,
    };
    let (train, test, split) = data::split(&full, &split_spec)?;
    Ok(SyntheticData {
        spec,
        theta_star,
        full,
        train,
        test,
        split,
    })
}
