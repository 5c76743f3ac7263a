//! Model-free log-posterior emulator: an autoencoder compresses parameter
//! vectors to a latent code and a small MLP regresses log-density on it.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{self, Activation, Loss, NetSpec, Network};
use crate::optim::Adam;
use crate::pool::{MemoryPool, Origin};

const CHECKPOINT_MAGIC: &str = "nipa-surrogate";
const CHECKPOINT_VERSION: u32 = 1;

/// Scales below this are treated as degenerate (constant column).
const DEGENERATE_SCALE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateHyper {
    /// `None` means `min(32, D)`.
    pub latent_dim: Option<usize>,
    pub ae_hidden: usize,
    pub ae_activation: Activation,
    pub reg_hidden: Vec<usize>,
    pub reg_activation: Activation,
    pub learning_rate: f64,
    pub ae_epochs: usize,
    pub reg_epochs: usize,
    /// Epochs used by warm-started refits.
    pub refit_ae_epochs: usize,
    pub refit_reg_epochs: usize,
    /// Pools up to this size train full-batch; larger ones use `batch_size`.
    pub full_batch_limit: usize,
    pub batch_size: usize,
    /// Train the regressor on exact (MB) entries only.
    pub mb_only_targets: bool,
    pub seed: u64,
}

impl Default for SurrogateHyper {
    fn default() -> Self {
        Self {
            latent_dim: None,
            ae_hidden: 256,
            ae_activation: Activation::Tanh,
            reg_hidden: vec![64, 64],
            reg_activation: Activation::Relu,
            learning_rate: 1e-3,
            ae_epochs: 200,
            reg_epochs: 300,
            refit_ae_epochs: 10,
            refit_reg_epochs: 100,
            full_batch_limit: 1024,
            batch_size: 256,
            mb_only_targets: false,
            seed: 0,
        }
    }
}

impl SurrogateHyper {
    pub fn latent_dim_for(&self, dim: usize) -> usize {
        self.latent_dim.unwrap_or(dim.min(32))
    }

    pub fn validate(&self, dim: usize) -> Vec<String> {
        let mut errs = Vec::new();
        let du = self.latent_dim_for(dim);
        if du == 0 || du > dim {
            errs.push(format!("latent_dim must be in 1..={dim}, got {du}"));
        }
        if self.ae_hidden == 0 || self.reg_hidden.contains(&0) {
            errs.push("surrogate hidden widths must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!(
                "surrogate learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            errs.push("surrogate batch_size must be at least 1".into());
        }
        errs
    }

    /// Smallest pool `fit` accepts for a `dim`-dimensional target.
    pub fn min_pool(&self, dim: usize) -> usize {
        self.latent_dim_for(dim).max(10)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Mean training loss per epoch, normalized units.
    pub ae_loss: Vec<f64>,
    pub reg_loss: Vec<f64>,
    /// Full-data losses after training.
    pub ae_final: f64,
    pub reg_final: f64,
    /// RMSE of denormalized predictions against the training targets.
    pub in_sample_rmse: f64,
    pub n_train: usize,
    pub n_targets: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    hyper: SurrogateHyper,
    dim: usize,
    latent_dim: usize,
    autoencoder: Network,
    regressor: Network,
    input_mean: Vec<f64>,
    input_scale: Vec<f64>,
    latent_mean: Vec<f64>,
    latent_scale: Vec<f64>,
    target_mean: f64,
    /// Population std of the targets; zero means a constant predictor.
    target_scale: f64,
    fits: u64,
    report: FitReport,
}

fn mean_and_scale(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = m.rows().max(1) as f64;
    let mut mean = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (a, v) in mean.iter_mut().zip(m.row(i)) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= n);
    let mut var = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for ((a, v), mu) in var.iter_mut().zip(m.row(i)).zip(&mean) {
            *a += (v - mu) * (v - mu);
        }
    }
    let scale = var
        .iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s > DEGENERATE_SCALE {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

fn standardize(m: &Matrix, mean: &[f64], scale: &[f64]) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        for ((v, mu), s) in out.row_mut(i).iter_mut().zip(mean).zip(scale) {
            *v = (*v - mu) / s;
        }
    }
    out
}

/// Pool indices ordered by log-density, then lexicographically by theta, so
/// that training does not depend on insertion order.
fn canonical_order(pool: &MemoryPool, keep: impl Fn(Origin) -> bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool.len())
        .filter(|&i| keep(pool.origins()[i]))
        .collect();
    idx.sort_by(|&a, &b| {
        pool.log_densities()[a]
            .total_cmp(&pool.log_densities()[b])
            .then_with(|| {
                pool.theta(a)
                    .iter()
                    .zip(pool.theta(b))
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    idx
}

fn rows_of(pool: &MemoryPool, idx: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(idx.len() * pool.dim());
    for &i in idx {
        data.extend_from_slice(pool.theta(i));
    }
    Matrix::from_vec(idx.len(), pool.dim(), data).expect("consistent pool buffer")
}

struct TrainPlan<'a> {
    epochs: usize,
    lr: f64,
    full_batch_limit: usize,
    batch_size: usize,
    stage: &'static str,
    rng: &'a mut ChaCha8Rng,
}

/// Mean-squared-error training with Adam. Returns the mean batch loss per epoch.
fn train(
    net: &mut Network,
    inputs: &Matrix,
    targets: &Matrix,
    plan: TrainPlan<'_>,
) -> Result<Vec<f64>> {
    let n = inputs.rows();
    let mut opt = Adam::new(net.params.dim(), plan.lr);
    let mut history = Vec::with_capacity(plan.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..plan.epochs {
        let mut total = 0.0;
        let mut batches = 0usize;
        if n <= plan.full_batch_limit {
            let (loss, grad) =
                nn::loss_and_grad(&net.spec, &net.params, inputs, targets, Loss::MeanSquared)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::SurrogateTraining {
                    stage: plan.stage,
                    epoch,
                });
            }
            opt.step(&mut net.params, &grad);
            total = loss;
            batches = 1;
        } else {
            order.shuffle(plan.rng);
            for chunk in order.chunks(plan.batch_size) {
                let x = inputs.select_rows(chunk)?;
                let y = targets.select_rows(chunk)?;
                let (loss, grad) =
                    nn::loss_and_grad(&net.spec, &net.params, &x, &y, Loss::MeanSquared)?;
                if !loss.is_finite() || !grad.is_finite() {
                    return Err(Error::SurrogateTraining {
                        stage: plan.stage,
                        epoch,
                    });
                }
                opt.step(&mut net.params, &grad);
                total += loss;
                batches += 1;
            }
        }
        history.push(total / batches as f64);
    }
    Ok(history)
}

fn full_loss(net: &Network, inputs: &Matrix, targets: &Matrix) -> Result<f64> {
    let out = net.forward(inputs)?;
    let n = out.as_slice().len().max(1) as f64;
    Ok(out
        .as_slice()
        .iter()
        .zip(targets.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

impl Surrogate {
    fn architecture(hyper: &SurrogateHyper, dim: usize) -> Result<(NetSpec, NetSpec, usize)> {
        let errs = hyper.validate(dim);
        if !errs.is_empty() {
            return Err(Error::InvalidConfig(errs));
        }
        let du = hyper.latent_dim_for(dim);
        let h = hyper.ae_hidden;
        let act = hyper.ae_activation;
        let ae = NetSpec::new(
            vec![dim, h, du, h, dim],
            vec![act, Activation::Identity, act, Activation::Identity],
        )?;
        let reg = NetSpec::mlp(
            du,
            &hyper.reg_hidden,
            1,
            hyper.reg_activation,
            Activation::Identity,
        )?;
        Ok((ae, reg, du))
    }

    /// Trains a fresh autoencoder and regressor on every pool entry.
    pub fn fit(pool: &MemoryPool, hyper: &SurrogateHyper) -> Result<Self> {
        let (ae_spec, reg_spec, du) = Self::architecture(hyper, pool.dim())?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let mut s = Self {
            hyper: hyper.clone(),
            dim: pool.dim(),
            latent_dim: du,
            autoencoder: Network::init(ae_spec, &mut init_rng),
            regressor: Network::init(reg_spec, &mut init_rng),
            input_mean: Vec::new(),
            input_scale: Vec::new(),
            latent_mean: Vec::new(),
            latent_scale: Vec::new(),
            target_mean: 0.0,
            target_scale: 0.0,
            fits: 0,
            report: FitReport::default(),
        };
        s.train_on(pool, hyper.ae_epochs, hyper.reg_epochs)?;
        Ok(s)
    }

    /// Warm-started retraining on the current pool.
    pub fn refit(&mut self, pool: &MemoryPool) -> Result<()> {
        if pool.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "surrogate refit".into(),
                expected: self.dim,
                found: pool.dim(),
            });
        }
        let (ae, reg) = (self.hyper.refit_ae_epochs, self.hyper.refit_reg_epochs);
        self.train_on(pool, ae, reg)
    }

    /// Refits when `t` is a positive multiple of `k`; returns whether it did.
    pub fn maybe_refit(&mut self, pool: &MemoryPool, t: usize, k: usize) -> Result<bool> {
        if k == 0 {
            return Err(Error::InvalidArgument(
                "refit interval k must be >= 1".into(),
            ));
        }
        if t == 0 || t % k != 0 {
            return Ok(false);
        }
        self.refit(pool)?;
        Ok(true)
    }

    fn train_on(&mut self, pool: &MemoryPool, ae_epochs: usize, reg_epochs: usize) -> Result<()> {
        let required = self.hyper.min_pool(self.dim);
        if pool.len() < required {
            return Err(Error::PoolTooSmall {
                size: pool.len(),
                required,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.hyper.seed.wrapping_add(1 + self.fits));
        let idx = canonical_order(pool, |_| true);
        let raw = rows_of(pool, &idx);
        let (mean, scale) = mean_and_scale(&raw);
        self.input_mean = mean;
        self.input_scale = scale;
        let z = standardize(&raw, &self.input_mean, &self.input_scale);

        let ae_loss = train(
            &mut self.autoencoder,
            &z,
            &z,
            TrainPlan {
                epochs: ae_epochs,
                lr: self.hyper.learning_rate,
                full_batch_limit: self.hyper.full_batch_limit,
                batch_size: self.hyper.batch_size,
                stage: "autoencoder",
                rng: &mut rng,
            },
        )?;
        let ae_final = full_loss(&self.autoencoder, &z, &z)?;

        let target_idx = if self.hyper.mb_only_targets {
            canonical_order(pool, |o| o == Origin::Mb)
        } else {
            idx
        };
        if target_idx.len() < 2 {
            return Err(Error::PoolTooSmall {
                size: target_idx.len(),
                required: 2,
            });
        }
        let zt = standardize(
            &rows_of(pool, &target_idx),
            &self.input_mean,
            &self.input_scale,
        );
        let u = self.encode_standardized(&zt)?;
        let (lm, ls) = mean_and_scale(&u);
        self.latent_mean = lm;
        self.latent_scale = ls;
        let un = standardize(&u, &self.latent_mean, &self.latent_scale);

        let ys: Vec<f64> = target_idx
            .iter()
            .map(|&i| pool.log_densities()[i])
            .collect();
        let n = ys.len() as f64;
        let ym = ys.iter().sum::<f64>() / n;
        let ysd = (ys.iter().map(|y| (y - ym) * (y - ym)).sum::<f64>() / n).sqrt();
        self.target_mean = ym;
        self.target_scale = if ysd > DEGENERATE_SCALE * ym.abs().max(1.0) {
            ysd
        } else {
            0.0
        };
        let div = if self.target_scale > 0.0 {
            self.target_scale
        } else {
            1.0
        };
        let yn = Matrix::column(&ys.iter().map(|y| (y - ym) / div).collect::<Vec<_>>());

        let reg_loss = train(
            &mut self.regressor,
            &un,
            &yn,
            TrainPlan {
                epochs: reg_epochs,
                lr: self.hyper.learning_rate,
                full_batch_limit: self.hyper.full_batch_limit,
                batch_size: self.hyper.batch_size,
                stage: "regressor",
                rng: &mut rng,
            },
        )?;
        let reg_final = full_loss(&self.regressor, &un, &yn)?;
        if !ae_final.is_finite() || !reg_final.is_finite() {
            return Err(Error::SurrogateTraining {
                stage: "final evaluation",
                epoch: ae_epochs.max(reg_epochs),
            });
        }
        let pred = self.predict_standardized_latent(&un)?;
        let mse = pred
            .iter()
            .zip(&ys)
            .map(|(p, y)| (p - y) * (p - y))
            .sum::<f64>()
            / n;
        self.fits += 1;
        self.report = FitReport {
            ae_loss,
            reg_loss,
            ae_final,
            reg_final,
            in_sample_rmse: mse.sqrt(),
            n_train: z.rows(),
            n_targets: ys.len(),
        };
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn hyper(&self) -> &SurrogateHyper {
        &self.hyper
    }

    pub fn report(&self) -> &FitReport {
        &self.report
    }

    /// Number of completed fits, the initial one included.
    pub fn fits(&self) -> u64 {
        self.fits
    }

    fn encode_standardized(&self, z: &Matrix) -> Result<Matrix> {
        let spec = self.autoencoder.spec.slice_layers(0..2)?;
        let range = self.autoencoder.spec.param_range(0..2);
        nn::forward(&spec, &self.autoencoder.params[range], z)
    }

    fn predict_standardized_latent(&self, un: &Matrix) -> Result<Vec<f64>> {
        let out = self.regressor.forward(un)?;
        Ok(out
            .as_slice()
            .iter()
            .map(|g| self.target_mean + self.target_scale * g)
            .collect())
    }

    fn check_input(&self, m: &Matrix) -> Result<()> {
        if m.cols() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "surrogate input".into(),
                expected: self.dim,
                found: m.cols(),
            });
        }
        Ok(())
    }

    /// Latent codes for each row of `thetas`.
    pub fn encode_many(&self, thetas: &Matrix) -> Result<Matrix> {
        self.check_input(thetas)?;
        self.encode_standardized(&standardize(thetas, &self.input_mean, &self.input_scale))
    }

    pub fn encode(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::from_vec(1, theta.len(), theta.to_vec())?;
        Ok(self.encode_many(&m)?.into_vec())
    }

    /// Parameter vectors reconstructed from latent codes.
    pub fn decode_many(&self, latent: &Matrix) -> Result<Matrix> {
        if latent.cols() != self.latent_dim {
            return Err(Error::DimensionMismatch {
                context: "surrogate latent".into(),
                expected: self.latent_dim,
                found: latent.cols(),
            });
        }
        let spec = self.autoencoder.spec.slice_layers(2..4)?;
        let range = self.autoencoder.spec.param_range(2..4);
        let mut out = nn::forward(&spec, &self.autoencoder.params[range], latent)?;
        for i in 0..out.rows() {
            for ((v, mu), s) in out
                .row_mut(i)
                .iter_mut()
                .zip(&self.input_mean)
                .zip(&self.input_scale)
            {
                *v = *v * s + mu;
            }
        }
        Ok(out)
    }

    pub fn reconstruct_many(&self, thetas: &Matrix) -> Result<Matrix> {
        self.decode_many(&self.encode_many(thetas)?)
    }

    pub fn predict_many(&self, thetas: &Matrix) -> Result<Vec<f64>> {
        let u = self.encode_many(thetas)?;
        let un = standardize(&u, &self.latent_mean, &self.latent_scale);
        let pred = self.predict_standardized_latent(&un)?;
        if let Some(row) = pred.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                context: "surrogate prediction".into(),
                iterate: Some(thetas.row(row).to_vec()),
            });
        }
        Ok(pred)
    }

    /// Emulated log-posterior at `theta`.
    pub fn predict_logpi(&self, theta: &[f64]) -> Result<f64> {
        let m = Matrix::from_vec(1, theta.len(), theta.to_vec())?;
        self.check_input(&m)?;
        Ok(self.predict_many(&m)?[0])
    }

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
                "{}: not a version {CHECKPOINT_VERSION} surrogate checkpoint",
                path.display()
            )));
        }
        Ok(bincode::deserialize_from(&mut r)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian_pool(n: usize, dim: usize, seed: u64) -> MemoryPool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool = MemoryPool::new(dim);
        for _ in 0..n {
            let t: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let l = -0.5 * t.iter().map(|v| v * v).sum::<f64>();
            pool.insert(&t, l, Origin::Mb).unwrap();
        }
        pool
    }

    fn small_hyper() -> SurrogateHyper {
        SurrogateHyper {
            ae_hidden: 16,
            reg_hidden: vec![16, 16],
            ae_epochs: 50,
            reg_epochs: 50,
            refit_ae_epochs: 10,
            refit_reg_epochs: 10,
            ..SurrogateHyper::default()
        }
    }

    #[test]
    fn rejects_small_pools() {
        let pool = gaussian_pool(5, 3, 0);
        assert!(matches!(
            Surrogate::fit(&pool, &small_hyper()),
            Err(Error::PoolTooSmall {
                size: 5,
                required: 10
            })
        ));
    }

    #[test]
    fn constant_pool_gives_constant_prediction() {
        let mut pool = MemoryPool::new(4);
        for _ in 0..20 {
            pool.insert(&[0.5, -1.0, 2.0, 0.0], -3.25, Origin::Mb)
                .unwrap();
        }
        let hyper = SurrogateHyper {
            ae_epochs: 400,
            ..small_hyper()
        };
        let s = Surrogate::fit(&pool, &hyper).unwrap();
        assert!(s.report().ae_final < 1e-4, "{}", s.report().ae_final);
        let p = s.predict_logpi(&[0.5, -1.0, 2.0, 0.0]).unwrap();
        assert!((p + 3.25).abs() < 1e-6);
    }

    #[test]
    fn linear_autoencoder_recovers_subspace() {
        // Points on a 2-D linear subspace of R^50; a linear 2-unit bottleneck
        // reproduces them up to optimization error.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let basis: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..50).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let mut pool = MemoryPool::new(50);
        for _ in 0..200 {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            let t: Vec<f64> = (0..50).map(|j| a * basis[0][j] + b * basis[1][j]).collect();
            pool.insert(&t, -a * a, Origin::Mb).unwrap();
        }
        let hyper = SurrogateHyper {
            latent_dim: Some(2),
            ae_hidden: 8,
            ae_activation: Activation::Identity,
            learning_rate: 1e-2,
            ae_epochs: 1500,
            reg_epochs: 10,
            ..small_hyper()
        };
        let s = Surrogate::fit(&pool, &hyper).unwrap();
        let x = Matrix::from_vec(pool.len(), 50, pool.thetas().to_vec()).unwrap();
        let r = s.reconstruct_many(&x).unwrap();
        let mut err = 0.0;
        let mut var = 0.0;
        for j in 0..50 {
            let col = x.column_values(j);
            let m = col.iter().sum::<f64>() / col.len() as f64;
            for i in 0..x.rows() {
                err += (r.get(i, j) - x.get(i, j)).powi(2);
                var += (x.get(i, j) - m).powi(2);
            }
        }
        assert!(
            err / var < 1e-3,
            "relative reconstruction error {}",
            err / var
        );
    }

    #[test]
    fn encode_is_deterministic_and_sized() {
        let pool = gaussian_pool(40, 6, 2);
        let s = Surrogate::fit(&pool, &small_hyper()).unwrap();
        let a = s.encode(pool.theta(0)).unwrap();
        let b = s.encode(pool.theta(0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert!(s.encode(&[0.0; 5]).is_err());
        assert!(s.predict_logpi(&[0.0; 7]).is_err());
    }

    #[test]
    fn fit_is_invariant_to_pool_order() {
        let pool = gaussian_pool(60, 4, 3);
        let mut rev = MemoryPool::new(4);
        for i in (0..pool.len()).rev() {
            let e = pool.entry(i);
            rev.insert(e.theta, e.log_density, e.origin).unwrap();
        }
        let a = Surrogate::fit(&pool, &small_hyper()).unwrap();
        let b = Surrogate::fit(&rev, &small_hyper()).unwrap();
        let q = [0.3, -0.2, 0.1, 0.9];
        assert_eq!(a.predict_logpi(&q).unwrap(), b.predict_logpi(&q).unwrap());
    }

    #[test]
    fn in_sample_rmse_matches_reported() {
        let pool = gaussian_pool(80, 3, 4);
        let s = Surrogate::fit(&pool, &small_hyper()).unwrap();
        let x = Matrix::from_vec(pool.len(), 3, pool.thetas().to_vec()).unwrap();
        let pred = s.predict_many(&x).unwrap();
        let rmse = (pred
            .iter()
            .zip(pool.log_densities())
            .map(|(p, l)| (p - l).powi(2))
            .sum::<f64>()
            / pool.len() as f64)
            .sqrt();
        assert!((rmse - s.report().in_sample_rmse).abs() < 1e-9 * rmse.max(1.0));
    }

    #[test]
    fn held_out_error_is_small_relative_to_spread() {
        let pool = gaussian_pool(500, 5, 5);
        let hyper = SurrogateHyper {
            full_batch_limit: 0,
            batch_size: 32,
            ..SurrogateHyper::default()
        };
        let s = Surrogate::fit(&pool, &hyper).unwrap();
        let test = gaussian_pool(400, 5, 6);
        let x = Matrix::from_vec(test.len(), 5, test.thetas().to_vec()).unwrap();
        let pred = s.predict_many(&x).unwrap();
        let mut errs: Vec<f64> = pred
            .iter()
            .zip(test.log_densities())
            .map(|(p, l)| (p - l).abs())
            .collect();
        errs.sort_by(f64::total_cmp);
        let mut ls = pool.log_densities().to_vec();
        ls.sort_by(f64::total_cmp);
        let iqr = ls[ls.len() * 3 / 4] - ls[ls.len() / 4];
        let med = errs[errs.len() / 2];
        assert!(med < 0.1 * iqr, "median error {med}, iqr {iqr}");
    }

    #[test]
    fn maybe_refit_only_on_multiples() {
        let mut pool = gaussian_pool(30, 3, 7);
        let mut s = Surrogate::fit(&pool, &small_hyper()).unwrap();
        let before = s.clone();
        pool.insert(&[0.1, 0.2, 0.3], -0.07, Origin::Mf).unwrap();
        assert!(!s.maybe_refit(&pool, 150, 100).unwrap());
        assert_eq!(s, before);
        assert!(s.maybe_refit(&pool, 200, 100).unwrap());
        assert_ne!(s, before);
        assert_eq!(s.fits(), 2);
        assert_eq!(s.report().n_train, 31);
    }

    #[test]
    fn mb_only_targets_skip_mf_entries() {
        let mut pool = gaussian_pool(30, 3, 8);
        for _ in 0..5 {
            pool.insert(&[0.0, 0.0, 0.0], 100.0, Origin::Mf).unwrap();
        }
        let hyper = SurrogateHyper {
            mb_only_targets: true,
            ..small_hyper()
        };
        let s = Surrogate::fit(&pool, &hyper).unwrap();
        assert_eq!(s.report().n_train, 35);
        assert_eq!(s.report().n_targets, 30);
    }

    #[test]
    fn affine_target_rescaling_preserves_predictions() {
        let pool = gaussian_pool(200, 4, 9);
        let mut scaled = MemoryPool::new(4);
        for e in pool.entries() {
            scaled
                .insert(e.theta, 3.0 * e.log_density - 7.0, e.origin)
                .unwrap();
        }
        let a = Surrogate::fit(&pool, &small_hyper()).unwrap();
        let b = Surrogate::fit(&scaled, &small_hyper()).unwrap();
        let test = gaussian_pool(100, 4, 10);
        let x = Matrix::from_vec(test.len(), 4, test.thetas().to_vec()).unwrap();
        let pa = a.predict_many(&x).unwrap();
        let pb: Vec<f64> = b
            .predict_many(&x)
            .unwrap()
            .iter()
            .map(|p| (p + 7.0) / 3.0)
            .collect();
        for (u, v) in pa.iter().zip(&pb) {
            assert!((u - v).abs() < 1e-8 * u.abs().max(1.0), "{u} vs {v}");
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let pool = gaussian_pool(30, 3, 11);
        let s = Surrogate::fit(&pool, &small_hyper()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("surrogate.bin");
        s.save(&path).unwrap();
        let back = Surrogate::load(&path).unwrap();
        assert_eq!(s, back);
        let q = [0.4, 0.4, -1.0];
        assert_eq!(
            s.predict_logpi(&q).unwrap(),
            back.predict_logpi(&q).unwrap()
        );
    }
}
