//! Episodic memory pool of `(theta, log density, origin)` entries with
//! running coordinatewise standardization and exact nearest-neighbour search.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to every coordinate std.
pub const STD_FLOOR: f64 = 1e-8;

const CHECKPOINT_MAGIC: &str = "nipa-pool";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    /// Exact log-posterior from an HMC step (or the seeding chain).
    Mb,
    /// Surrogate-predicted log-posterior.
    Mf,
}

impl std::fmt::Display for Origin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Origin::Mb => "MB",
            Origin::Mf => "MF",
        })
    }
}

/// Borrowed view of one pool entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoolEntry<'a> {
    pub theta: &'a [f64],
    pub log_density: f64,
    pub origin: Origin,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nearest {
    pub index: usize,
    pub d_star: f64,
    pub log_density: f64,
    pub origin: Origin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryPool {
    dim: usize,
    thetas: Vec<f64>,
    log_densities: Vec<f64>,
    origins: Vec<Origin>,
    mean: Vec<f64>,
    m2: Vec<f64>,
    std: Vec<f64>,
    inv_std: Vec<f64>,
}

impl MemoryPool {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            thetas: Vec::new(),
            log_densities: Vec::new(),
            origins: Vec::new(),
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            std: vec![STD_FLOOR; dim],
            inv_std: vec![1.0 / STD_FLOOR; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Population std per coordinate, floored at [`STD_FLOOR`].
    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn mean_std(&self) -> f64 {
        self.std.iter().sum::<f64>() / self.dim.max(1) as f64
    }

    pub fn theta(&self, i: usize) -> &[f64] {
        &self.thetas[i * self.dim..(i + 1) * self.dim]
    }

    pub fn entry(&self, i: usize) -> PoolEntry<'_> {
        PoolEntry {
            theta: self.theta(i),
            log_density: self.log_densities[i],
            origin: self.origins[i],
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = PoolEntry<'_>> + '_ {
        (0..self.len()).map(move |i| self.entry(i))
    }

    pub fn log_densities(&self) -> &[f64] {
        &self.log_densities
    }

    pub fn origins(&self) -> &[Origin] {
        &self.origins
    }

    /// Row-major `len x dim` buffer of stored parameter vectors.
    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    pub fn count(&self, origin: Origin) -> usize {
        self.origins.iter().filter(|&&o| o == origin).count()
    }

    /// Appends an entry and updates the running mean/std (Welford).
    pub fn insert(&mut self, theta: &[f64], log_density: f64, origin: Origin) -> Result<usize> {
        if theta.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "pool insert".into(),
                expected: self.dim,
                found: theta.len(),
            });
        }
        if !log_density.is_finite() || !theta.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "pool entry".into(),
                iterate: Some(theta.to_vec()),
            });
        }
        self.thetas.extend_from_slice(theta);
        self.log_densities.push(log_density);
        self.origins.push(origin);
        let n = self.len() as f64;
        for j in 0..self.dim {
            let x = theta[j];
            let delta = x - self.mean[j];
            self.mean[j] += delta / n;
            self.m2[j] += delta * (x - self.mean[j]);
            let s = (self.m2[j].max(0.0) / n).sqrt().max(STD_FLOOR);
            self.std[j] = s;
            self.inv_std[j] = 1.0 / s;
        }
        Ok(self.len() - 1)
    }

    /// Squared standardized distance between `query` and entry `i`, abandoning
    /// once the partial sum reaches `bound`.
    #[inline]
    fn dist_sq_bounded(&self, query: &[f64], i: usize, bound: f64) -> f64 {
        let row = self.theta(i);
        let mut acc = 0.0;
        let chunks = query
            .chunks(64)
            .zip(row.chunks(64))
            .zip(self.inv_std.chunks(64));
        for ((q, t), w) in chunks {
            for ((a, b), s) in q.iter().zip(t).zip(w) {
                let z = (a - b) * s;
                acc += z * z;
            }
            if acc >= bound {
                return acc;
            }
        }
        acc
    }

    /// Standardized Euclidean distance between `query` and entry `i` under the current stats.
    pub fn distance(&self, query: &[f64], i: usize) -> f64 {
        self.dist_sq_bounded(query, i, f64::INFINITY).sqrt()
    }

    /// Closest entry under the standardized distance; ties go to the lowest index.
    pub fn nearest(&self, query: &[f64]) -> Result<Nearest> {
        if self.is_empty() {
            return Err(Error::EmptyPool);
        }
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "pool query".into(),
                expected: self.dim,
                found: query.len(),
            });
        }
        let (index, best) = self.nearest_excluding(query, None);
        Ok(Nearest {
            index,
            d_star: best.sqrt(),
            log_density: self.log_densities[index],
            origin: self.origins[index],
        })
    }

    fn nearest_excluding(&self, query: &[f64], skip: Option<usize>) -> (usize, f64) {
        let mut best = f64::INFINITY;
        let mut index = usize::MAX;
        for i in 0..self.len() {
            if Some(i) == skip {
                continue;
            }
            let d = self.dist_sq_bounded(query, i, best);
            if d < best || index == usize::MAX {
                best = d;
                index = i;
            }
        }
        (index, best)
    }

    /// Distance from each pool member to its nearest other member. With more
    /// than `max_queries` entries, an evenly spaced subset of members is queried.
    pub fn nn_distances(&self, max_queries: usize) -> Vec<f64> {
        let n = self.len();
        if n < 2 {
            return Vec::new();
        }
        let queries: Vec<usize> = if n <= max_queries.max(1) {
            (0..n).collect()
        } else {
            let q = max_queries.max(1);
            (0..q).map(|k| k * n / q).collect()
        };
        queries
            .par_iter()
            .map(|&i| self.nearest_excluding(self.theta(i), Some(i)).1.sqrt())
            .collect()
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
                "{}: not a version {CHECKPOINT_VERSION} pool checkpoint",
                path.display()
            )));
        }
        let pool: Self = bincode::deserialize_from(&mut r)?;
        if pool.thetas.len() != pool.len() * pool.dim
            || pool.log_densities.len() != pool.len()
            || pool.mean.len() != pool.dim
            || pool.std.len() != pool.dim
        {
            return Err(Error::Serialization(format!(
                "{}: inconsistent pool checkpoint",
                path.display()
            )));
        }
        Ok(pool)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_pool(n: usize, dim: usize, seed: u64) -> MemoryPool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool = MemoryPool::new(dim);
        for i in 0..n {
            let scale = 1.0 + (i % 3) as f64;
            let theta: Vec<f64> = (0..dim)
                .map(|j| scale * rng.sample::<f64, _>(StandardNormal) + j as f64)
                .collect();
            let origin = if i % 2 == 0 { Origin::Mb } else { Origin::Mf };
            pool.insert(&theta, -(i as f64), origin).unwrap();
        }
        pool
    }

    fn batch_stats(pool: &MemoryPool) -> (Vec<f64>, Vec<f64>) {
        let n = pool.len() as f64;
        let d = pool.dim();
        let mut mean = vec![0.0; d];
        for i in 0..pool.len() {
            for j in 0..d {
                mean[j] += pool.theta(i)[j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for i in 0..pool.len() {
            for j in 0..d {
                var[j] += (pool.theta(i)[j] - mean[j]).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        (mean, std)
    }

    /// Exhaustive scan that standardizes both points explicitly.
    fn scan_oracle(pool: &MemoryPool, query: &[f64]) -> (usize, f64) {
        let (m, s) = batch_stats(pool);
        let mut best = (usize::MAX, f64::INFINITY);
        for i in 0..pool.len() {
            let mut acc = 0.0;
            for j in 0..pool.dim() {
                let a = (query[j] - m[j]) / s[j];
                let b = (pool.theta(i)[j] - m[j]) / s[j];
                acc += (a - b) * (a - b);
            }
            let d = acc.sqrt();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    #[test]
    fn single_entry_stats() {
        let mut pool = MemoryPool::new(3);
        pool.insert(&[1.0, -2.0, 0.5], -1.0, Origin::Mb).unwrap();
        assert_eq!(pool.mean(), &[1.0, -2.0, 0.5]);
        assert_eq!(pool.std(), &[STD_FLOOR; 3]);
    }

    #[test]
    fn two_entry_population_std() {
        let mut pool = MemoryPool::new(1);
        pool.insert(&[0.0], 0.0, Origin::Mb).unwrap();
        pool.insert(&[2.0], 0.0, Origin::Mb).unwrap();
        assert_eq!(pool.mean(), &[1.0]);
        assert_eq!(pool.std(), &[1.0]);
    }

    #[test]
    fn incremental_stats_match_batch() {
        let pool = random_pool(1000, 6, 1);
        let (m, s) = batch_stats(&pool);
        for j in 0..6 {
            assert!((pool.mean()[j] - m[j]).abs() < 1e-10);
            assert!((pool.std()[j] - s[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_non_finite_entries() {
        let mut pool = MemoryPool::new(2);
        assert!(pool.insert(&[f64::NAN, 0.0], 0.0, Origin::Mb).is_err());
        assert!(pool.insert(&[0.0, 0.0], f64::INFINITY, Origin::Mb).is_err());
        assert!(pool.insert(&[0.0], 0.0, Origin::Mb).is_err());
        assert!(pool.is_empty());
        assert!(matches!(pool.nearest(&[0.0, 0.0]), Err(Error::EmptyPool)));
    }

    #[test]
    fn exact_member_has_zero_distance() {
        let pool = random_pool(30, 4, 2);
        let hit = pool.nearest(pool.theta(17)).unwrap();
        assert_eq!(hit.index, 17);
        assert_eq!(hit.d_star, 0.0);
        assert_eq!(hit.log_density, -17.0);
        assert_eq!(hit.origin, Origin::Mf);
    }

    #[test]
    fn proximity_survives_standardization() {
        let mut pool = MemoryPool::new(2);
        pool.insert(&[0.0, 0.0], 0.0, Origin::Mb).unwrap();
        pool.insert(&[10.0, 0.0], 0.0, Origin::Mb).unwrap();
        assert_eq!(pool.nearest(&[1.0, 0.0]).unwrap().index, 0);
    }

    #[test]
    fn nearest_matches_scan_oracle() {
        let pool = random_pool(200, 7, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let q: Vec<f64> = (0..7)
                .map(|j| 2.0 * rng.sample::<f64, _>(StandardNormal) + j as f64)
                .collect();
            let got = pool.nearest(&q).unwrap();
            let (idx, d) = scan_oracle(&pool, &q);
            assert_eq!(got.index, idx);
            assert!((got.d_star - d).abs() < 1e-12 * d.max(1.0));
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let mut pool = MemoryPool::new(1);
        pool.insert(&[-1.0], 0.0, Origin::Mb).unwrap();
        pool.insert(&[1.0], 1.0, Origin::Mf).unwrap();
        pool.insert(&[-1.0], 2.0, Origin::Mf).unwrap();
        assert_eq!(pool.nearest(&[0.0]).unwrap().index, 0);
        assert_eq!(pool.nearest(&[-1.0]).unwrap().index, 0);
    }

    #[test]
    fn shift_invariance() {
        let pool = random_pool(40, 5, 5);
        let mut shifted = MemoryPool::new(5);
        let c = 123.25;
        for e in pool.entries() {
            let t: Vec<f64> = e.theta.iter().map(|v| v + c).collect();
            shifted.insert(&t, e.log_density, e.origin).unwrap();
        }
        let q: Vec<f64> = pool.theta(3).iter().map(|v| v * 0.9 + 0.1).collect();
        let qs: Vec<f64> = q.iter().map(|v| v + c).collect();
        for i in 0..pool.len() {
            let a = pool.distance(&q, i);
            let b = shifted.distance(&qs, i);
            assert!((a - b).abs() < 1e-10 * a.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn nn_distances_exclude_self() {
        let mut pool = MemoryPool::new(1);
        for x in [0.0, 1.0, 3.0, 7.0] {
            pool.insert(&[x], 0.0, Origin::Mb).unwrap();
        }
        let s = pool.std()[0];
        let d = pool.nn_distances(100);
        let expect = [1.0, 1.0, 2.0, 4.0].map(|v| v / s);
        for (a, b) in d.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(pool.nn_distances(2).len(), 2);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let pool = random_pool(25, 4, 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.bin");
        pool.save(&path).unwrap();
        let back = MemoryPool::load(&path).unwrap();
        assert_eq!(pool, back);
        std::fs::write(&path, b"garbage").unwrap();
        assert!(MemoryPool::load(&path).is_err());
    }

    proptest! {
        #[test]
        fn nearest_is_order_invariant_without_ties(
            seed in 0u64..1000,
            n in 2usize..30,
        ) {
            let pool = random_pool(n, 3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let q: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let hit = pool.nearest(&q).unwrap();
            let mut rev = MemoryPool::new(3);
            for i in (0..n).rev() {
                let e = pool.entry(i);
                rev.insert(e.theta, e.log_density, e.origin).unwrap();
            }
            let other = rev.nearest(&q).unwrap();
            prop_assert_eq!(n - 1 - other.index, hit.index);
            prop_assert!((other.d_star - hit.d_star).abs() < 1e-10 * hit.d_star.max(1.0));
        }
    }
}
