//! Synthetic data generator: planted sparse loading rows with small random
//! supports, optional dense confounder factors, and Gaussian noise. Ground
//! truth is retained so fits can be scored with the stability statistics.

use nalgebra::DMatrix;
use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::types::{DataMatrix, SimTruth};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    pub k_sparse: usize,
    pub k_dense: usize,
    /// Inclusive bounds for the per-row support size.
    pub cluster_min: usize,
    pub cluster_max: usize,
    pub noise_sd: f64,
    pub seed: u64,
}

impl SimConfig {
    /// Sparse-only benchmark: 10 sparse factors, 200 x 500.
    pub fn sim1(seed: u64) -> Self {
        SimConfig {
            n: 200,
            p: 500,
            k_sparse: 10,
            k_dense: 0,
            cluster_min: 10,
            cluster_max: 20,
            noise_sd: 1.0,
            seed,
        }
    }

    /// Sparse plus dense confounders: 10 sparse and 5 dense factors.
    pub fn sim2(seed: u64) -> Self {
        SimConfig { k_dense: 5, ..SimConfig::sim1(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.p < 2 {
            return Err(Error::Config("need n >= 2 and p >= 2".into()));
        }
        if self.cluster_min < 1 || self.cluster_min > self.cluster_max || self.cluster_max > self.p
        {
            return Err(Error::Config(format!(
                "need 1 <= cluster_min <= cluster_max <= p, got [{}, {}] with p={}",
                self.cluster_min, self.cluster_max, self.p
            )));
        }
        if self.k_sparse == 0 {
            return Err(Error::Config("need at least one sparse factor".into()));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Config("noise_sd must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Sparse loading rows: support size uniform on the inclusive cluster bounds,
/// support indices sampled without replacement, supported entries standard
/// normal. Supports may overlap across rows.
pub fn gen_sparse_loadings<R: Rng>(config: &SimConfig, rng: &mut R) -> (DMatrix<f64>, Vec<usize>) {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut lambda = DMatrix::zeros(config.k_sparse, config.p);
    let mut sizes = Vec::with_capacity(config.k_sparse);
    for k in 0..config.k_sparse {
        let size = rng.random_range(config.cluster_min..=config.cluster_max);
        sizes.push(size);
        for j in index_sample(rng, config.p, size) {
            lambda[(k, j)] = normal.sample(rng);
        }
    }
    (lambda, sizes)
}

/// Fully dense loading rows with i.i.d. standard normal entries.
pub fn gen_dense_loadings<R: Rng>(k_dense: usize, p: usize, rng: &mut R) -> DMatrix<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    DMatrix::from_fn(k_dense, p, |_, _| normal.sample(rng))
}

/// Generate one data set `Y = X Lambda + F Omega + eps` with retained truth.
pub fn gen_dataset(config: &SimConfig) -> Result<(DataMatrix, SimTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");

    let (lambda, support_sizes) = gen_sparse_loadings(config, &mut rng);
    let omega = gen_dense_loadings(config.k_dense, config.p, &mut rng);
    let x = DMatrix::from_fn(config.n, config.k_sparse, |_, _| normal.sample(&mut rng));
    let f = DMatrix::from_fn(config.n, config.k_dense, |_, _| normal.sample(&mut rng));
    let noise =
        DMatrix::from_fn(config.n, config.p, |_, _| normal.sample(&mut rng) * config.noise_sd);

    let mut y = &x * &lambda + &noise;
    if config.k_dense > 0 {
        y += &f * &omega;
    }
    let truth = SimTruth {
        x,
        lambda,
        f,
        omega,
        noise,
        noise_sd: config.noise_sd,
        support_sizes,
    };
    Ok((DataMatrix::new(y)?, truth))
}
