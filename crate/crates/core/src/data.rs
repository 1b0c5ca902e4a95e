//! Built-in synthetic datasets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::nn::{Dataset, Targets, Tensor};

/// Two isotropic unit-variance Gaussian classes in 2-D with centers at
/// `±(sep/2)·(1,1)/√2`, so the centers are `sep` apart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobsSpec {
    pub train: usize,
    pub test: usize,
    pub separation: f64,
}

impl Default for BlobsSpec {
    fn default() -> Self {
        Self { train: 5000, test: 1000, separation: 5.0 }
    }
}

impl BlobsSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train == 0 || self.test == 0 {
            return config("blobs splits must be nonempty");
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return config("blobs separation must be finite and nonnegative");
        }
        Ok(())
    }

    /// Accuracy of the optimal linear rule, `Φ(sep/2)`.
    pub fn bayes_accuracy(&self) -> f64 {
        0.5 * statrs::function::erf::erfc(-self.separation / 2.0 / std::f64::consts::SQRT_2)
    }

    /// `(train, test)` splits. Labels alternate so both splits are balanced.
    pub fn generate(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train = blobs(self.train, self.separation, &mut rng)?;
        let test = blobs(self.test, self.separation, &mut rng)?;
        Ok((train, test))
    }
}

fn blobs(n: usize, sep: f64, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let offset = sep / 2.0 / std::f64::consts::SQRT_2;
    let mut x = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let c = if label == 1 { offset } else { -offset };
        for _ in 0..2 {
            let z: f64 = StandardNormal.sample(rng);
            x.push(c + z);
        }
        labels.push(label);
    }
    Dataset::new(Tensor::new(vec![n, 2], x)?, Targets::Labels(labels))
}
