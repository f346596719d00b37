use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};

/// Class-conditional blob images: each class has a fixed random pattern
/// (piecewise constant on a coarse grid) and every sample adds Gaussian
/// pixel noise, clamped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticBlobConfig {
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Pattern cells per side.
    pub grid: usize,
    /// Weight of the class pattern against a pattern shared by all classes;
    /// lower values make classes harder to tell apart.
    pub class_weight: f64,
    pub noise_std: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticBlobConfig {
    fn default() -> Self {
        SyntheticBlobConfig {
            num_classes: 10,
            image_size: 32,
            channels: 3,
            grid: 4,
            class_weight: 1.0,
            noise_std: 0.1,
            train_per_class: 50,
            test_per_class: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl SyntheticBlobConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}.{k}");
        for (k, v) in [
            ("num_classes", self.num_classes),
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("grid", self.grid),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
        ] {
            if v == 0 {
                return Err(Error::config(key(k), "must be at least 1"));
            }
        }
        if self.grid > self.image_size {
            return Err(Error::config(key("grid"), "larger than image_size"));
        }
        if !(0.0..=1.0).contains(&self.class_weight) {
            return Err(Error::config(key("class_weight"), "must lie in [0, 1]"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config(key("noise_std"), "must be finite and non-negative"));
        }
        Ok(())
    }

    fn pattern(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let cells: Vec<f64> = (0..self.channels * self.grid * self.grid)
            .map(|_| rng.random::<f64>())
            .collect();
        let s = self.image_size;
        let mut out = Vec::with_capacity(self.channels * s * s);
        for c in 0..self.channels {
            for y in 0..s {
                for x in 0..s {
                    let (gy, gx) = (y * self.grid / s, x * self.grid / s);
                    out.push(cells[(c * self.grid + gy) * self.grid + gx]);
                }
            }
        }
        out
    }
}

/// Generates the training or test split. Patterns depend only on the seed,
/// so both splits share them; the noise streams differ.
pub fn gen_synthetic_split(config: &SyntheticBlobConfig, split: Split) -> Result<LabeledDataset> {
    config.validate("dataset")?;
    let mut prng = ChaCha8Rng::seed_from_u64(config.seed);
    let shared = config.pattern(&mut prng);
    let w = config.class_weight;
    let patterns: Vec<Vec<f64>> = (0..config.num_classes)
        .map(|_| {
            config
                .pattern(&mut prng)
                .iter()
                .zip(&shared)
                .map(|(p, s)| w * p + (1.0 - w) * s)
                .collect()
        })
        .collect();

    let (per_class, stream) = match split {
        Split::Train => (config.train_per_class, 1),
        Split::Test => (config.test_per_class, 2),
    };
    let mut nrng = ChaCha8Rng::seed_from_u64(config.seed);
    nrng.set_stream(stream);
    let noise = (config.noise_std > 0.0).then(|| Normal::new(0.0, config.noise_std).expect("valid std"));

    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (class, pat) in patterns.iter().enumerate() {
        for _ in 0..per_class {
            images.extend(pat.iter().map(|&p| {
                let v = match &noise {
                    Some(n) => p + n.sample(&mut nrng),
                    None => p,
                };
                v.clamp(0.0, 1.0) as f32
            }));
            labels.push(class);
        }
    }
    let names = (0..config.num_classes).map(|c| format!("blob_{c}")).collect();
    let s = config.image_size;
    LabeledDataset::new(config.channels, s, s, images, labels, names)
}

/// The training split.
pub fn gen_synthetic(config: &SyntheticBlobConfig) -> Result<LabeledDataset> {
    gen_synthetic_split(config, Split::Train)
}
