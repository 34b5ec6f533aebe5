use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::dataset::{EmbeddingDataset, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub center_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 30,
            dim: 64,
            samples_per_class: 200,
            center_scale: 1.0,
            noise_sigma: 0.35,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn generate(&self) -> Result<EmbeddingDataset> {
        synth_gaussian(
            self.num_classes,
            self.dim,
            self.samples_per_class,
            self.center_scale,
            self.noise_sigma,
            self.seed,
        )
    }
}

/// Isotropic Gaussian clusters around centers drawn uniformly on the
/// sphere of radius `center_scale`. Class ids are `0..num_classes`.
pub fn synth_gaussian(
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
    center_scale: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<EmbeddingDataset> {
    synth_with_centers(num_classes, dim, samples_per_class, center_scale, noise_sigma, seed)
        .map(|(_, dataset)| dataset)
}

/// Same as [`synth_gaussian`], also returning the drawn class centers.
pub fn synth_with_centers(
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
    center_scale: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, EmbeddingDataset)> {
    if dim < 2 {
        return Err(Error::Config(format!("synthetic dim must be at least 2, got {dim}")));
    }
    if num_classes == 0 || samples_per_class == 0 {
        return Err(Error::Config("class and sample counts must be positive".into()));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Config(format!("noise_sigma must be a finite value >= 0, got {noise_sigma}")));
    }
    if !(center_scale > 0.0 && center_scale.is_finite()) {
        return Err(Error::Config(format!("center_scale must be positive, got {center_scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.iter().map(|x| center_scale * x / norm).collect();
            }
        })
        .collect();
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut dataset = EmbeddingDataset::new(dim, Split::Train);
    let mut v = vec![0.0; dim];
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..samples_per_class {
            for (x, c) in v.iter_mut().zip(center) {
                *x = c + if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            }
            dataset.push(class as u32, &v)?;
        }
    }
    Ok((centers, dataset))
}
