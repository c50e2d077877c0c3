//! The Gaussian field δ fed to the generator's Noise Net.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PerturbationMode {
    /// One field, reused for every slice and step.
    #[default]
    FixedUniversal,
    /// Fresh fields drawn from a seeded stream for every batch.
    ResampledPerBatch,
}

impl fmt::Display for PerturbationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerturbationMode::FixedUniversal => "fixed_universal",
            PerturbationMode::ResampledPerBatch => "resampled_per_batch",
        })
    }
}

impl FromStr for PerturbationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed_universal" => Ok(PerturbationMode::FixedUniversal),
            "resampled_per_batch" => Ok(PerturbationMode::ResampledPerBatch),
            other => Err(Error::Config(format!("unknown perturbation mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub field: Array2<f64>,
    pub sigma: f64,
    pub seed: u64,
    pub mode: PerturbationMode,
    /// Number of fields already drawn from the resampling stream.
    pub draws: u64,
}

fn gaussian_field(h: usize, w: usize, sigma: f64, seed: u64, stream: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    Array2::from_shape_simple_fn((h, w), || normal.sample(&mut rng))
}

/// I.i.d. `Normal(0, sigma²)` field, reproducible from `(h, w, sigma, seed)`.
pub fn sample_perturbation(h: usize, w: usize, sigma: f64, seed: u64) -> Result<Perturbation> {
    if h == 0 || w == 0 {
        return Err(Error::Invalid(format!("perturbation shape {h}x{w} is empty")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Invalid(format!("perturbation sigma {sigma} must be positive")));
    }
    Ok(Perturbation {
        field: gaussian_field(h, w, sigma, seed, 0),
        sigma,
        seed,
        mode: PerturbationMode::FixedUniversal,
        draws: 0,
    })
}

impl Perturbation {
    pub fn with_mode(mut self, mode: PerturbationMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn dim(&self) -> (usize, usize) {
        self.field.dim()
    }

    /// The fields for the next batch in compact form: a single shared plane in
    /// fixed mode, `batch_size` fresh planes otherwise.
    pub fn next_batch(&mut self, batch_size: usize) -> Tensor {
        let (h, w) = self.dim();
        match self.mode {
            PerturbationMode::FixedUniversal => {
                Tensor::from_planes([self.field.view()]).expect("field is 2D")
            }
            PerturbationMode::ResampledPerBatch => {
                let planes: Vec<Array2<f64>> = (0..batch_size)
                    .map(|_| {
                        self.draws += 1;
                        gaussian_field(h, w, self.sigma, self.seed, self.draws)
                    })
                    .collect();
                Tensor::from_planes(planes.iter().map(|p| p.view())).expect("fields are 2D")
            }
        }
    }
}

/// Per-sample fields for a batch; fixed mode replicates the stored field.
pub fn perturbation_for_batch(p: &mut Perturbation, batch_size: usize) -> Result<Vec<Array2<f64>>> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be at least 1".into()));
    }
    let t = p.next_batch(batch_size);
    Ok((0..batch_size)
        .map(|i| t.to_array2(if t.n() == 1 { 0 } else { i }))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_is_reproducible_and_gaussian() {
        let a = sample_perturbation(512, 512, 1.0, 3).unwrap();
        let b = sample_perturbation(512, 512, 1.0, 3).unwrap();
        assert_eq!(a.field, b.field);
        let n = a.field.len() as f64;
        let mean = a.field.sum() / n;
        let std = (a.field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((std - 1.0).abs() < 0.01, "{std}");
        assert!(sample_perturbation(64, 64, 0.0, 1).is_err());
        assert!(sample_perturbation(0, 64, 1.0, 1).is_err());
    }

    #[test]
    fn fixed_mode_replicates() {
        let mut p = sample_perturbation(16, 16, 1.0, 4).unwrap();
        let fields = perturbation_for_batch(&mut p, 16).unwrap();
        assert_eq!(fields.len(), 16);
        assert!(fields.iter().all(|f| *f == p.field));
        let one = perturbation_for_batch(&mut p, 1).unwrap();
        assert_eq!(one, vec![p.field.clone()]);
        assert_eq!(p.draws, 0);
    }

    #[test]
    fn resampled_mode_draws_fresh_fields() {
        let mut p = sample_perturbation(16, 16, 1.0, 4)
            .unwrap()
            .with_mode(PerturbationMode::ResampledPerBatch);
        let first = perturbation_for_batch(&mut p, 2).unwrap();
        assert_ne!(first[0], first[1]);
        let second = perturbation_for_batch(&mut p, 2).unwrap();
        assert_ne!(first[0], second[0]);
        // Stream is a pure function of (seed, mode).
        let mut q = sample_perturbation(16, 16, 1.0, 4)
            .unwrap()
            .with_mode(PerturbationMode::ResampledPerBatch);
        assert_eq!(perturbation_for_batch(&mut q, 2).unwrap(), first);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("fixed_universal".parse::<PerturbationMode>().unwrap(), PerturbationMode::FixedUniversal);
        assert_eq!(PerturbationMode::ResampledPerBatch.to_string(), "resampled_per_batch");
        assert!("other".parse::<PerturbationMode>().is_err());
    }
}
