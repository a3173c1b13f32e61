use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::MtsDataset;
use crate::error::{Result, SmateError};
use crate::tensor::Tensor;

/// Coupled-sinusoid generator.
///
/// Class `k` uses frequency `f_k = 2 + k` and per-variable phases
/// `phi_{k,j} = pi * j * (k + 1) / M`, so classes differ both in temporal
/// rate and in cross-variable phase structure. Each sample gets a common
/// phase shift drawn from `[-jitter, jitter]` (shared by all variables) and
/// i.i.d. Gaussian noise scaled by `noise`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples: usize,
    pub length: usize,
    pub dims: usize,
    pub seed: u64,
    pub noise: f64,
    pub jitter: f64,
}

impl SyntheticSpec {
    pub fn new(classes: usize, samples: usize, length: usize, dims: usize, seed: u64) -> Self {
        SyntheticSpec {
            classes,
            samples,
            length,
            dims,
            seed,
            noise: 0.05,
            jitter: 0.5,
        }
    }

    /// The same generator under an unrelated seed, for a test split.
    pub fn held_out(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.seed.wrapping_add(1_000_003),
            ..self.clone()
        }
    }

    pub fn frequency(&self, k: usize) -> f64 {
        2.0 + k as f64
    }

    pub fn phase(&self, k: usize, j: usize) -> f64 {
        PI * j as f64 * (k + 1) as f64 / self.dims as f64
    }
}

/// Samples are assigned to classes round-robin (`i % K`).
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<MtsDataset> {
    if spec.classes < 2 || spec.dims < 2 {
        return Err(SmateError::Config(format!(
            "synthetic data needs K >= 2 and M >= 2, got K={} M={}",
            spec.classes, spec.dims
        )));
    }
    if spec.samples == 0 || spec.length == 0 {
        return Err(SmateError::Config("synthetic data needs N, T > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (t_len, m) = (spec.length, spec.dims);
    let mut samples = Vec::with_capacity(spec.samples);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let k = i % spec.classes;
        let shift = if spec.jitter > 0.0 {
            rng.gen_range(-spec.jitter..=spec.jitter)
        } else {
            0.0
        };
        let f = spec.frequency(k);
        let mut data = Vec::with_capacity(t_len * m);
        for t in 0..t_len {
            for j in 0..m {
                let clean = (2.0 * PI * f * t as f64 / t_len as f64 + spec.phase(k, j) + shift).sin();
                let eps: f64 = rng.sample(StandardNormal);
                data.push(clean + spec.noise * eps);
            }
        }
        samples.push(Tensor::new(vec![t_len, m], data)?);
        labels.push(k);
    }
    let label_set = (0..spec.classes).map(|k| format!("c{k}")).collect();
    MtsDataset::new("synthetic", samples, labels, label_set)
}
