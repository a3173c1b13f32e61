use serde::{Deserialize, Serialize};

use super::MtsDataset;
use crate::error::{Result, SmateError};

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    PerVariableGlobal,
    None,
}

/// Per-variable mean and standard deviation over every sample and step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(ds: &MtsDataset) -> Self {
        let m = ds.dims();
        let mut sum = vec![0.0; m];
        let mut count = 0usize;
        for s in ds.samples() {
            for t in 0..s.rows() {
                for (acc, v) in sum.iter_mut().zip(s.row(t)) {
                    *acc += v;
                }
            }
            count += s.rows();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; m];
        for s in ds.samples() {
            for t in 0..s.rows() {
                for ((acc, v), mu) in sq.iter_mut().zip(s.row(t)).zip(&mean) {
                    *acc += (v - mu) * (v - mu);
                }
            }
        }
        let std = sq
            .iter()
            .map(|s| (s / count as f64).sqrt().max(STD_FLOOR))
            .collect();
        NormStats { mean, std }
    }

    pub fn identity(m: usize) -> Self {
        NormStats {
            mean: vec![0.0; m],
            std: vec![1.0; m],
        }
    }

    pub fn apply(&self, ds: &MtsDataset) -> Result<MtsDataset> {
        if ds.dims() != self.mean.len() {
            return Err(SmateError::Config(format!(
                "normalization fitted on {} variables, dataset has {}",
                self.mean.len(),
                ds.dims()
            )));
        }
        let m = ds.dims();
        let samples = ds
            .samples()
            .iter()
            .map(|s| {
                let mut out = s.clone();
                for (i, v) in out.data_mut().iter_mut().enumerate() {
                    let j = i % m;
                    *v = (*v - self.mean[j]) / self.std[j];
                }
                out
            })
            .collect();
        Ok(ds.clone().with_samples(samples))
    }
}

/// Normalizes `ds` with statistics fitted on `ds` itself.
pub fn z_normalize(ds: &MtsDataset, mode: Normalization) -> Result<(MtsDataset, NormStats)> {
    match mode {
        Normalization::None => Ok((ds.clone(), NormStats::identity(ds.dims()))),
        Normalization::PerVariableGlobal => {
            let stats = NormStats::fit(ds);
            Ok((stats.apply(ds)?, stats))
        }
    }
}
