use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Result, SmateError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BatchPolicy {
    Full,
    /// Batches of roughly `size` samples; labeled samples of each class are
    /// dealt round-robin so early batches see every class.
    Stratified { size: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmateConfig {
    pub series_length: usize,
    pub dims: usize,
    pub gru_dim: usize,
    pub conv_filters: usize,
    pub conv_window: usize,
    pub smb_window: usize,
    pub pool: usize,
    pub embed_dim: usize,
    /// Width of the first head layer.
    pub head_dim: usize,
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub batch: BatchPolicy,
    pub use_smb: bool,
    pub normalization: Normalization,
    /// Unlabeled samples whose best score is below this are not propagated.
    pub min_score: Option<f64>,
}

/// Pool size giving an embedding length of about 8.
pub fn default_pool(series_length: usize) -> usize {
    series_length.div_ceil(8).max(1)
}

impl SmateConfig {
    pub fn new(series_length: usize, dims: usize) -> Self {
        SmateConfig {
            series_length,
            dims,
            gru_dim: 64,
            conv_filters: 64,
            conv_window: 3,
            smb_window: 3,
            pool: default_pool(series_length),
            embed_dim: 64,
            head_dim: 64,
            lambda: 1.0,
            lr: 1e-3,
            epochs: 300,
            seed: 0,
            batch: BatchPolicy::Full,
            use_smb: true,
            normalization: Normalization::PerVariableGlobal,
            min_score: None,
        }
    }

    /// `L = ceil(T / P)`.
    pub fn embedding_length(&self) -> usize {
        self.series_length.div_ceil(self.pool)
    }

    pub fn embedding_width(&self) -> usize {
        self.embedding_length() * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("series_length", self.series_length),
            ("dims", self.dims),
            ("gru_dim", self.gru_dim),
            ("conv_filters", self.conv_filters),
            ("conv_window", self.conv_window),
            ("smb_window", self.smb_window),
            ("pool", self.pool),
            ("embed_dim", self.embed_dim),
            ("head_dim", self.head_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(SmateError::Config(format!("{name} must be at least 1")));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(SmateError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(SmateError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if let BatchPolicy::Stratified { size: 0 } = self.batch {
            return Err(SmateError::Config("batch size must be at least 1".into()));
        }
        if let Some(m) = self.min_score {
            if !(0.0..=1.0).contains(&m) {
                return Err(SmateError::Config(format!("min_score {m} outside [0, 1]")));
            }
        }
        Ok(())
    }
}
