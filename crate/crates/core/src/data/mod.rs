//! Multivariate time-series datasets.

mod export;
mod normalize;
mod supervision;
mod synthetic;
mod ts;

pub use export::{parse_embedding_csv, write_embedding_csv, EmbeddingRow};
pub use normalize::{z_normalize, NormStats, Normalization};
pub use supervision::{apply_supervision, SplitSpec};
pub use synthetic::{make_synthetic, SyntheticSpec};
pub use ts::{parse_ts, parse_ts_file, serialize_ts};

use crate::error::{Result, SmateError};
use crate::tensor::Tensor;

/// `N` equal-shape samples (`T x M`) with class labels and a supervision mask.
///
/// True labels of hidden samples are only reachable through the
/// evaluation accessors on this type; training code receives a
/// [`TrainingView`], which exposes visible labels only.
#[derive(Clone, Debug, PartialEq)]
pub struct MtsDataset {
    name: String,
    samples: Vec<Tensor>,
    labels: Vec<usize>,
    label_set: Vec<String>,
    mask: Vec<bool>,
}

impl MtsDataset {
    /// Builds a fully labeled dataset; `labels[i]` indexes into `label_set`.
    pub fn new(
        name: impl Into<String>,
        samples: Vec<Tensor>,
        labels: Vec<usize>,
        label_set: Vec<String>,
    ) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| SmateError::Config("dataset has no samples".into()))?;
        if first.rank() != 2 {
            return Err(SmateError::dim("dataset", first.shape(), &[0, 0]));
        }
        if let Some(bad) = samples.iter().find(|s| s.shape() != first.shape()) {
            return Err(SmateError::dim("dataset", first.shape(), bad.shape()));
        }
        if labels.len() != samples.len() {
            return Err(SmateError::Config(format!(
                "{} labels for {} samples",
                labels.len(),
                samples.len()
            )));
        }
        if label_set.len() < 2 {
            return Err(SmateError::Config(format!(
                "need at least 2 classes, found {}",
                label_set.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= label_set.len()) {
            return Err(SmateError::Config(format!("label index {bad} out of range")));
        }
        let mask = vec![true; samples.len()];
        Ok(MtsDataset {
            name: name.into(),
            samples,
            labels,
            label_set,
            mask,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn series_length(&self) -> usize {
        self.samples[0].rows()
    }

    pub fn dims(&self) -> usize {
        self.samples[0].cols()
    }

    pub fn num_classes(&self) -> usize {
        self.label_set.len()
    }

    pub fn samples(&self) -> &[Tensor] {
        &self.samples
    }

    pub fn label_set(&self) -> &[String] {
        &self.label_set
    }

    pub fn supervision_mask(&self) -> &[bool] {
        &self.mask
    }

    /// Ground truth for evaluation, regardless of the mask.
    pub fn true_label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn true_labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label_name(&self, class: usize) -> &str {
        &self.label_set[class]
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.label_set.iter().position(|l| l == name)
    }

    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView { ds: self }
    }

    pub(crate) fn with_mask(mut self, mask: Vec<bool>) -> Self {
        debug_assert_eq!(mask.len(), self.samples.len());
        self.mask = mask;
        self
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub(crate) fn with_samples(mut self, samples: Vec<Tensor>) -> Self {
        debug_assert_eq!(samples.len(), self.samples.len());
        self.samples = samples;
        self
    }

    /// Subset in the given order, mask included.
    pub fn select(&self, indices: &[usize]) -> Result<MtsDataset> {
        if indices.is_empty() || indices.iter().any(|&i| i >= self.len()) {
            return Err(SmateError::Contract("select: bad index set".into()));
        }
        Ok(MtsDataset {
            name: self.name.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            label_set: self.label_set.clone(),
            mask: indices.iter().map(|&i| self.mask[i]).collect(),
        })
    }
}

/// What training is allowed to see: all samples, and labels only where the
/// supervision mask is set.
#[derive(Clone, Copy)]
pub struct TrainingView<'a> {
    ds: &'a MtsDataset,
}

impl<'a> TrainingView<'a> {
    pub fn len(&self) -> usize {
        self.ds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ds.is_empty()
    }

    pub fn samples(&self) -> &'a [Tensor] {
        &self.ds.samples
    }

    pub fn series_length(&self) -> usize {
        self.ds.series_length()
    }

    pub fn dims(&self) -> usize {
        self.ds.dims()
    }

    pub fn num_classes(&self) -> usize {
        self.ds.num_classes()
    }

    pub fn label_set(&self) -> &'a [String] {
        &self.ds.label_set
    }

    pub fn visible_label(&self, i: usize) -> Option<usize> {
        self.ds.mask[i].then(|| self.ds.labels[i])
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.ds.mask[i]).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.ds.mask[i]).collect()
    }

    /// Labeled samples per class.
    pub fn labeled_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for i in self.labeled_indices() {
            counts[self.ds.labels[i]] += 1;
        }
        counts
    }
}
