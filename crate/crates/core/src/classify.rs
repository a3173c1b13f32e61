//! Classification on the embedding space and evaluation reports.

use serde::{Deserialize, Serialize};

use crate::data::MtsDataset;
use crate::error::{Result, SmateError};
use crate::model::TrainedModel;
use crate::regularizer::{class_scores, embedding_distance, CentroidSet};
use crate::tensor::Tensor;

/// Highest-scoring class; ties go to the lowest class index.
pub fn nearest_centroid_predict(h: &Tensor, cs: &CentroidSet) -> Result<usize> {
    if cs.k() < 2 {
        return Err(SmateError::Contract(format!("need at least 2 centroids, got {}", cs.k())));
    }
    Ok(class_scores(h, cs)?.argmax())
}

/// Majority vote among the `k` nearest reference embeddings.
///
/// Ties between classes go to the smallest mean distance among the tied
/// classes, then to the lowest class index. Equal distances are ordered by
/// reference index.
pub fn knn_predict(h: &Tensor, reference: &[Tensor], labels: &[usize], k: usize) -> Result<usize> {
    if reference.is_empty() {
        return Err(SmateError::Contract("kNN reference set is empty".into()));
    }
    if reference.len() != labels.len() {
        return Err(SmateError::Contract(format!(
            "{} reference embeddings, {} labels",
            reference.len(),
            labels.len()
        )));
    }
    if k == 0 || k > reference.len() {
        return Err(SmateError::Contract(format!(
            "k = {k} with {} reference embeddings",
            reference.len()
        )));
    }
    let mut dist: Vec<(f64, usize)> = reference
        .iter()
        .enumerate()
        .map(|(i, r)| embedding_distance(h, r).map(|d| (d, i)))
        .collect::<Result<_>>()?;
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut votes = vec![0usize; classes];
    let mut dsum = vec![0.0; classes];
    for &(d, i) in &dist[..k] {
        votes[labels[i]] += 1;
        dsum[labels[i]] += d;
    }
    let mut best = None::<(usize, f64, usize)>;
    for c in 0..classes {
        if votes[c] == 0 {
            continue;
        }
        let mean = dsum[c] / votes[c] as f64;
        let better = match best {
            None => true,
            Some((v, m, _)) => votes[c] > v || (votes[c] == v && mean < m),
        };
        if better {
            best = Some((votes[c], mean, c));
        }
    }
    Ok(best.expect("k >= 1").2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Centroid,
    Knn { k: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub n_test: usize,
    pub label_set: Vec<String>,
    /// `None` for classes absent from the test set.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Rows are true classes, columns predictions. When some test labels are
    /// not in `label_set`, one extra final row collects them.
    pub confusion: Vec<Vec<usize>>,
    pub unknown_labels: Vec<String>,
}

impl EvalReport {
    /// `truth[i] = None` marks a test label outside the label set; such a
    /// sample always counts as misclassified.
    pub fn from_predictions(
        truth: &[Option<usize>],
        predicted: &[usize],
        label_set: &[String],
        unknown_labels: Vec<String>,
    ) -> Result<Self> {
        if truth.len() != predicted.len() || truth.is_empty() {
            return Err(SmateError::Contract(format!(
                "{} labels for {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let k = label_set.len();
        if let Some(&bad) = predicted.iter().find(|&&p| p >= k) {
            return Err(SmateError::Contract(format!("prediction {bad} outside {k} classes")));
        }
        let has_unknown = truth.iter().any(Option::is_none);
        let mut confusion = vec![vec![0usize; k]; k + usize::from(has_unknown)];
        for (t, &p) in truth.iter().zip(predicted) {
            confusion[t.unwrap_or(k)][p] += 1;
        }
        let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
        let per_class_accuracy = (0..k)
            .map(|c| {
                let n: usize = confusion[c].iter().sum();
                (n > 0).then(|| confusion[c][c] as f64 / n as f64)
            })
            .collect();
        Ok(EvalReport {
            accuracy: correct as f64 / truth.len() as f64,
            n_test: truth.len(),
            label_set: label_set.to_vec(),
            per_class_accuracy,
            confusion,
            unknown_labels,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Predictions for every sample of `ds`, as indices into `tm.label_set`.
///
/// `reference` supplies the kNN neighbours (visible labels only).
pub fn predict(
    tm: &TrainedModel,
    ds: &MtsDataset,
    method: Method,
    reference: Option<&MtsDataset>,
) -> Result<Vec<usize>> {
    check_shape(tm, ds)?;
    let embeddings = tm.embed(ds)?;
    match method {
        Method::Centroid => embeddings
            .iter()
            .map(|h| nearest_centroid_predict(h, &tm.centroids))
            .collect(),
        Method::Knn { k } => {
            let reference = reference
                .ok_or_else(|| SmateError::Contract("kNN needs a reference set".into()))?;
            check_shape(tm, reference)?;
            let view = reference.training_view();
            let idx = view.labeled_indices();
            let all = tm.embed(reference)?;
            let ref_emb: Vec<Tensor> = idx.iter().map(|&i| all[i].clone()).collect();
            let ref_labels = idx
                .iter()
                .map(|&i| {
                    let name = reference.label_name(view.visible_label(i).expect("labeled"));
                    class_of(tm, name).ok_or_else(|| {
                        SmateError::Config(format!("reference label \"{name}\" unknown to the model"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            embeddings
                .iter()
                .map(|h| knn_predict(h, &ref_emb, &ref_labels, k))
                .collect()
        }
    }
}

fn class_of(tm: &TrainedModel, name: &str) -> Option<usize> {
    tm.label_set.iter().position(|l| l == name)
}

fn check_shape(tm: &TrainedModel, ds: &MtsDataset) -> Result<()> {
    let c = &tm.model.config;
    if ds.series_length() != c.series_length || ds.dims() != c.dims {
        return Err(SmateError::Config(format!(
            "model expects series of shape {}x{}, dataset \"{}\" has {}x{}",
            c.series_length,
            c.dims,
            ds.name(),
            ds.series_length(),
            ds.dims()
        )));
    }
    Ok(())
}

/// Embeds and classifies every sample of `test`, scoring against its true
/// labels matched to the model's label set by name.
pub fn evaluate(
    tm: &TrainedModel,
    test: &MtsDataset,
    method: Method,
    reference: Option<&MtsDataset>,
) -> Result<(EvalReport, Vec<usize>)> {
    let predicted = predict(tm, test, method, reference)?;
    let mut unknown = Vec::new();
    let truth: Vec<Option<usize>> = (0..test.len())
        .map(|i| {
            let name = test.label_name(test.true_label(i));
            let c = class_of(tm, name);
            if c.is_none() && !unknown.iter().any(|u| u == name) {
                unknown.push(name.to_string());
            }
            c
        })
        .collect();
    if !unknown.is_empty() {
        log::warn!("test labels outside the training label set: {unknown:?}");
    }
    let report = EvalReport::from_predictions(&truth, &predicted, &tm.label_set, unknown)?;
    Ok((report, predicted))
}
