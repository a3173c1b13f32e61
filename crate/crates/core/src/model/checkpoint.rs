//! JSON checkpoints: config, every named parameter as nested arrays,
//! batch-norm running statistics, normalization statistics, label set and
//! class centroids.
//!
//! Floats are written in shortest round-trip form, so save/load is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{train, EpochLog, SmateConfig, SmateModel};
use crate::data::{z_normalize, MtsDataset, NormStats};
use crate::error::{Result, SmateError};
use crate::regularizer::{CentroidSet, CentroidStep};
use crate::tensor::Tensor;

const FORMAT: &str = "smate-checkpoint";
const VERSION: u32 = 1;

/// A trained encoder together with everything needed to embed and classify
/// new data.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: SmateModel,
    pub norm: NormStats,
    pub label_set: Vec<String>,
    pub centroids: CentroidSet,
}

impl TrainedModel {
    /// Normalizes `ds`, builds a model from `config` and trains it.
    pub fn fit(ds: &MtsDataset, config: SmateConfig) -> Result<(TrainedModel, Vec<EpochLog>)> {
        let (normed, norm) = z_normalize(ds, config.normalization)?;
        let mut model = SmateModel::new(config)?;
        let run = train(&mut model, &normed)?;
        Ok((
            TrainedModel {
                model,
                norm,
                label_set: ds.label_set().to_vec(),
                centroids: run.centroids,
            },
            run.log,
        ))
    }

    /// Inference-mode `L x D` embeddings of raw (unnormalized) samples.
    pub fn embed(&self, ds: &MtsDataset) -> Result<Vec<Tensor>> {
        let normed = self.norm.apply(ds)?;
        self.model.encode_many(normed.samples())
    }
}

#[derive(Serialize, Deserialize)]
struct TensorDoc {
    shape: Vec<usize>,
    values: Value,
}

#[derive(Serialize, Deserialize)]
struct ParamDoc {
    name: String,
    #[serde(flatten)]
    tensor: TensorDoc,
}

#[derive(Serialize, Deserialize)]
struct BnDoc {
    layer: String,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CentroidDoc {
    step: CentroidStep,
    labeled_counts: Vec<usize>,
    propagated_counts: Vec<usize>,
    centroids: Vec<TensorDoc>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    version: u32,
    config: SmateConfig,
    label_set: Vec<String>,
    normalization: NormStats,
    parameters: Vec<ParamDoc>,
    batch_norm: Vec<BnDoc>,
    centroids: CentroidDoc,
}

fn nest(shape: &[usize], data: &[f64]) -> Value {
    match shape {
        [] => Value::from(data[0]),
        [_] => Value::from(data.to_vec()),
        [n, rest @ ..] => {
            let stride = data.len() / n;
            Value::Array(data.chunks(stride).map(|c| nest(rest, c)).collect())
        }
    }
}

fn flatten_nested(v: &Value, shape: &[usize], out: &mut Vec<f64>) -> Result<()> {
    let bad = || SmateError::Checkpoint(format!("array does not match shape {shape:?}"));
    match shape {
        [] => out.push(v.as_f64().ok_or_else(bad)?),
        [n, rest @ ..] => {
            let items = v.as_array().filter(|a| a.len() == *n).ok_or_else(bad)?;
            for item in items {
                flatten_nested(item, rest, out)?;
            }
        }
    }
    Ok(())
}

impl TensorDoc {
    fn from_tensor(t: &Tensor) -> Self {
        TensorDoc {
            shape: t.shape().to_vec(),
            values: nest(t.shape(), t.data()),
        }
    }

    fn to_tensor(&self) -> Result<Tensor> {
        let mut data = Vec::new();
        flatten_nested(&self.values, &self.shape, &mut data)?;
        Tensor::new(self.shape.clone(), data).map_err(|e| SmateError::Checkpoint(e.to_string()))
    }
}

pub fn checkpoint_to_string(tm: &TrainedModel) -> Result<String> {
    let m = &tm.model;
    let doc = CheckpointDoc {
        format: FORMAT.into(),
        version: VERSION,
        config: m.config.clone(),
        label_set: tm.label_set.clone(),
        normalization: tm.norm.clone(),
        parameters: m
            .store
            .iter()
            .map(|(_, p)| ParamDoc {
                name: p.name.clone(),
                tensor: TensorDoc::from_tensor(&p.value),
            })
            .collect(),
        batch_norm: m
            .convs
            .iter()
            .enumerate()
            .map(|(i, c)| BnDoc {
                layer: format!("spatial.{i}"),
                running_mean: c.bn_running_mean.data().to_vec(),
                running_var: c.bn_running_var.data().to_vec(),
            })
            .collect(),
        centroids: CentroidDoc {
            step: tm.centroids.step,
            labeled_counts: tm.centroids.labeled_counts.clone(),
            propagated_counts: tm.centroids.propagated_counts.clone(),
            centroids: tm.centroids.centroids.iter().map(TensorDoc::from_tensor).collect(),
        },
    };
    serde_json::to_string_pretty(&doc).map_err(|e| SmateError::Checkpoint(e.to_string()))
}

pub fn checkpoint_from_str(text: &str) -> Result<TrainedModel> {
    let doc: CheckpointDoc =
        serde_json::from_str(text).map_err(|e| SmateError::Checkpoint(e.to_string()))?;
    if doc.format != FORMAT || doc.version != VERSION {
        return Err(SmateError::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            doc.format, doc.version
        )));
    }
    let mut model = SmateModel::new(doc.config)?;
    if doc.parameters.len() != model.store.len() {
        return Err(SmateError::Checkpoint(format!(
            "expected {} parameters, found {}",
            model.store.len(),
            doc.parameters.len()
        )));
    }
    for p in &doc.parameters {
        let id = model
            .store
            .by_name(&p.name)
            .ok_or_else(|| SmateError::Checkpoint(format!("unknown parameter {}", p.name)))?;
        let value = p.tensor.to_tensor()?;
        let slot = model.store.get_mut(id);
        if slot.value.shape() != value.shape() {
            return Err(SmateError::Checkpoint(format!(
                "{}: shape {:?}, expected {:?}",
                p.name,
                value.shape(),
                slot.value.shape()
            )));
        }
        slot.value = value;
    }
    if doc.batch_norm.len() != model.convs.len() {
        return Err(SmateError::Checkpoint("batch-norm entries do not match conv blocks".into()));
    }
    for (conv, bn) in model.convs.iter_mut().zip(&doc.batch_norm) {
        let d = conv.d_c;
        if bn.running_mean.len() != d || bn.running_var.len() != d {
            return Err(SmateError::Checkpoint(format!("{}: wrong statistics width", bn.layer)));
        }
        conv.bn_running_mean = Tensor::vector(bn.running_mean.clone());
        conv.bn_running_var = Tensor::vector(bn.running_var.clone());
    }
    let k = doc.label_set.len();
    let centroids: Vec<Tensor> = doc
        .centroids
        .centroids
        .iter()
        .map(TensorDoc::to_tensor)
        .collect::<Result<_>>()?;
    let expected = [model.config.embedding_length(), model.config.embed_dim];
    if centroids.len() != k || centroids.iter().any(|c| c.shape() != expected) {
        return Err(SmateError::Checkpoint("centroids do not match label set and embedding shape".into()));
    }
    if doc.normalization.mean.len() != model.config.dims || doc.normalization.std.len() != model.config.dims {
        return Err(SmateError::Checkpoint("normalization statistics have the wrong width".into()));
    }
    Ok(TrainedModel {
        model,
        norm: doc.normalization,
        label_set: doc.label_set,
        centroids: CentroidSet {
            centroids,
            class_ids: (0..k).collect(),
            step: doc.centroids.step,
            labeled_counts: doc.centroids.labeled_counts,
            propagated_counts: doc.centroids.propagated_counts,
        },
    })
}

pub fn save_checkpoint(tm: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = checkpoint_to_string(tm)?;
    std::fs::write(path, text).map_err(|e| SmateError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| SmateError::io(path, e))?;
    checkpoint_from_str(&text)
}
