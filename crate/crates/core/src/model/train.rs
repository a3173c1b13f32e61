use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{reconstruction_loss_seq, BatchPolicy, BnStats, SmateModel};
use crate::autodiff::{Tape, Var};
use crate::data::{MtsDataset, TrainingView};
use crate::error::{Result, SmateError};
use crate::layers::batch_sequence;
use crate::optim::{Adam, AdamConfig};
use crate::regularizer::{fit_centroids, on_tape, CentroidSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub reconstruction: f64,
    pub regularization: f64,
    pub total: f64,
}

pub struct TrainingRun {
    pub log: Vec<EpochLog>,
    /// Centroids of the trained model, fitted on inference-mode embeddings
    /// of the whole training set.
    pub centroids: CentroidSet,
}

struct BatchLoss {
    reconstruction: f64,
    regularization: f64,
    total: f64,
}

/// Index sets for one epoch.
fn plan_batches(view: &TrainingView<'_>, policy: BatchPolicy, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let n = view.len();
    let size = match policy {
        BatchPolicy::Full => return vec![(0..n).collect()],
        BatchPolicy::Stratified { size } if size >= n => return vec![(0..n).collect()],
        BatchPolicy::Stratified { size } => size,
    };
    let count = n.div_ceil(size);
    let mut batches = vec![Vec::with_capacity(size + 1); count];
    for class in 0..view.num_classes() {
        let mut members: Vec<usize> = view
            .labeled_indices()
            .into_iter()
            .filter(|&i| view.visible_label(i) == Some(class))
            .collect();
        members.shuffle(rng);
        // every class starts at batch 0 so the first batch sees all classes
        for (j, i) in members.into_iter().enumerate() {
            batches[j % count].push(i);
        }
    }
    let mut rest = view.unlabeled_indices();
    rest.shuffle(rng);
    for i in rest {
        let target = (0..count).min_by_key(|&b| batches[b].len()).expect("count >= 1");
        batches[target].push(i);
    }
    batches
}

fn check_trainable(model: &SmateModel, view: &TrainingView<'_>) -> Result<()> {
    let c = &model.config;
    if view.is_empty() {
        return Err(SmateError::Config("training set is empty".into()));
    }
    if view.series_length() != c.series_length || view.dims() != c.dims {
        return Err(SmateError::dim(
            "train",
            &[view.series_length(), view.dims()],
            &[c.series_length, c.dims],
        ));
    }
    if let Some(class) = view.labeled_counts().iter().position(|&n| n == 0) {
        return Err(SmateError::Config(format!(
            "class \"{}\" has no labeled training samples",
            view.label_set()[class]
        )));
    }
    Ok(())
}

/// Tape values of the joint objective on one batch.
pub struct Objective {
    pub total: Var,
    pub reconstruction: Var,
    /// Absent when the batch has no labeled sample.
    pub regularization: Option<Var>,
    /// Final `[K x L·D]` centroids of the batch.
    pub centroids: Option<Var>,
    pub bn_stats: BnStats,
}

/// `L_R + lambda * L_Reg` for one batch, built on `tape` with batch-norm in
/// training mode. `visible[i]` is the label of `samples[i]` if it may be
/// used; `carried` fills classes without labeled samples in this batch.
pub fn batch_objective(
    model: &SmateModel,
    tape: &Tape,
    samples: &[&Tensor],
    visible: &[Option<usize>],
    num_classes: usize,
    carried: Option<&Tensor>,
) -> Result<Objective> {
    let c = &model.config;
    let seq = batch_sequence(tape, samples)?;
    let enc = model.encode_seq(tape, &seq, true)?;
    let recon = model.decode_seq(tape, &enc.steps)?;
    let l_r = reconstruction_loss_seq(tape, &seq, &recon)?;

    let mut labeled_rows = Vec::new();
    let mut labeled_classes = Vec::new();
    let mut unlabeled_rows = Vec::new();
    for (row, label) in visible.iter().enumerate() {
        match label {
            Some(y) => {
                labeled_rows.push(row);
                labeled_classes.push(*y);
            }
            None => unlabeled_rows.push(row),
        }
    }
    if labeled_rows.is_empty() {
        return Ok(Objective {
            total: l_r,
            reconstruction: l_r,
            regularization: None,
            centroids: None,
            bn_stats: enc.bn_stats,
        });
    }
    let flat = SmateModel::flatten(tape, &enc.steps)?;
    let e_l = tape.gather_rows(flat, &labeled_rows)?;
    let e_u = if unlabeled_rows.is_empty() {
        None
    } else {
        Some(tape.gather_rows(flat, &unlabeled_rows)?)
    };
    let init = on_tape::init(tape, e_l, &labeled_classes, num_classes, carried)?;
    let sup = on_tape::adjust_supervised(tape, &init, e_l, &labeled_classes)?;
    let cs = on_tape::adjust_unsupervised(tape, &sup, e_u, c.min_score)?;
    let l_reg = on_tape::loss(tape, e_l, &labeled_classes, cs.matrix)?;
    Ok(Objective {
        total: tape.add(l_r, tape.scale(l_reg, c.lambda)?)?,
        reconstruction: l_r,
        regularization: Some(l_reg),
        centroids: Some(cs.matrix),
        bn_stats: enc.bn_stats,
    })
}

fn batch_step(
    model: &mut SmateModel,
    adam: &mut Adam,
    view: &TrainingView<'_>,
    batch: &[usize],
    carried: &mut Option<Tensor>,
) -> Result<BatchLoss> {
    let tape = Tape::new();
    let samples: Vec<&Tensor> = batch.iter().map(|&i| &view.samples()[i]).collect();
    let visible: Vec<Option<usize>> = batch.iter().map(|&i| view.visible_label(i)).collect();
    let obj = batch_objective(model, &tape, &samples, &visible, view.num_classes(), carried.as_ref())?;
    if let Some(c) = obj.centroids {
        *carried = Some(tape.value(c).clone());
    }
    let out = BatchLoss {
        reconstruction: tape.value(obj.reconstruction).item(),
        regularization: obj.regularization.map_or(0.0, |v| tape.value(v).item()),
        total: tape.value(obj.total).item(),
    };
    let grads = tape.backward(obj.total)?;
    model.store.zero_grad();
    model.store.accumulate(&grads);
    adam.step(&mut model.store)?;
    model.apply_bn_stats(&obj.bn_stats);
    Ok(out)
}

/// Joint training: each step minimizes `L_R + lambda * L_Reg` on one batch,
/// with the centroids rebuilt on the tape from that batch's embeddings.
///
/// `ds` is used as given; normalization is the caller's job.
pub fn train(model: &mut SmateModel, ds: &MtsDataset) -> Result<TrainingRun> {
    let view = ds.training_view();
    check_trainable(model, &view)?;
    let c = model.config.clone();
    let mut adam = Adam::new(
        AdamConfig {
            lr: c.lr,
            ..AdamConfig::default()
        },
        &model.store,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut carried = None;
    let mut log = Vec::with_capacity(c.epochs);
    for epoch in 1..=c.epochs {
        let batches = plan_batches(&view, c.batch, &mut rng);
        let mut sums = [0.0; 3];
        for batch in &batches {
            let loss = batch_step(model, &mut adam, &view, batch, &mut carried).map_err(|e| match e {
                SmateError::NonFinite { op } => {
                    SmateError::Training(format!("epoch {epoch}: non-finite value in {op}"))
                }
                SmateError::Training(msg) => SmateError::Training(format!("epoch {epoch}: {msg}")),
                other => other,
            })?;
            if !loss.total.is_finite() {
                return Err(SmateError::Training(format!("epoch {epoch}: loss is {}", loss.total)));
            }
            sums[0] += loss.reconstruction;
            sums[1] += loss.regularization;
            sums[2] += loss.total;
        }
        let nb = batches.len() as f64;
        let entry = EpochLog {
            epoch,
            reconstruction: sums[0] / nb,
            regularization: sums[1] / nb,
            total: sums[2] / nb,
        };
        log::debug!(
            "epoch {epoch}: L_R={:.6} L_Reg={:.6} total={:.6}",
            entry.reconstruction,
            entry.regularization,
            entry.total
        );
        log.push(entry);
    }
    let centroids = final_centroids(model, &view)?;
    Ok(TrainingRun { log, centroids })
}

/// Three-step centroids over inference-mode embeddings of the training set.
pub(crate) fn final_centroids(model: &SmateModel, view: &TrainingView<'_>) -> Result<CentroidSet> {
    let embeddings = model.encode_many(view.samples())?;
    let labeled = view.labeled_indices();
    let classes: Vec<usize> = labeled
        .iter()
        .map(|&i| view.visible_label(i).expect("labeled"))
        .collect();
    let pick = |idx: &[usize]| idx.iter().map(|&i| embeddings[i].clone()).collect::<Vec<_>>();
    fit_centroids(
        &pick(&labeled),
        &classes,
        &pick(&view.unlabeled_indices()),
        view.num_classes(),
        model.config.min_score,
    )
}
