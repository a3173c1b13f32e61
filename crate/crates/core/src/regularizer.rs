//! Class-centroid regularization of the embedding space.
//!
//! Centroids are built in three ordered steps from the current embeddings:
//!
//! 1. **init**: the mean of each class's labeled embeddings;
//! 2. **supervised adjustment**: a distance-weighted mean of the same
//!    embeddings, each weighted by its score for its own class against the
//!    initial centroids;
//! 3. **unsupervised adjustment**: every unlabeled embedding joins the class
//!    it scores highest for, and each centroid becomes a count-weighted mix of
//!    its labeled weighted mean and the score-weighted mean of its propagated
//!    members.
//!
//! The score of an embedding `h` for class `k` is
//! `1 - ED(h, c_k) / (Σ_j ED(h, c_j) + ε)`, where `ED` is the Euclidean
//! distance of the flattened `L x D` matrices. Scores of one embedding sum to
//! `K - 1`. Both weighted means are normalized by their total weight so every
//! centroid stays in the convex hull of its contributors.
//!
//! The tape-level functions in [`on_tape`] are what training differentiates
//! through. The tensor-level functions below run the same code on a
//! throwaway tape and return plain values.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Result, SmateError};
use crate::tensor::Tensor;

/// Guard added to score denominators and inside the log of the loss.
pub const EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidStep {
    Initialized,
    SupervisedAdjusted,
    UnsupervisedAdjusted,
}

/// `K` class centroids of shape `L x D`, indexed by class id `0..K`.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidSet {
    pub centroids: Vec<Tensor>,
    pub class_ids: Vec<usize>,
    pub step: CentroidStep,
    /// Labeled contributors per class.
    pub labeled_counts: Vec<usize>,
    /// Unlabeled members propagated into each class by the last step 3.
    pub propagated_counts: Vec<usize>,
}

impl CentroidSet {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn embedding_shape(&self) -> &[usize] {
        self.centroids[0].shape()
    }

    /// All centroids flattened into a `[K x L·D]` matrix.
    pub fn matrix(&self) -> Tensor {
        let f = self.centroids[0].len();
        let data = self.centroids.iter().flat_map(|c| c.data().iter().copied()).collect();
        Tensor::new(vec![self.k(), f], data).expect("non-empty centroids")
    }

    fn from_matrix(
        m: &Tensor,
        shape: &[usize],
        step: CentroidStep,
        labeled_counts: Vec<usize>,
        propagated_counts: Vec<usize>,
    ) -> Result<Self> {
        let centroids: Vec<Tensor> = (0..m.rows())
            .map(|k| Tensor::new(shape.to_vec(), m.row(k).to_vec()))
            .collect::<Result<_>>()?;
        Ok(CentroidSet {
            class_ids: (0..centroids.len()).collect(),
            centroids,
            step,
            labeled_counts,
            propagated_counts,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub scores: Vec<f64>,
    /// Every centroid coincides with the embedding; scores are uniform.
    pub degenerate: bool,
}

impl ClassScores {
    /// Highest-scoring class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.scores)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Frobenius distance between two same-shaped embeddings.
pub fn embedding_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(SmateError::dim("embedding_distance", a.shape(), b.shape()));
    }
    let sq = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y));
    Ok(sq.sqrt())
}

fn flatten_rows(embeddings: &[&Tensor]) -> Result<Tensor> {
    let first = embeddings
        .first()
        .ok_or_else(|| SmateError::Contract("no embeddings given".into()))?;
    let mut data = Vec::with_capacity(embeddings.len() * first.len());
    for e in embeddings {
        if e.shape() != first.shape() {
            return Err(SmateError::dim("embeddings", first.shape(), e.shape()));
        }
        data.extend_from_slice(e.data());
    }
    Tensor::new(vec![embeddings.len(), first.len()], data)
}

fn check_classes(classes: &[usize], n: usize, k: usize) -> Result<()> {
    if classes.len() != n {
        return Err(SmateError::Contract(format!(
            "{} class ids for {n} embeddings",
            classes.len()
        )));
    }
    if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
        return Err(SmateError::Contract(format!("class id {bad} outside 0..{k}")));
    }
    Ok(())
}

/// Step 1: per-class mean of the labeled embeddings.
pub fn init_centroids(embeddings: &[Tensor], classes: &[usize], k: usize) -> Result<CentroidSet> {
    let refs: Vec<&Tensor> = embeddings.iter().collect();
    let rows = flatten_rows(&refs)?;
    check_classes(classes, embeddings.len(), k)?;
    let tape = Tape::new();
    let e = tape.constant(rows);
    let tc = on_tape::init(&tape, e, classes, k, None)?;
    let m = tape.value(tc.matrix).clone();
    CentroidSet::from_matrix(
        &m,
        embeddings[0].shape(),
        CentroidStep::Initialized,
        tc.labeled_counts,
        vec![0; k],
    )
}

/// Scores of one embedding against every centroid.
pub fn class_scores(h: &Tensor, cs: &CentroidSet) -> Result<ClassScores> {
    if cs.k() < 2 {
        return Err(SmateError::Contract(format!(
            "class scores need at least 2 centroids, got {}",
            cs.k()
        )));
    }
    if h.shape() != cs.embedding_shape() {
        return Err(SmateError::dim("class_scores", h.shape(), cs.embedding_shape()));
    }
    let tape = Tape::new();
    let e = tape.constant(h.reshape(&[1, h.len()])?);
    let c = tape.constant(cs.matrix());
    let d = tape.pairwise_distances(e, c)?;
    let degenerate = tape.value(d).data().iter().all(|&v| v == 0.0);
    let s = tape.ratio_scores(d, EPS)?;
    let scores = tape.value(s).data().to_vec();
    Ok(ClassScores { scores, degenerate })
}

/// Step 2: distance-weighted mean of each class's labeled embeddings.
pub fn adjust_supervised(
    cs: &CentroidSet,
    embeddings: &[Tensor],
    classes: &[usize],
) -> Result<CentroidSet> {
    if cs.step != CentroidStep::Initialized {
        return Err(SmateError::Contract(format!(
            "supervised adjustment expects initialized centroids, found {:?}",
            cs.step
        )));
    }
    let refs: Vec<&Tensor> = embeddings.iter().collect();
    let rows = flatten_rows(&refs)?;
    check_classes(classes, embeddings.len(), cs.k())?;
    let tape = Tape::new();
    let init = on_tape::TapeCentroids {
        matrix: tape.constant(cs.matrix()),
        step: cs.step,
        labeled_counts: cs.labeled_counts.clone(),
        propagated_counts: cs.propagated_counts.clone(),
    };
    let e = tape.constant(rows);
    let adjusted = on_tape::adjust_supervised(&tape, &init, e, classes)?;
    let m = tape.value(adjusted.matrix).clone();
    CentroidSet::from_matrix(
        &m,
        cs.embedding_shape(),
        adjusted.step,
        adjusted.labeled_counts,
        adjusted.propagated_counts,
    )
}

/// Step 3: propagate labels to unlabeled embeddings and mix them in.
pub fn adjust_unsupervised(
    cs: &CentroidSet,
    unlabeled: &[Tensor],
    min_score: Option<f64>,
) -> Result<CentroidSet> {
    if cs.step != CentroidStep::SupervisedAdjusted {
        return Err(SmateError::Contract(format!(
            "unsupervised adjustment expects supervised-adjusted centroids, found {:?}",
            cs.step
        )));
    }
    let tape = Tape::new();
    let prev = on_tape::TapeCentroids {
        matrix: tape.constant(cs.matrix()),
        step: cs.step,
        labeled_counts: cs.labeled_counts.clone(),
        propagated_counts: cs.propagated_counts.clone(),
    };
    let u = if unlabeled.is_empty() {
        None
    } else {
        let refs: Vec<&Tensor> = unlabeled.iter().collect();
        let rows = flatten_rows(&refs)?;
        if rows.cols() != cs.centroids[0].len() {
            return Err(SmateError::dim(
                "adjust_unsupervised",
                unlabeled[0].shape(),
                cs.embedding_shape(),
            ));
        }
        Some(tape.constant(rows))
    };
    let adjusted = on_tape::adjust_unsupervised(&tape, &prev, u, min_score)?;
    let m = tape.value(adjusted.matrix).clone();
    CentroidSet::from_matrix(
        &m,
        cs.embedding_shape(),
        adjusted.step,
        adjusted.labeled_counts,
        adjusted.propagated_counts,
    )
}

/// Mean negative log of each labeled embedding's true-class score.
pub fn regularization_loss(
    embeddings: &[Tensor],
    classes: &[usize],
    cs: &CentroidSet,
) -> Result<f64> {
    if cs.step == CentroidStep::Initialized {
        return Err(SmateError::Contract(
            "regularization loss expects adjusted centroids".into(),
        ));
    }
    let refs: Vec<&Tensor> = embeddings.iter().collect();
    let rows = flatten_rows(&refs)?;
    check_classes(classes, embeddings.len(), cs.k())?;
    let tape = Tape::new();
    let e = tape.constant(rows);
    let c = tape.constant(cs.matrix());
    let loss = on_tape::loss(&tape, e, classes, c)?;
    let v = tape.value(loss).item();
    Ok(v)
}

/// Runs all three steps and returns the final centroids.
pub fn fit_centroids(
    labeled: &[Tensor],
    classes: &[usize],
    unlabeled: &[Tensor],
    k: usize,
    min_score: Option<f64>,
) -> Result<CentroidSet> {
    let init = init_centroids(labeled, classes, k)?;
    let sup = adjust_supervised(&init, labeled, classes)?;
    adjust_unsupervised(&sup, unlabeled, min_score)
}

/// The three steps and the loss as differentiable tape computations over
/// flattened embeddings (`[n x L·D]`, one row per sample).
pub mod on_tape {
    use super::*;
    use crate::autodiff::Var;

    pub struct TapeCentroids {
        /// `[K x L·D]`
        pub matrix: Var,
        pub step: CentroidStep,
        pub labeled_counts: Vec<usize>,
        pub propagated_counts: Vec<usize>,
    }

    fn counts(classes: &[usize], k: usize) -> Vec<usize> {
        let mut c = vec![0; k];
        for &y in classes {
            c[y] += 1;
        }
        c
    }

    fn row_mask(flags: &[bool], f: usize) -> Tensor {
        let data = flags
            .iter()
            .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, f))
            .collect();
        Tensor::new(vec![flags.len(), f], data).expect("non-empty mask")
    }

    /// Weighted group means `Σ_i w_i e_i / Σ_i w_i` for each group, as a
    /// `[K x F]` matrix, plus a flag per group whose total weight is zero
    /// (its row is left at zero).
    fn weighted_means(
        tape: &Tape,
        e: Var,
        weights: Var,
        groups: &[usize],
        k: usize,
    ) -> Result<(Var, Vec<bool>)> {
        let n = groups.len();
        let spread = tape.spread(weights, groups, k)?;
        let ones = tape.constant(Tensor::ones(&[n, 1]));
        let totals = tape.reshape(tape.matmul(spread, ones)?, &[k])?;
        let empty: Vec<bool> = tape.value(totals).data().iter().map(|&t| t == 0.0).collect();
        let guard = tape.constant(Tensor::new(
            vec![k],
            empty.iter().map(|&z| if z { 1.0 } else { 0.0 }).collect(),
        )?);
        let denom = tape.add(totals, guard)?;
        let inv = tape.div(tape.constant(Tensor::ones(&[k])), denom)?;
        let normalized = tape.mul(spread, tape.tile_cols(inv, n)?)?;
        Ok((tape.matmul(normalized, e)?, empty))
    }

    /// Step 1. A class without labeled rows takes its row from `carried` if
    /// given, and is an error otherwise.
    pub fn init(
        tape: &Tape,
        e: Var,
        classes: &[usize],
        k: usize,
        carried: Option<&Tensor>,
    ) -> Result<TapeCentroids> {
        let shape = tape.shape(e);
        check_classes(classes, shape[0], k)?;
        let labeled_counts = counts(classes, k);
        let missing: Vec<bool> = labeled_counts.iter().map(|&c| c == 0).collect();
        if let Some(absent) = missing.iter().position(|&m| m) {
            if carried.is_none() {
                return Err(SmateError::Config(format!(
                    "class {absent} has no labeled embedding"
                )));
            }
        }
        let ones = tape.constant(Tensor::ones(&[classes.len()]));
        let (means, _) = weighted_means(tape, e, ones, classes, k)?;
        let matrix = match carried {
            Some(prev) if missing.iter().any(|&m| m) => {
                if prev.shape() != [k, shape[1]] {
                    return Err(SmateError::dim("carried centroids", prev.shape(), &[k, shape[1]]));
                }
                let mask = row_mask(&missing, shape[1]);
                tape.add(means, tape.constant(mask.zip_map(prev, |m, p| m * p)))?
            }
            _ => means,
        };
        Ok(TapeCentroids {
            matrix,
            step: CentroidStep::Initialized,
            labeled_counts,
            propagated_counts: vec![0; k],
        })
    }

    /// `[n x K]` scores of each row of `e` against the centroids.
    pub fn scores(tape: &Tape, e: Var, centroids: Var) -> Result<Var> {
        let d = tape.pairwise_distances(e, centroids)?;
        tape.ratio_scores(d, EPS)
    }

    /// Step 2.
    pub fn adjust_supervised(
        tape: &Tape,
        cs: &TapeCentroids,
        e: Var,
        classes: &[usize],
    ) -> Result<TapeCentroids> {
        if cs.step != CentroidStep::Initialized {
            return Err(SmateError::Contract(format!(
                "supervised adjustment expects initialized centroids, found {:?}",
                cs.step
            )));
        }
        let k = tape.shape(cs.matrix)[0];
        let f = tape.shape(cs.matrix)[1];
        check_classes(classes, tape.shape(e)[0], k)?;
        let s = scores(tape, e, cs.matrix)?;
        let own = tape.pick(s, classes)?;
        let (means, empty) = weighted_means(tape, e, own, classes, k)?;
        for (class, _) in empty.iter().enumerate().filter(|(c, &z)| z && cs.labeled_counts[*c] > 0) {
            log::warn!("class {class}: all supervised weights are zero, centroid kept");
        }
        let keep = tape.constant(row_mask(&empty, f));
        let matrix = tape.add(means, tape.mul(cs.matrix, keep)?)?;
        Ok(TapeCentroids {
            matrix,
            step: CentroidStep::SupervisedAdjusted,
            labeled_counts: cs.labeled_counts.clone(),
            propagated_counts: vec![0; k],
        })
    }

    /// Step 3. `None` or an empty selection leaves the centroids unchanged.
    pub fn adjust_unsupervised(
        tape: &Tape,
        cs: &TapeCentroids,
        unlabeled: Option<Var>,
        min_score: Option<f64>,
    ) -> Result<TapeCentroids> {
        if cs.step != CentroidStep::SupervisedAdjusted {
            return Err(SmateError::Contract(format!(
                "unsupervised adjustment expects supervised-adjusted centroids, found {:?}",
                cs.step
            )));
        }
        let k = tape.shape(cs.matrix)[0];
        let f = tape.shape(cs.matrix)[1];
        let unchanged = |propagated_counts| TapeCentroids {
            matrix: cs.matrix,
            step: CentroidStep::UnsupervisedAdjusted,
            labeled_counts: cs.labeled_counts.clone(),
            propagated_counts,
        };
        let Some(u) = unlabeled else {
            return Ok(unchanged(vec![0; k]));
        };
        let s = scores(tape, u, cs.matrix)?;
        let (kept, assigned): (Vec<usize>, Vec<usize>) = {
            let sv = tape.value(s);
            (0..sv.rows())
                .filter_map(|i| {
                    let best = argmax(sv.row(i));
                    let keep = min_score.is_none_or(|m| sv.at(i, best) >= m);
                    keep.then_some((i, best))
                })
                .unzip()
        };
        if kept.is_empty() {
            return Ok(unchanged(vec![0; k]));
        }
        let members = tape.gather_rows(u, &kept)?;
        let member_scores = tape.gather_rows(s, &kept)?;
        let p_hat = tape.pick(member_scores, &assigned)?;
        let (prop_means, _) = weighted_means(tape, members, p_hat, &assigned, k)?;
        let propagated_counts = counts(&assigned, k);

        let labeled_share: Vec<f64> = cs
            .labeled_counts
            .iter()
            .zip(&propagated_counts)
            .map(|(&nl, &nu)| if nl + nu == 0 { 1.0 } else { nl as f64 / (nl + nu) as f64 })
            .collect();
        let share_l = Tensor::new(vec![k], labeled_share.clone())?;
        let share_u = share_l.map(|a| 1.0 - a);
        let a = tape.constant(Tensor::new(vec![k, f], expand(&share_l, f))?);
        let b = tape.constant(Tensor::new(vec![k, f], expand(&share_u, f))?);
        let matrix = tape.add(tape.mul(cs.matrix, a)?, tape.mul(prop_means, b)?)?;
        Ok(TapeCentroids {
            matrix,
            step: CentroidStep::UnsupervisedAdjusted,
            labeled_counts: cs.labeled_counts.clone(),
            propagated_counts,
        })
    }

    fn expand(v: &Tensor, f: usize) -> Vec<f64> {
        v.data()
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, f))
            .collect()
    }

    /// `-(1/n) Σ_i ln(score_{y_i}(e_i) + ε)` against `centroids`.
    pub fn loss(tape: &Tape, e: Var, classes: &[usize], centroids: Var) -> Result<Var> {
        let s = scores(tape, e, centroids)?;
        let own = tape.pick(s, classes)?;
        let logs = tape.ln(tape.add_scalar(own, EPS)?)?;
        tape.scale(tape.mean(logs)?, -1.0)
    }
}
