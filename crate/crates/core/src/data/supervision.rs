use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::MtsDataset;
use crate::error::{Result, SmateError};

/// How many training labels stay visible.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub ratio: f64,
    pub seed: u64,
    pub stratified: bool,
    /// Minimum visible labels per class.
    pub floor: usize,
}

impl SplitSpec {
    pub fn new(ratio: f64, seed: u64) -> Self {
        SplitSpec {
            ratio,
            seed,
            stratified: true,
            floor: 1,
        }
    }
}

/// Seeded selection of visible labels.
///
/// Stratified: each class keeps `max(floor, round(r * N_class))` labels.
/// Otherwise `floor` labels per class are drawn first and the rest of the
/// `round(r * N)` budget comes from the remaining pool.
pub fn apply_supervision(ds: &MtsDataset, spec: &SplitSpec) -> Result<MtsDataset> {
    if !(0.0..=1.0).contains(&spec.ratio) {
        return Err(SmateError::Config(format!(
            "supervision ratio {} outside [0, 1]",
            spec.ratio
        )));
    }
    let k = ds.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in 0..ds.len() {
        by_class[ds.true_label(i)].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < spec.floor {
            return Err(SmateError::Config(format!(
                "class \"{}\" has {} samples, fewer than the floor of {}",
                ds.label_name(c),
                members.len(),
                spec.floor
            )));
        }
    }
    let n = ds.len() as f64;
    if spec.stratified && spec.ratio * n + 1e-9 < (spec.floor * k) as f64 {
        return Err(SmateError::Config(format!(
            "ratio {} on {} samples cannot give {} labels to each of {k} classes",
            spec.ratio,
            ds.len(),
            spec.floor
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut mask = vec![false; ds.len()];
    if spec.stratified {
        for members in &mut by_class {
            members.shuffle(&mut rng);
            let want = ((spec.ratio * members.len() as f64).round() as usize)
                .max(spec.floor)
                .min(members.len());
            for &i in &members[..want] {
                mask[i] = true;
            }
        }
    } else {
        let mut rest = Vec::new();
        for members in &mut by_class {
            members.shuffle(&mut rng);
            for &i in &members[..spec.floor] {
                mask[i] = true;
            }
            rest.extend_from_slice(&members[spec.floor..]);
        }
        rest.sort_unstable();
        rest.shuffle(&mut rng);
        let budget = (spec.ratio * n).round() as usize;
        let extra = budget.saturating_sub(spec.floor * k).min(rest.len());
        for &i in &rest[..extra] {
            mask[i] = true;
        }
    }
    Ok(ds.clone().with_mask(mask))
}
