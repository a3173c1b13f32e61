use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SmateError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

use super::{batch_of, sum_vars};

/// Spatial modeling block.
///
/// For every step `i` the block averages its input over the truncated window
/// `[i - m/2, i + m/2]`, lets the variables interact through a bottleneck
/// (`d -> d' -> d`, ReLU then sigmoid) and rescales the input by the
/// resulting weights, which lie in `(0, 1)`.
#[derive(Clone, Debug)]
pub struct SmbBlock {
    pub window: usize,
    pub d: usize,
    pub reduced: usize,
    pub fc_down: ParamId,
    pub b_down: ParamId,
    pub fc_up: ParamId,
    pub b_up: ParamId,
}

pub struct SmbOutput {
    pub calibrated: Vec<Var>,
    pub weights: Vec<Var>,
}

impl SmbBlock {
    /// Bottleneck width used by [`SmbBlock::new`]: `max(1, d / 4)`.
    pub fn default_reduction(d: usize) -> usize {
        (d / 4).max(1)
    }

    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        window: usize,
        d: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::with_reduction(store, prefix, window, d, Self::default_reduction(d), rng)
    }

    pub fn with_reduction(
        store: &mut ParamStore,
        prefix: &str,
        window: usize,
        d: usize,
        reduced: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if window == 0 {
            return Err(SmateError::Contract(format!("{prefix}: SMB window must be >= 1")));
        }
        if d == 0 || reduced == 0 {
            return Err(SmateError::Config(format!(
                "{prefix}: SMB widths must be positive (d={d}, d'={reduced})"
            )));
        }
        let fc_down = store.add_glorot(format!("{prefix}.fc_down"), &[d, reduced], d, reduced, rng);
        let b_down = store.add(format!("{prefix}.b_down"), Tensor::zeros(&[reduced]));
        let fc_up = store.add_glorot(format!("{prefix}.fc_up"), &[reduced, d], reduced, d, rng);
        let b_up = store.add(format!("{prefix}.b_up"), Tensor::zeros(&[d]));
        Ok(SmbBlock {
            window,
            d,
            reduced,
            fc_down,
            b_down,
            fc_up,
            b_up,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.fc_down, self.b_down, self.fc_up, self.b_up]
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, seq: &[Var]) -> Result<SmbOutput> {
        if self.window == 0 {
            return Err(SmateError::Contract("SMB window must be >= 1".into()));
        }
        let (batch, d) = batch_of(tape, seq, "smb")?;
        if d != self.d {
            return Err(SmateError::dim("smb", &[batch, d], &[self.d]));
        }
        let w_down = tape.param(store, self.fc_down);
        let b_down = tape.tile_rows(tape.param(store, self.b_down), batch)?;
        let w_up = tape.param(store, self.fc_up);
        let b_up = tape.tile_rows(tape.param(store, self.b_up), batch)?;
        let half = self.window / 2;
        let len = seq.len();

        let mut calibrated = Vec::with_capacity(len);
        let mut weights = Vec::with_capacity(len);
        for i in 0..len {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(len - 1);
            let window = &seq[lo..=hi];
            let horizontal = if window.len() == 1 {
                window[0]
            } else {
                tape.scale(sum_vars(tape, window)?, 1.0 / window.len() as f64)?
            };
            let vertical = tape.relu(tape.add(tape.matmul(horizontal, w_down)?, b_down)?)?;
            let s = tape.sigmoid(tape.add(tape.matmul(vertical, w_up)?, b_up)?)?;
            calibrated.push(tape.mul(seq[i], s)?);
            weights.push(s);
        }
        Ok(SmbOutput {
            calibrated,
            weights,
        })
    }
}
