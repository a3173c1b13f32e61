use crate::autodiff::{Tape, Var};
use crate::error::{Result, SmateError};

use super::sum_vars;

/// Non-overlapping mean over windows of `pool` steps. A ragged final window
/// is averaged over the steps it actually holds; `pool > T` yields one step.
pub fn avg_pool1d(tape: &Tape, seq: &[Var], pool: usize) -> Result<Vec<Var>> {
    if pool == 0 {
        return Err(SmateError::Contract("avg_pool1d: pool size must be >= 1".into()));
    }
    if seq.is_empty() {
        return Err(SmateError::Contract("avg_pool1d: empty sequence".into()));
    }
    seq.chunks(pool)
        .map(|window| {
            if window.len() == 1 {
                return Ok(window[0]);
            }
            let total = sum_vars(tape, window)?;
            tape.scale(total, 1.0 / window.len() as f64)
        })
        .collect()
}
