//! Neural building blocks.
//!
//! Every layer consumes and produces a *sequence*: one `[batch x d]` tape
//! variable per time step. A single sample is simply a batch of one; use
//! [`split_time`] and [`stack_time`] to move between a `[T x d]` matrix and
//! the per-step form.

mod conv;
mod fc;
mod gru;
mod pool;
mod smb;

pub use conv::{batch_norm, BatchNormMode, ConvBlock};
pub use fc::{fc_apply, Activation, Fc};
pub use gru::{BoundGru, GruCell};
pub use pool::avg_pool1d;
pub use smb::{SmbBlock, SmbOutput};

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SmateError};
use crate::tensor::Tensor;

/// `[T x d]` variable to `T` variables of shape `[1 x d]`.
pub fn split_time(tape: &Tape, x: Var) -> Result<Vec<Var>> {
    let shape = tape.shape(x);
    if shape.len() != 2 {
        return Err(SmateError::dim("split_time", &shape, &[0, 0]));
    }
    (0..shape[0]).map(|t| tape.gather_rows(x, &[t])).collect()
}

/// Inverse of [`split_time`] for batch-of-one sequences.
pub fn stack_time(tape: &Tape, seq: &[Var]) -> Result<Var> {
    tape.concat_rows(seq)
}

/// Stacks `B` samples of shape `[T x d]` into `T` constants of shape `[B x d]`.
pub fn batch_sequence(tape: &Tape, samples: &[&Tensor]) -> Result<Vec<Var>> {
    let first = samples
        .first()
        .ok_or_else(|| SmateError::Contract("empty batch".into()))?;
    let (t_len, d) = (first.rows(), first.cols());
    for s in samples {
        if s.shape() != first.shape() {
            return Err(SmateError::dim("batch_sequence", first.shape(), s.shape()));
        }
    }
    (0..t_len)
        .map(|t| {
            let mut data = Vec::with_capacity(samples.len() * d);
            for s in samples {
                data.extend_from_slice(s.row(t));
            }
            Tensor::new(vec![samples.len(), d], data).map(|v| tape.constant(v))
        })
        .collect()
}

/// Reverses [`batch_sequence`]: per-sample `[T x d]` tensors from a sequence.
pub fn unbatch_sequence(tape: &Tape, seq: &[Var]) -> Vec<Tensor> {
    let (b, d) = {
        let v = tape.value(seq[0]);
        (v.rows(), v.cols())
    };
    let mut out = vec![Vec::with_capacity(seq.len() * d); b];
    for &step in seq {
        let v = tape.value(step);
        for (i, sample) in out.iter_mut().enumerate() {
            sample.extend_from_slice(v.row(i));
        }
    }
    out.into_iter()
        .map(|data| Tensor::new(vec![seq.len(), d], data).expect("non-empty"))
        .collect()
}

pub(crate) fn batch_of(tape: &Tape, seq: &[Var], op: &'static str) -> Result<(usize, usize)> {
    let first = seq
        .first()
        .ok_or_else(|| SmateError::Contract(format!("{op}: empty sequence")))?;
    let shape = tape.shape(*first);
    if shape.len() != 2 {
        return Err(SmateError::dim(op, &shape, &[0, 0]));
    }
    Ok((shape[0], shape[1]))
}

/// Sum of a non-empty slice of same-shaped variables, left to right.
pub(crate) fn sum_vars(tape: &Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}
