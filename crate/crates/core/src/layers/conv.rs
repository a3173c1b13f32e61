use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SmateError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

use super::{batch_of, sum_vars};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// 1-D convolution with zero 'same' padding, batch normalization and ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub window: usize,
    pub d_in: usize,
    pub d_c: usize,
    /// `[window x d_in x d_c]`
    pub kernel: ParamId,
    pub bias: ParamId,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub bn_running_mean: Tensor,
    pub bn_running_var: Tensor,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

pub enum BatchNormMode<'a> {
    /// Normalize with statistics over every row of every step.
    Train,
    Inference { mean: &'a Tensor, var: &'a Tensor },
}

/// Per-channel batch normalization over the batch and time axes.
///
/// Returns the normalized sequence and, in training mode, the batch mean and
/// (biased) variance that were used.
pub fn batch_norm(
    tape: &Tape,
    seq: &[Var],
    gamma: Var,
    beta: Var,
    mode: BatchNormMode<'_>,
    eps: f64,
) -> Result<(Vec<Var>, Option<(Tensor, Tensor)>)> {
    let (batch, d) = batch_of(tape, seq, "batch_norm")?;
    if tape.shape(gamma) != [d] || tape.shape(beta) != [d] {
        return Err(SmateError::dim("batch_norm", &[d], &tape.shape(gamma)));
    }
    let count = (batch * seq.len()) as f64;
    let beta_rows = tape.tile_rows(beta, batch)?;
    match mode {
        BatchNormMode::Train => {
            let col_sums: Vec<Var> = seq
                .iter()
                .map(|&x| tape.sum_rows(x))
                .collect::<Result<_>>()?;
            let mean = tape.scale(sum_vars(tape, &col_sums)?, 1.0 / count)?;
            let mean_rows = tape.tile_rows(mean, batch)?;
            let centered: Vec<Var> = seq
                .iter()
                .map(|&x| tape.sub(x, mean_rows))
                .collect::<Result<_>>()?;
            let sq_sums: Vec<Var> = centered
                .iter()
                .map(|&c| tape.sum_rows(tape.mul(c, c)?))
                .collect::<Result<_>>()?;
            let var = tape.scale(sum_vars(tape, &sq_sums)?, 1.0 / count)?;
            let std = tape.sqrt(tape.add_scalar(var, eps)?)?;
            let gain = tape.div(gamma, std)?;
            let gain_rows = tape.tile_rows(gain, batch)?;
            let out = centered
                .iter()
                .map(|&c| tape.add(tape.mul(c, gain_rows)?, beta_rows))
                .collect::<Result<_>>()?;
            let stats = (tape.value(mean).clone(), tape.value(var).clone());
            Ok((out, Some(stats)))
        }
        BatchNormMode::Inference { mean, var } => {
            if mean.shape() != [d] || var.shape() != [d] {
                return Err(SmateError::dim("batch_norm", &[d], mean.shape()));
            }
            let mean_rows = tape.constant(Tensor::new(
                vec![batch, d],
                mean.data().repeat(batch),
            )?);
            let inv_std = tape.constant(var.map(|v| 1.0 / (v + eps).sqrt()));
            let gain = tape.mul(gamma, inv_std)?;
            let gain_rows = tape.tile_rows(gain, batch)?;
            let out = seq
                .iter()
                .map(|&x| {
                    let c = tape.sub(x, mean_rows)?;
                    tape.add(tape.mul(c, gain_rows)?, beta_rows)
                })
                .collect::<Result<_>>()?;
            Ok((out, None))
        }
    }
}

impl ConvBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        window: usize,
        d_in: usize,
        d_c: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if window == 0 || d_in == 0 || d_c == 0 {
            return Err(SmateError::Config(format!(
                "{prefix}: conv window and widths must be positive"
            )));
        }
        let kernel = store.add_glorot(
            format!("{prefix}.kernel"),
            &[window, d_in, d_c],
            window * d_in,
            window * d_c,
            rng,
        );
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[d_c]));
        let bn_gamma = store.add(format!("{prefix}.bn_gamma"), Tensor::ones(&[d_c]));
        let bn_beta = store.add(format!("{prefix}.bn_beta"), Tensor::zeros(&[d_c]));
        Ok(ConvBlock {
            window,
            d_in,
            d_c,
            kernel,
            bias,
            bn_gamma,
            bn_beta,
            bn_running_mean: Tensor::zeros(&[d_c]),
            bn_running_var: Tensor::ones(&[d_c]),
            bn_momentum: BN_MOMENTUM,
            bn_eps: BN_EPS,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.kernel, self.bias, self.bn_gamma, self.bn_beta]
    }

    /// Zero-padded 'same' convolution: output step `t` sees inputs
    /// `t - (m-1)/2 ..= t + m/2`.
    pub fn convolve(&self, tape: &Tape, store: &ParamStore, seq: &[Var]) -> Result<Vec<Var>> {
        let (batch, d) = batch_of(tape, seq, "conv1d")?;
        if d != self.d_in {
            return Err(SmateError::dim("conv1d", &[batch, d], &[self.d_in, self.d_c]));
        }
        let kernel = tape.param(store, self.kernel);
        let taps: Vec<Var> = (0..self.window)
            .map(|k| tape.slice0(kernel, k))
            .collect::<Result<_>>()?;
        let bias = tape.tile_rows(tape.param(store, self.bias), batch)?;
        let pad = (self.window - 1) / 2;
        let len = seq.len() as isize;
        (0..seq.len())
            .map(|t| {
                let mut acc = bias;
                for (k, &tap) in taps.iter().enumerate() {
                    let src = t as isize + k as isize - pad as isize;
                    if src < 0 || src >= len {
                        continue;
                    }
                    let term = tape.matmul(seq[src as usize], tap)?;
                    acc = tape.add(acc, term)?;
                }
                Ok(acc)
            })
            .collect()
    }

    /// `ReLU(BN(conv(seq)))`. Training mode normalizes with batch statistics
    /// and folds them into the running estimates.
    pub fn forward(
        &mut self,
        tape: &Tape,
        store: &ParamStore,
        seq: &[Var],
        training: bool,
    ) -> Result<Vec<Var>> {
        let conv = self.convolve(tape, store, seq)?;
        let gamma = tape.param(store, self.bn_gamma);
        let beta = tape.param(store, self.bn_beta);
        let mode = if training {
            BatchNormMode::Train
        } else {
            BatchNormMode::Inference {
                mean: &self.bn_running_mean,
                var: &self.bn_running_var,
            }
        };
        let (normed, stats) = batch_norm(tape, &conv, gamma, beta, mode, self.bn_eps)?;
        if let Some((mean, var)) = stats {
            let mom = self.bn_momentum;
            self.bn_running_mean = self.bn_running_mean.zip_map(&mean, |r, b| mom * r + (1.0 - mom) * b);
            self.bn_running_var = self.bn_running_var.zip_map(&var, |r, b| mom * r + (1.0 - mom) * b);
        }
        normed.into_iter().map(|v| tape.relu(v)).collect()
    }

    /// Inference-mode forward pass that leaves running statistics untouched.
    pub fn forward_frozen(&self, tape: &Tape, store: &ParamStore, seq: &[Var]) -> Result<Vec<Var>> {
        let conv = self.convolve(tape, store, seq)?;
        let gamma = tape.param(store, self.bn_gamma);
        let beta = tape.param(store, self.bn_beta);
        let mode = BatchNormMode::Inference {
            mean: &self.bn_running_mean,
            var: &self.bn_running_var,
        };
        let (normed, _) = batch_norm(tape, &conv, gamma, beta, mode, self.bn_eps)?;
        normed.into_iter().map(|v| tape.relu(v)).collect()
    }
}
