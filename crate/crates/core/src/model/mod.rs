//! The asymmetric auto-encoder: a two-channel encoder (stacked GRUs and
//! SMB-calibrated convolutions), a light recurrent decoder, and training.

mod checkpoint;
mod config;
mod train;

pub use checkpoint::{checkpoint_from_str, checkpoint_to_string, load_checkpoint, save_checkpoint, TrainedModel};
pub use config::{default_pool, BatchPolicy, SmateConfig};
pub use train::{batch_objective, train, EpochLog, Objective, TrainingRun};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SmateError};
use crate::layers::{
    avg_pool1d, batch_norm, batch_sequence, unbatch_sequence, Activation, BatchNormMode,
    ConvBlock, Fc, GruCell, SmbBlock,
};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Batch-norm statistics of one forward pass, one entry per conv block.
pub type BnStats = Vec<(Tensor, Tensor)>;

#[derive(Clone, Debug)]
pub struct SmateModel {
    pub config: SmateConfig,
    pub store: ParamStore,
    pub grus: Vec<GruCell>,
    /// One per conv block; empty when SMB is disabled.
    pub smbs: Vec<SmbBlock>,
    pub convs: Vec<ConvBlock>,
    pub fc1: Fc,
    pub fc2: Fc,
    pub dec_gru: GruCell,
    pub dec_fc: Fc,
}

pub struct Encoded {
    /// `L` steps of `[B x D]`.
    pub steps: Vec<Var>,
    pub bn_stats: BnStats,
}

impl SmateModel {
    pub fn new(config: SmateConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c = &config;
        let mut grus = Vec::with_capacity(3);
        for i in 0..3 {
            let d_in = if i == 0 { c.dims } else { c.gru_dim };
            grus.push(GruCell::new(&mut store, &format!("temporal.{i}"), d_in, c.gru_dim, &mut rng)?);
        }
        let mut smbs = Vec::new();
        let mut convs = Vec::with_capacity(3);
        for i in 0..3 {
            let d_in = if i == 0 { c.dims } else { c.conv_filters };
            if c.use_smb {
                smbs.push(SmbBlock::new(&mut store, &format!("smb.{i}"), c.smb_window, d_in, &mut rng)?);
            }
            convs.push(ConvBlock::new(
                &mut store,
                &format!("spatial.{i}"),
                c.conv_window,
                d_in,
                c.conv_filters,
                &mut rng,
            )?);
        }
        let fc1 = Fc::new(&mut store, "head.fc1", c.gru_dim + c.conv_filters, c.head_dim, Activation::Relu, &mut rng);
        let fc2 = Fc::new(&mut store, "head.fc2", c.head_dim, c.embed_dim, Activation::None, &mut rng);
        let dec_gru = GruCell::new(&mut store, "decoder.gru", c.embed_dim, c.gru_dim, &mut rng)?;
        let dec_fc = Fc::new(&mut store, "decoder.fc", c.gru_dim, c.dims, Activation::None, &mut rng);
        Ok(SmateModel {
            config,
            store,
            grus,
            smbs,
            convs,
            fc1,
            fc2,
            dec_gru,
            dec_fc,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    fn check_input(&self, tape: &Tape, seq: &[Var]) -> Result<usize> {
        let c = &self.config;
        let first = seq
            .first()
            .ok_or_else(|| SmateError::Contract("encode: empty sequence".into()))?;
        let shape = tape.shape(*first);
        if seq.len() != c.series_length || shape.len() != 2 || shape[1] != c.dims {
            return Err(SmateError::dim(
                "encode",
                &[seq.len(), *shape.last().unwrap_or(&0)],
                &[c.series_length, c.dims],
            ));
        }
        Ok(shape[0])
    }

    /// Encoder on a tape. `training` selects batch statistics for batch
    /// normalization; the statistics are returned, not applied.
    pub fn encode_seq(&self, tape: &Tape, seq: &[Var], training: bool) -> Result<Encoded> {
        self.check_input(tape, seq)?;
        let p = self.config.pool;

        let mut temporal = seq.to_vec();
        for gru in &self.grus {
            temporal = gru.layer(tape, &self.store, &temporal)?;
        }
        let temporal = avg_pool1d(tape, &temporal, p)?;

        let mut spatial = seq.to_vec();
        let mut bn_stats = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            if let Some(smb) = self.smbs.get(i) {
                spatial = smb.forward(tape, &self.store, &spatial)?.calibrated;
            }
            let raw = conv.convolve(tape, &self.store, &spatial)?;
            let gamma = tape.param(&self.store, conv.bn_gamma);
            let beta = tape.param(&self.store, conv.bn_beta);
            let mode = if training {
                BatchNormMode::Train
            } else {
                BatchNormMode::Inference {
                    mean: &conv.bn_running_mean,
                    var: &conv.bn_running_var,
                }
            };
            let (normed, stats) = batch_norm(tape, &raw, gamma, beta, mode, conv.bn_eps)?;
            if let Some(s) = stats {
                bn_stats.push(s);
            }
            spatial = normed.into_iter().map(|v| tape.relu(v)).collect::<Result<_>>()?;
        }
        let spatial = avg_pool1d(tape, &spatial, p)?;

        let concat: Vec<Var> = temporal
            .iter()
            .zip(&spatial)
            .map(|(&t, &s)| tape.concat_cols(&[t, s]))
            .collect::<Result<_>>()?;
        let hidden = self.fc1.forward_seq(tape, &self.store, &concat)?;
        let steps = self.fc2.forward_seq(tape, &self.store, &hidden)?;
        Ok(Encoded { steps, bn_stats })
    }

    /// Folds batch statistics from [`SmateModel::encode_seq`] into the
    /// running estimates.
    pub fn apply_bn_stats(&mut self, stats: &BnStats) {
        for (conv, (mean, var)) in self.convs.iter_mut().zip(stats) {
            let mom = conv.bn_momentum;
            conv.bn_running_mean = conv.bn_running_mean.zip_map(mean, |r, b| mom * r + (1.0 - mom) * b);
            conv.bn_running_var = conv.bn_running_var.zip_map(var, |r, b| mom * r + (1.0 - mom) * b);
        }
    }

    /// Decoder on a tape: repeat each embedding step `P` times (cut to `T`),
    /// run the decoder GRU and map every hidden state to `M` values.
    pub fn decode_seq(&self, tape: &Tape, steps: &[Var]) -> Result<Vec<Var>> {
        let c = &self.config;
        if steps.len() != c.embedding_length() {
            return Err(SmateError::dim(
                "decode",
                &[steps.len()],
                &[c.embedding_length()],
            ));
        }
        let upsampled: Vec<Var> = (0..c.series_length).map(|t| steps[t / c.pool]).collect();
        let hidden = self.dec_gru.layer(tape, &self.store, &upsampled)?;
        self.dec_fc.forward_seq(tape, &self.store, &hidden)
    }

    /// Row-major `[B x L·D]` flattening of an encoded sequence.
    pub fn flatten(tape: &Tape, steps: &[Var]) -> Result<Var> {
        tape.concat_cols(steps)
    }

    /// Inference-mode embedding of one `T x M` sample, as `L x D`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encode_many(std::slice::from_ref(x))?.remove(0))
    }

    /// Inference-mode embeddings, computed in chunks spread over
    /// [`thread_count`] threads. Rows are independent at inference, so the
    /// result does not depend on chunking or thread count.
    pub fn encode_many(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        const CHUNK: usize = 64;
        let chunks: Vec<&[Tensor]> = xs.chunks(CHUNK).collect();
        let encode_chunk = |chunk: &[Tensor]| -> Result<Vec<Tensor>> {
            let tape = Tape::new();
            let refs: Vec<&Tensor> = chunk.iter().collect();
            let seq = batch_sequence(&tape, &refs)?;
            let enc = self.encode_seq(&tape, &seq, false)?;
            Ok(unbatch_sequence(&tape, &enc.steps))
        };
        let threads = thread_count().min(chunks.len()).max(1);
        let parts: Vec<Result<Vec<Tensor>>> = if threads == 1 {
            chunks.iter().map(|c| encode_chunk(c)).collect()
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..threads)
                    .map(|w| {
                        let chunks = &chunks;
                        let encode_chunk = &encode_chunk;
                        scope.spawn(move || {
                            (w..chunks.len())
                                .step_by(threads)
                                .map(|i| (i, encode_chunk(chunks[i])))
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                let mut slots: Vec<Option<Result<Vec<Tensor>>>> = (0..chunks.len()).map(|_| None).collect();
                for h in handles {
                    for (i, r) in h.join().expect("encoder thread panicked") {
                        slots[i] = Some(r);
                    }
                }
                slots.into_iter().map(|s| s.expect("every chunk encoded")).collect()
            })
        };
        let mut out = Vec::with_capacity(xs.len());
        for part in parts {
            out.extend(part?);
        }
        Ok(out)
    }

    /// Flattened inference-mode embeddings (`L·D` values per sample).
    pub fn embed_flat(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        self.encode_many(xs)?
            .into_iter()
            .map(|h| {
                let n = h.len();
                h.reshape(&[1, n])
            })
            .collect()
    }

    /// `L x D` embedding to a `T x M` reconstruction.
    pub fn decode(&self, h: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        if h.shape() != [c.embedding_length(), c.embed_dim] {
            return Err(SmateError::dim(
                "decode",
                h.shape(),
                &[c.embedding_length(), c.embed_dim],
            ));
        }
        let tape = Tape::new();
        let steps = batch_sequence(&tape, &[h])?;
        let out = self.decode_seq(&tape, &steps)?;
        Ok(unbatch_sequence(&tape, &out).remove(0))
    }
}

/// Worker threads for inference, from `SMATE_THREADS` (default 1).
pub fn thread_count() -> usize {
    std::env::var("SMATE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Mean over batch and time of per-step Euclidean norms `||x_t - x~_t||`.
pub fn reconstruction_loss_seq(tape: &Tape, x: &[Var], recon: &[Var]) -> Result<Var> {
    if x.len() != recon.len() || x.is_empty() {
        return Err(SmateError::dim("reconstruction_loss", &[x.len()], &[recon.len()]));
    }
    let mut total: Option<Var> = None;
    for (&a, &b) in x.iter().zip(recon) {
        let norms = tape.row_norms(tape.sub(a, b)?)?;
        let s = tape.sum(norms)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let batch = tape.shape(x[0])[0];
    tape.scale(total.expect("non-empty"), 1.0 / (batch * x.len()) as f64)
}

/// `(1/T) Σ_t ||x_t - x~_t||` for two `T x M` tensors.
pub fn reconstruction_loss(x: &Tensor, recon: &Tensor) -> Result<f64> {
    if x.shape() != recon.shape() || x.rank() != 2 {
        return Err(SmateError::dim("reconstruction_loss", x.shape(), recon.shape()));
    }
    let tape = Tape::new();
    let a = batch_sequence(&tape, &[x])?;
    let b = batch_sequence(&tape, &[recon])?;
    let loss = reconstruction_loss_seq(&tape, &a, &b)?;
    let v = tape.value(loss).item();
    Ok(v)
}
