//! Plain-loop reference implementations shared by the integration tests.
//!
//! Everything here works on nested `Vec<f64>` with explicit index loops and
//! never touches the tape, so agreement with the library is independent
//! evidence.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use smate::autodiff::Tape;
use smate::layers::{batch_sequence, unbatch_sequence, Activation, ConvBlock, Fc, GruCell, SmbBlock};
use smate::params::{ParamId, ParamStore};
use smate::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn cases(n: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases: n,
        failure_persistence: None,
        ..Default::default()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

pub fn to_tensor(m: &Mat) -> Tensor {
    let rows: Vec<&[f64]> = m.iter().map(|r| r.as_slice()).collect();
    Tensor::matrix(&rows)
}

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// Fills a parameter with uniform noise so zero-initialized biases are
/// exercised too.
pub fn randomize(store: &mut ParamStore, id: ParamId, rng: &mut impl Rng) {
    for v in store.get_mut(id).value.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
}

pub fn param_mat(store: &ParamStore, id: ParamId) -> Mat {
    to_mat(&store.get(id).value)
}

pub fn param_vec(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.get(id).value.data().to_vec()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---- products and affine maps ----

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (p, q, r) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; r]; p];
    for i in 0..p {
        for j in 0..r {
            let mut s = 0.0;
            for k in 0..q {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn fc(x: &Mat, w: &Mat, b: &[f64], act: Activation) -> Mat {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| {
                    let mut s = b[j];
                    for (i, &xi) in row.iter().enumerate() {
                        s += xi * w[i][j];
                    }
                    match act {
                        Activation::None => s,
                        Activation::Relu => s.max(0.0),
                        Activation::Sigmoid => sigmoid(s),
                    }
                })
                .collect()
        })
        .collect()
}

// ---- GRU ----

pub struct GruWeights {
    pub w: [Mat; 3],
    pub u: [Mat; 3],
    pub b: [Vec<f64>; 3],
}

impl GruWeights {
    pub fn from_cell(store: &ParamStore, c: &GruCell) -> Self {
        GruWeights {
            w: [param_mat(store, c.w_r), param_mat(store, c.w_z), param_mat(store, c.w_h)],
            u: [param_mat(store, c.u_r), param_mat(store, c.u_z), param_mat(store, c.u_h)],
            b: [param_vec(store, c.b_r), param_vec(store, c.b_z), param_vec(store, c.b_h)],
        }
    }
}

/// Scalar-by-scalar GRU step.
pub fn gru_step(g: &GruWeights, x: &[f64], h: &[f64]) -> Vec<f64> {
    let d = h.len();
    let pre = |gate: usize, hh: &[f64], j: usize| {
        let mut s = g.b[gate][j];
        for (i, &xi) in x.iter().enumerate() {
            s += xi * g.w[gate][i][j];
        }
        for (i, &hi) in hh.iter().enumerate() {
            s += hi * g.u[gate][i][j];
        }
        s
    };
    let r: Vec<f64> = (0..d).map(|j| sigmoid(pre(0, h, j))).collect();
    let z: Vec<f64> = (0..d).map(|j| sigmoid(pre(1, h, j))).collect();
    let hr: Vec<f64> = (0..d).map(|j| h[j] * r[j]).collect();
    (0..d)
        .map(|j| {
            let cand = pre(2, &hr, j).tanh();
            (1.0 - z[j]) * h[j] + z[j] * cand
        })
        .collect()
}

pub fn gru_layer(g: &GruWeights, xs: &Mat) -> Mat {
    let d = g.b[0].len();
    let mut h = vec![0.0; d];
    let mut out = Vec::with_capacity(xs.len());
    for x in xs {
        h = gru_step(g, x, &h);
        out.push(h.clone());
    }
    out
}

// ---- convolution, batch norm, pooling ----

/// Sliding-window product over an explicitly zero-padded copy of `x`.
pub fn conv_same(x: &Mat, kernel: &[Mat], bias: &[f64]) -> Mat {
    let m = kernel.len();
    let d_in = x[0].len();
    let d_c = bias.len();
    let before = (m - 1) / 2;
    let after = m - 1 - before;
    let mut padded = vec![vec![0.0; d_in]; before];
    padded.extend(x.iter().cloned());
    padded.extend(vec![vec![0.0; d_in]; after]);
    (0..x.len())
        .map(|t| {
            (0..d_c)
                .map(|c| {
                    let mut s = bias[c];
                    for (k, tap) in kernel.iter().enumerate() {
                        for i in 0..d_in {
                            s += padded[t + k][i] * tap[i][c];
                        }
                    }
                    s
                })
                .collect()
        })
        .collect()
}

/// Batch norm over every (sample, step) row of a batch, biased variance.
pub fn batch_norm_train(batch: &[Mat], gamma: &[f64], beta: &[f64], eps: f64) -> (Vec<Mat>, Vec<f64>, Vec<f64>) {
    let d = gamma.len();
    let count = (batch.len() * batch[0].len()) as f64;
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for c in 0..d {
        let mut s = 0.0;
        for sample in batch {
            for row in sample {
                s += row[c];
            }
        }
        mean[c] = s / count;
        let mut q = 0.0;
        for sample in batch {
            for row in sample {
                q += (row[c] - mean[c]).powi(2);
            }
        }
        var[c] = q / count;
    }
    let out = batch
        .iter()
        .map(|sample| {
            sample
                .iter()
                .map(|row| {
                    (0..d)
                        .map(|c| gamma[c] * (row[c] - mean[c]) / (var[c] + eps).sqrt() + beta[c])
                        .collect()
                })
                .collect()
        })
        .collect();
    (out, mean, var)
}

pub fn batch_norm_inference(x: &Mat, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            (0..gamma.len())
                .map(|c| gamma[c] * (row[c] - mean[c]) / (var[c] + eps).sqrt() + beta[c])
                .collect()
        })
        .collect()
}

pub fn relu(x: &Mat) -> Mat {
    x.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

pub fn avg_pool(x: &Mat, p: usize) -> Mat {
    let d = x[0].len();
    let mut out = Vec::new();
    let mut start = 0;
    while start < x.len() {
        let end = (start + p).min(x.len());
        let mut row = vec![0.0; d];
        for t in start..end {
            for j in 0..d {
                row[j] += x[t][j];
            }
        }
        for v in &mut row {
            *v /= (end - start) as f64;
        }
        out.push(row);
        start = end;
    }
    out
}

pub struct ConvWeights {
    pub kernel: Vec<Mat>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

impl ConvWeights {
    pub fn from_block(store: &ParamStore, c: &ConvBlock) -> Self {
        let k = &store.get(c.kernel).value;
        let data = k.data();
        let kernel = (0..c.window)
            .map(|w| {
                (0..c.d_in)
                    .map(|i| (0..c.d_c).map(|o| data[(w * c.d_in + i) * c.d_c + o]).collect())
                    .collect()
            })
            .collect();
        ConvWeights {
            kernel,
            bias: param_vec(store, c.bias),
            gamma: param_vec(store, c.bn_gamma),
            beta: param_vec(store, c.bn_beta),
            running_mean: c.bn_running_mean.data().to_vec(),
            running_var: c.bn_running_var.data().to_vec(),
            eps: c.bn_eps,
        }
    }
}

// ---- spatial modeling block ----

pub struct SmbWeights {
    pub window: usize,
    pub down: Mat,
    pub b_down: Vec<f64>,
    pub up: Mat,
    pub b_up: Vec<f64>,
}

impl SmbWeights {
    pub fn from_block(store: &ParamStore, s: &SmbBlock) -> Self {
        SmbWeights {
            window: s.window,
            down: param_mat(store, s.fc_down),
            b_down: param_vec(store, s.b_down),
            up: param_mat(store, s.fc_up),
            b_up: param_vec(store, s.b_up),
        }
    }
}

/// Returns `(calibrated, weights)`.
pub fn smb(w: &SmbWeights, h: &Mat) -> (Mat, Mat) {
    let t_len = h.len();
    let d = h[0].len();
    let half = w.window / 2;
    let mut calibrated = Vec::with_capacity(t_len);
    let mut weights = Vec::with_capacity(t_len);
    for i in 0..t_len {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(t_len - 1);
        let mut horizontal = vec![0.0; d];
        for row in &h[lo..=hi] {
            for j in 0..d {
                horizontal[j] += row[j];
            }
        }
        for v in &mut horizontal {
            *v /= (hi - lo + 1) as f64;
        }
        let vertical = &fc(&vec![horizontal], &w.down, &w.b_down, Activation::Relu)[0];
        let s = fc(&vec![vertical.clone()], &w.up, &w.b_up, Activation::Sigmoid).remove(0);
        calibrated.push((0..d).map(|j| h[i][j] * s[j]).collect());
        weights.push(s);
    }
    (calibrated, weights)
}

// ---- losses ----

pub fn reconstruction(x: &Mat, y: &Mat) -> f64 {
    let mut total = 0.0;
    for t in 0..x.len() {
        let mut sq = 0.0;
        for j in 0..x[t].len() {
            sq += (x[t][j] - y[t][j]).powi(2);
        }
        total += sq.sqrt();
    }
    total / x.len() as f64
}

// ---- regularizer on flattened embeddings ----

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).powi(2);
    }
    s.sqrt()
}

pub const EPS: f64 = 1e-12;

pub fn scores(h: &[f64], centroids: &Mat) -> Vec<f64> {
    let d: Vec<f64> = centroids.iter().map(|c| dist(h, c)).collect();
    let mut total = 0.0;
    for v in &d {
        total += v;
    }
    d.iter().map(|v| 1.0 - v / (total + EPS)).collect()
}

pub fn class_means(e: &Mat, classes: &[usize], k: usize) -> Mat {
    let f = e[0].len();
    let mut out = vec![vec![0.0; f]; k];
    let mut n = vec![0usize; k];
    for (row, &c) in e.iter().zip(classes) {
        n[c] += 1;
        for j in 0..f {
            out[c][j] += row[j];
        }
    }
    for c in 0..k {
        for j in 0..f {
            out[c][j] /= n[c] as f64;
        }
    }
    out
}

pub fn supervised(init: &Mat, e: &Mat, classes: &[usize]) -> Mat {
    let k = init.len();
    let f = e[0].len();
    let mut num = vec![vec![0.0; f]; k];
    let mut den = vec![0.0; k];
    for (row, &c) in e.iter().zip(classes) {
        let w = scores(row, init)[c];
        den[c] += w;
        for j in 0..f {
            num[c][j] += w * row[j];
        }
    }
    (0..k)
        .map(|c| {
            if den[c] == 0.0 {
                init[c].clone()
            } else {
                num[c].iter().map(|v| v / den[c]).collect()
            }
        })
        .collect()
}

/// Propagation then count-weighted mixing. Returns the centroids and the
/// propagated count per class.
pub fn unsupervised(sup: &Mat, unlabeled: &Mat, labeled_counts: &[usize]) -> (Mat, Vec<usize>) {
    let k = sup.len();
    let f = sup[0].len();
    let mut num = vec![vec![0.0; f]; k];
    let mut den = vec![0.0; k];
    let mut count = vec![0usize; k];
    for u in unlabeled {
        let s = scores(u, sup);
        let mut best = 0;
        for c in 1..k {
            if s[c] > s[best] {
                best = c;
            }
        }
        count[best] += 1;
        den[best] += s[best];
        for j in 0..f {
            num[best][j] += s[best] * u[j];
        }
    }
    let out = (0..k)
        .map(|c| {
            if count[c] == 0 {
                return sup[c].clone();
            }
            let nl = labeled_counts[c] as f64;
            let nu = count[c] as f64;
            (0..f)
                .map(|j| nl / (nl + nu) * sup[c][j] + nu / (nl + nu) * num[c][j] / den[c])
                .collect()
        })
        .collect();
    (out, count)
}

pub fn reg_loss(e: &Mat, classes: &[usize], centroids: &Mat) -> f64 {
    let mut s = 0.0;
    for (row, &c) in e.iter().zip(classes) {
        s += (scores(row, centroids)[c] + EPS).ln();
    }
    -s / e.len() as f64
}

// ---- running a layer on the tape for one sample ----

pub fn on_tape<F>(x: &Mat, f: F) -> Mat
where
    F: FnOnce(&Tape, &[smate::autodiff::Var]) -> Vec<smate::autodiff::Var>,
{
    let tape = Tape::new();
    let t = to_tensor(x);
    let seq = batch_sequence(&tape, &[&t]).unwrap();
    let out = f(&tape, &seq);
    to_mat(&unbatch_sequence(&tape, &out)[0])
}

/// Fresh layers with every parameter, biases included, set to noise.
pub fn random_gru(store: &mut ParamStore, d_in: usize, d_g: usize, seed: u64) -> GruCell {
    let mut r = rng(seed);
    let cell = GruCell::new(store, "g", d_in, d_g, &mut r).unwrap();
    for id in cell.param_ids() {
        randomize(store, id, &mut r);
    }
    cell
}

pub fn random_fc(store: &mut ParamStore, d_in: usize, d_out: usize, act: Activation, seed: u64) -> Fc {
    let mut r = rng(seed);
    let layer = Fc::new(store, "fc", d_in, d_out, act, &mut r);
    randomize(store, layer.bias, &mut r);
    layer
}

pub fn random_smb(store: &mut ParamStore, window: usize, d: usize, seed: u64) -> SmbBlock {
    let mut r = rng(seed);
    let block = SmbBlock::new(store, "smb", window, d, &mut r).unwrap();
    for id in block.param_ids() {
        randomize(store, id, &mut r);
    }
    block
}

pub fn random_conv(store: &mut ParamStore, window: usize, d_in: usize, d_c: usize, seed: u64) -> ConvBlock {
    let mut r = rng(seed);
    let mut block = ConvBlock::new(store, "conv", window, d_in, d_c, &mut r).unwrap();
    for id in block.param_ids() {
        randomize(store, id, &mut r);
    }
    block.bn_running_mean = Tensor::vector((0..d_c).map(|_| r.gen_range(-0.5..0.5)).collect());
    block.bn_running_var = Tensor::vector((0..d_c).map(|_| r.gen_range(0.5..2.0)).collect());
    block
}

pub mod checks;
pub mod conformance;
pub mod props;
