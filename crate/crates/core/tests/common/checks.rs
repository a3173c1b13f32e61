//! Library-versus-oracle comparisons. Every check runs `INSTANCES` random
//! cases and returns the largest absolute deviation seen.

use rand::Rng;

use smate::layers::{avg_pool1d, Activation};
use smate::model::{reconstruction_loss, SmateConfig, SmateModel};
use smate::params::ParamStore;
use smate::regularizer::{
    adjust_supervised, adjust_unsupervised, class_scores, init_centroids, regularization_loss,
};
use smate::tensor::Tensor;

use super::*;

pub const INSTANCES: u64 = 6;

fn worst(f: impl Fn(u64) -> f64) -> f64 {
    (0..INSTANCES).map(f).fold(0.0, f64::max)
}

pub fn matmul_check() -> f64 {
    worst(|seed| {
        let mut r = rng(seed);
        let (p, q, s) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
        let a = random_mat(&mut r, p, q);
        let b = random_mat(&mut r, q, s);
        let got = to_mat(&to_tensor(&a).matmul(&to_tensor(&b)).unwrap());
        max_diff(&got, &matmul(&a, &b))
    })
}

pub fn gru_check() -> f64 {
    worst(|seed| {
        let mut r = rng(100 + seed);
        let (d_in, d_g) = (r.gen_range(1..4), r.gen_range(1..4));
        let mut store = ParamStore::new();
        let cell = random_gru(&mut store, d_in, d_g, seed);
        let x = random_mat(&mut r, 5, d_in);
        let got = on_tape(&x, |tape, seq| cell.layer(tape, &store, seq).unwrap());
        max_diff(&got, &gru_layer(&GruWeights::from_cell(&store, &cell), &x))
    })
}

pub fn conv_check() -> f64 {
    worst(|seed| {
        let mut r = rng(200 + seed);
        let window = [1, 2, 3, 4, 5][seed as usize % 5];
        let (d_in, d_c) = (r.gen_range(1..4), r.gen_range(1..4));
        let mut store = ParamStore::new();
        let block = random_conv(&mut store, window, d_in, d_c, seed);
        let x = random_mat(&mut r, 8, d_in);
        let w = ConvWeights::from_block(&store, &block);
        let raw = on_tape(&x, |tape, seq| block.convolve(tape, &store, seq).unwrap());
        let frozen = on_tape(&x, |tape, seq| block.forward_frozen(tape, &store, seq).unwrap());
        let conv = conv_same(&x, &w.kernel, &w.bias);
        let expect = relu(&batch_norm_inference(&conv, &w.gamma, &w.beta, &w.running_mean, &w.running_var, w.eps));
        max_diff(&raw, &conv).max(max_diff(&frozen, &expect))
    })
}

/// Training-mode block over a batch of three samples, including the running
/// statistics update.
pub fn conv_train_check() -> f64 {
    worst(|seed| {
        let mut r = rng(300 + seed);
        let (d_in, d_c) = (2, 3);
        let mut store = ParamStore::new();
        let mut block = random_conv(&mut store, 3, d_in, d_c, seed);
        let w = ConvWeights::from_block(&store, &block);
        let xs: Vec<Mat> = (0..3).map(|_| random_mat(&mut r, 6, d_in)).collect();
        let tape = Tape::new();
        let ts: Vec<Tensor> = xs.iter().map(to_tensor).collect();
        let refs: Vec<&Tensor> = ts.iter().collect();
        let seq = batch_sequence(&tape, &refs).unwrap();
        let out = block.forward(&tape, &store, &seq, true).unwrap();
        let got = unbatch_sequence(&tape, &out);
        let convs: Vec<Mat> = xs.iter().map(|x| conv_same(x, &w.kernel, &w.bias)).collect();
        let (normed, mean, var) = batch_norm_train(&convs, &w.gamma, &w.beta, w.eps);
        let mut err: f64 = 0.0;
        for (g, n) in got.iter().zip(&normed) {
            err = err.max(max_diff(&to_mat(g), &relu(n)));
        }
        for c in 0..d_c {
            let m = 0.9 * w.running_mean[c] + 0.1 * mean[c];
            let v = 0.9 * w.running_var[c] + 0.1 * var[c];
            err = err.max((block.bn_running_mean.data()[c] - m).abs());
            err = err.max((block.bn_running_var.data()[c] - v).abs());
        }
        err
    })
}

pub fn pool_check() -> f64 {
    worst(|seed| {
        let mut r = rng(400 + seed);
        let t_len = r.gen_range(1..12);
        let p = r.gen_range(1..6);
        let x = random_mat(&mut r, t_len, 3);
        let got = on_tape(&x, |tape, seq| avg_pool1d(tape, seq, p).unwrap());
        max_diff(&got, &avg_pool(&x, p))
    })
}

pub fn smb_check() -> f64 {
    worst(|seed| {
        let mut r = rng(500 + seed);
        let window = [1, 2, 3, 4, 5, 7][seed as usize % 6];
        let d = r.gen_range(2..6);
        let mut store = ParamStore::new();
        let block = random_smb(&mut store, window, d, seed);
        let x = random_mat(&mut r, 6, d);
        let (cal, weights) = smb(&SmbWeights::from_block(&store, &block), &x);
        let got_cal = on_tape(&x, |tape, seq| block.forward(tape, &store, seq).unwrap().calibrated);
        let got_w = on_tape(&x, |tape, seq| block.forward(tape, &store, seq).unwrap().weights);
        max_diff(&got_cal, &cal).max(max_diff(&got_w, &weights))
    })
}

pub fn fc_check() -> f64 {
    worst(|seed| {
        let mut r = rng(600 + seed);
        let act = [Activation::None, Activation::Relu, Activation::Sigmoid][seed as usize % 3];
        let mut store = ParamStore::new();
        let layer = random_fc(&mut store, 4, 3, act, seed);
        let x = random_mat(&mut r, 4, 4);
        let got = on_tape(&x, |tape, seq| layer.forward_seq(tape, &store, seq).unwrap());
        let expect = fc(&x, &param_mat(&store, layer.weight), &param_vec(&store, layer.bias), act);
        max_diff(&got, &expect)
    })
}

pub fn reconstruction_check() -> f64 {
    worst(|seed| {
        let mut r = rng(700 + seed);
        let x = random_mat(&mut r, 6, 3);
        let y = random_mat(&mut r, 6, 3);
        let got = reconstruction_loss(&to_tensor(&x), &to_tensor(&y)).unwrap();
        (got - reconstruction(&x, &y)).abs()
    })
}

/// Random labeled embeddings (`L x D` each) covering every class.
fn labeled_set(r: &mut impl Rng, k: usize, per_class: usize, l: usize, d: usize) -> (Vec<Tensor>, Vec<usize>) {
    let mut es = Vec::new();
    let mut cs = Vec::new();
    for c in 0..k {
        for _ in 0..per_class {
            es.push(to_tensor(&random_mat(r, l, d)));
            cs.push(c);
        }
    }
    (es, cs)
}

fn flat(es: &[Tensor]) -> Mat {
    es.iter().map(|e| e.data().to_vec()).collect()
}

fn centroid_mat(cs: &smate::regularizer::CentroidSet) -> Mat {
    cs.centroids.iter().map(|c| c.data().to_vec()).collect()
}

pub fn init_check() -> f64 {
    worst(|seed| {
        let mut r = rng(800 + seed);
        let k = r.gen_range(2..5);
        let (es, cs) = labeled_set(&mut r, k, 3, 2, 3);
        let got = init_centroids(&es, &cs, k).unwrap();
        max_diff(&centroid_mat(&got), &class_means(&flat(&es), &cs, k))
    })
}

pub fn scores_check() -> f64 {
    worst(|seed| {
        let mut r = rng(900 + seed);
        let k = r.gen_range(2..6);
        let (es, cs) = labeled_set(&mut r, k, 1, 2, 3);
        let set = init_centroids(&es, &cs, k).unwrap();
        let h = to_tensor(&random_mat(&mut r, 2, 3));
        let got = class_scores(&h, &set).unwrap().scores;
        max_diff(&vec![got], &vec![scores(h.data(), &centroid_mat(&set))])
    })
}

pub fn supervised_check() -> f64 {
    worst(|seed| {
        let mut r = rng(1000 + seed);
        let k = r.gen_range(2..4);
        let (es, cs) = labeled_set(&mut r, k, 3, 2, 2);
        let init = init_centroids(&es, &cs, k).unwrap();
        let got = adjust_supervised(&init, &es, &cs).unwrap();
        max_diff(&centroid_mat(&got), &supervised(&centroid_mat(&init), &flat(&es), &cs))
    })
}

pub fn unsupervised_check() -> f64 {
    worst(|seed| {
        let mut r = rng(1100 + seed);
        let k = r.gen_range(2..4);
        let (es, cs) = labeled_set(&mut r, k, 2, 2, 2);
        let unlabeled: Vec<Tensor> = (0..5).map(|_| to_tensor(&random_mat(&mut r, 2, 2))).collect();
        let init = init_centroids(&es, &cs, k).unwrap();
        let sup = adjust_supervised(&init, &es, &cs).unwrap();
        let got = adjust_unsupervised(&sup, &unlabeled, None).unwrap();
        let (expect, counts) = unsupervised(&centroid_mat(&sup), &flat(&unlabeled), &sup.labeled_counts);
        assert_eq!(got.propagated_counts, counts);
        max_diff(&centroid_mat(&got), &expect)
    })
}

pub fn loss_check() -> f64 {
    worst(|seed| {
        let mut r = rng(1200 + seed);
        let k = r.gen_range(2..4);
        let (es, cs) = labeled_set(&mut r, k, 2, 2, 2);
        let init = init_centroids(&es, &cs, k).unwrap();
        let sup = adjust_supervised(&init, &es, &cs).unwrap();
        let got = regularization_loss(&es, &cs, &sup).unwrap();
        (got - reg_loss(&flat(&es), &cs, &centroid_mat(&sup))).abs()
    })
}

fn randomized_model(seed: u64, use_smb: bool) -> SmateModel {
    let mut c = SmateConfig::new(7, 3);
    c.gru_dim = 3;
    c.conv_filters = 4;
    c.embed_dim = 2;
    c.head_dim = 5;
    c.pool = 2;
    c.use_smb = use_smb;
    c.seed = seed;
    let mut model = SmateModel::new(c).unwrap();
    let mut r = rng(seed + 77);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        randomize(&mut model.store, id, &mut r);
    }
    for conv in &mut model.convs {
        let d = conv.d_c;
        conv.bn_running_mean = Tensor::vector((0..d).map(|_| r.gen_range(-0.5..0.5)).collect());
        conv.bn_running_var = Tensor::vector((0..d).map(|_| r.gen_range(0.5..2.0)).collect());
    }
    model
}

fn encoder_oracle(m: &SmateModel, x: &Mat) -> Mat {
    let s = &m.store;
    let p = m.config.pool;
    let mut temporal = x.clone();
    for g in &m.grus {
        temporal = gru_layer(&GruWeights::from_cell(s, g), &temporal);
    }
    let temporal = avg_pool(&temporal, p);
    let mut spatial = x.clone();
    for (i, conv) in m.convs.iter().enumerate() {
        if let Some(block) = m.smbs.get(i) {
            spatial = smb(&SmbWeights::from_block(s, block), &spatial).0;
        }
        let w = ConvWeights::from_block(s, conv);
        let raw = conv_same(&spatial, &w.kernel, &w.bias);
        spatial = relu(&batch_norm_inference(&raw, &w.gamma, &w.beta, &w.running_mean, &w.running_var, w.eps));
    }
    let spatial = avg_pool(&spatial, p);
    let concat: Mat = temporal
        .iter()
        .zip(&spatial)
        .map(|(a, b)| a.iter().chain(b).copied().collect())
        .collect();
    let hidden = fc(&concat, &param_mat(s, m.fc1.weight), &param_vec(s, m.fc1.bias), Activation::Relu);
    fc(&hidden, &param_mat(s, m.fc2.weight), &param_vec(s, m.fc2.bias), Activation::None)
}

fn decoder_oracle(m: &SmateModel, h: &Mat) -> Mat {
    let s = &m.store;
    let up: Mat = (0..m.config.series_length).map(|t| h[t / m.config.pool].clone()).collect();
    let hidden = gru_layer(&GruWeights::from_cell(s, &m.dec_gru), &up);
    fc(&hidden, &param_mat(s, m.dec_fc.weight), &param_vec(s, m.dec_fc.bias), Activation::None)
}

/// Inference-mode encoder and the decoder, against composed layer oracles.
pub fn autoencoder_check() -> f64 {
    worst(|seed| {
        let model = randomized_model(seed, seed % 2 == 0);
        let mut r = rng(1300 + seed);
        let x = random_mat(&mut r, 7, 3);
        let h = model.encode(&to_tensor(&x)).unwrap();
        let e = max_diff(&to_mat(&h), &encoder_oracle(&model, &x));
        let y = model.decode(&h).unwrap();
        e.max(max_diff(&to_mat(&y), &decoder_oracle(&model, &to_mat(&h))))
    })
}

pub fn named_checks() -> Vec<(&'static str, fn() -> f64)> {
    vec![
        ("matmul", matmul_check),
        ("gru", gru_check),
        ("conv", conv_check),
        ("conv_train", conv_train_check),
        ("avg_pool", pool_check),
        ("smb", smb_check),
        ("fc", fc_check),
        ("reconstruction", reconstruction_check),
        ("centroid_init", init_check),
        ("class_scores", scores_check),
        ("supervised_adjust", supervised_check),
        ("unsupervised_adjust", unsupervised_check),
        ("regularization_loss", loss_check),
        ("autoencoder", autoencoder_check),
    ]
}
