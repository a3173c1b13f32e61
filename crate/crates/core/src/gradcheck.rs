//! Finite-difference verification of every tape op, layer and loss.
//!
//! Each check builds a scalar from the op's outputs (a fixed random
//! weighting of every output element, or the loss itself), differentiates it
//! on the tape and compares against central differences. The error measure
//! is `|analytic - numeric| / max(1, |numeric|)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::Result;
use crate::layers::{
    avg_pool1d, batch_norm, fc_apply, Activation, BatchNormMode, ConvBlock, GruCell, SmbBlock,
};
use crate::model::{batch_objective, reconstruction_loss_seq, SmateConfig, SmateModel};
use crate::params::{ParamId, ParamStore};
use crate::regularizer::on_tape;
use crate::tensor::Tensor;

type Build = Box<dyn Fn(&Tape, &ParamStore, &[Var]) -> Result<Var>>;

/// One differentiable computation to verify.
pub struct Problem {
    pub store: ParamStore,
    pub inputs: Vec<Tensor>,
    pub build: Build,
    /// Check at most this many randomly chosen coordinates.
    pub max_coords: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Random instances per row.
    pub cases: usize,
    pub seed: u64,
    /// Adds a row for a custom op with a deliberately wrong backward rule.
    pub include_corrupted: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            cases: 10,
            seed: 0,
            include_corrupted: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
    pub tolerance: f64,
    pub passed: bool,
}

enum Coord {
    Input(usize, usize),
    Param(ParamId, usize),
}

fn evaluate(p: &Problem, store: &ParamStore, inputs: &[Tensor]) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = (p.build)(&tape, store, &vars)?;
    let v = tape.value(loss).item();
    Ok(v)
}

/// Largest relative error over the checked coordinates, and their count.
pub fn check_problem(p: &Problem, step: f64, rng: &mut impl Rng) -> Result<(f64, usize)> {
    let tape = Tape::new();
    let vars: Vec<Var> = p.inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = (p.build)(&tape, &p.store, &vars)?;
    let grads = tape.backward(loss)?;
    let mut store = p.store.clone();
    store.zero_grad();
    store.accumulate(&grads);

    let mut coords = Vec::new();
    for (i, t) in p.inputs.iter().enumerate() {
        coords.extend((0..t.len()).map(|j| Coord::Input(i, j)));
    }
    for (id, param) in p.store.iter() {
        coords.extend((0..param.value.len()).map(|j| Coord::Param(id, j)));
    }
    if let Some(limit) = p.max_coords {
        coords.shuffle(rng);
        coords.truncate(limit);
    }

    let mut worst = 0.0f64;
    for c in &coords {
        let (analytic, numeric) = match *c {
            Coord::Input(i, j) => {
                let analytic = grads
                    .wrt(vars[i])
                    .map_or(0.0, |g| g.data()[j]);
                let mut inputs = p.inputs.clone();
                let x = inputs[i].data()[j];
                inputs[i].data_mut()[j] = x + step;
                let plus = evaluate(p, &p.store, &inputs)?;
                inputs[i].data_mut()[j] = x - step;
                let minus = evaluate(p, &p.store, &inputs)?;
                (analytic, (plus - minus) / (2.0 * step))
            }
            Coord::Param(id, j) => {
                let analytic = store.get(id).gradient.data()[j];
                let mut perturbed = p.store.clone();
                let x = perturbed.get(id).value.data()[j];
                perturbed.get_mut(id).value.data_mut()[j] = x + step;
                let plus = evaluate(p, &perturbed, &p.inputs)?;
                perturbed.get_mut(id).value.data_mut()[j] = x - step;
                let minus = evaluate(p, &perturbed, &p.inputs)?;
                (analytic, (plus - minus) / (2.0 * step))
            }
        };
        let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok((worst, coords.len()))
}

fn normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect())
        .expect("positive shape")
}

fn positive(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.5..2.0)).collect())
        .expect("positive shape")
}

/// `Σ w ⊙ y` over every output, with weights drawn from `seed`.
fn project(tape: &Tape, outs: &[Var], seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total: Option<Var> = None;
    for &y in outs {
        let w = tape.constant(normal(&mut rng, &tape.shape(y)));
        let s = tape.sum(tape.mul(y, w)?)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    Ok(total.expect("at least one output"))
}

/// A problem over plain inputs whose output is projected to a scalar.
fn op_problem(
    inputs: Vec<Tensor>,
    seed: u64,
    f: impl Fn(&Tape, &[Var]) -> Result<Vec<Var>> + 'static,
) -> Problem {
    Problem {
        store: ParamStore::new(),
        inputs,
        build: Box::new(move |tape, _, v| project(tape, &f(tape, v)?, seed)),
        max_coords: None,
    }
}

/// Splits a `[T·B x d]` input into `T` steps of `[B x d]`.
fn steps(tape: &Tape, x: Var, t_len: usize) -> Result<Vec<Var>> {
    let b = tape.shape(x)[0] / t_len;
    (0..t_len)
        .map(|t| tape.gather_rows(x, &(t * b..(t + 1) * b).collect::<Vec<_>>()))
        .collect()
}

fn square_forward(x: &Tensor) -> Tensor {
    x.map(|v| v * v)
}

fn square_backward(x: &Tensor, _y: &Tensor, g: &Tensor) -> Tensor {
    x.zip_map(g, |x, g| 2.0 * x * g)
}

fn square_backward_wrong(x: &Tensor, _y: &Tensor, g: &Tensor) -> Tensor {
    x.zip_map(g, |x, g| x * g)
}

pub const SQUARE: CustomOp = CustomOp {
    name: "square",
    forward: square_forward,
    backward: square_backward,
};

/// Negative control: the backward rule is off by a factor of two.
pub const CORRUPTED_SQUARE: CustomOp = CustomOp {
    name: "square_corrupted",
    forward: square_forward,
    backward: square_backward_wrong,
};

type Generator = fn(&mut ChaCha8Rng) -> Problem;

fn generators() -> Vec<(&'static str, Generator)> {
    vec![
        ("matmul", |r| {
            let s = r.gen();
            op_problem(vec![normal(r, &[3, 4]), normal(r, &[4, 2])], s, |t, v| Ok(vec![t.matmul(v[0], v[1])?]))
        }),
        ("add", |r| {
            let s = r.gen();
            op_problem(vec![normal(r, &[3, 2]), normal(r, &[3, 2])], s, |t, v| Ok(vec![t.add(v[0], v[1])?]))
        }),
        ("sub", |r| {
            let s = r.gen();
            op_problem(vec![normal(r, &[3, 2]), normal(r, &[3, 2])], s, |t, v| Ok(vec![t.sub(v[0], v[1])?]))
        }),
        ("mul", |r| {
            let s = r.gen();
            op_problem(vec![normal(r, &[3, 2]), normal(r, &[3, 2])], s, |t, v| Ok(vec![t.mul(v[0], v[1])?]))
        }),
        ("div", |r| {
            let s = r.gen();
            let mut b = positive(r, &[3, 2]);
            let signs: Vec<bool> = (0..6).map(|_| r.gen()).collect();
            for (x, neg) in b.data_mut().iter_mut().zip(signs) {
                if neg {
                    *x = -*x;
                }
            }
            op_problem(vec![normal(r, &[3, 2]), b], s, |t, v| Ok(vec![t.div(v[0], v[1])?]))
        }),
        ("scale", |r| {
            let s = r.gen();
            let c: f64 = r.sample(StandardNormal);
            op_problem(vec![normal(r, &[2, 3])], s, move |t, v| Ok(vec![t.scale(v[0], c)?]))
        }),
        ("add_scalar", |r| {
            let s = r.gen();
            let c: f64 = r.sample(StandardNormal);
            op_problem(vec![normal(r, &[2, 3])], s, move |t, v| Ok(vec![t.add_scalar(v[0], c)?]))
        }),
        ("sigmoid", |r| {
            let s = r.gen();
            op_problem(vec![normal(r, &[2, 3])], s, |t, v| Ok(vec![t.sigmoid(v[0])?]))
        }),
        ("tanh", |r| {
            let s = r.gen();
            op_problem(vec![normal(r, &[2, 3])], s, |t, v| Ok(vec![t.tanh(v[0])?]))
        }),
        ("relu", |r| {
            let s = r.gen();
            op_problem(vec![normal(r, &[2, 3])], s, |t, v| Ok(vec![t.relu(v[0])?]))
        }),
        ("ln", |r| {
            let s = r.gen();
            op_problem(vec![positive(r, &[2, 3])], s, |t, v| Ok(vec![t.ln(v[0])?]))
        }),
        ("sqrt", |r| {
            let s = r.gen();
            op_problem(vec![positive(r, &[2, 3])], s, |t, v| Ok(vec![t.sqrt(v[0])?]))
        }),
        ("sum", |r| {
            let s = r.gen();
            op_problem(vec![normal(r, &[2, 3])], s, |t, v| Ok(vec![t.sum(v[0])?]))
        }),
        ("mean", |r| {
            let s = r.gen();
            op_problem(vec![normal(r, &[2, 3])], s, |t, v| Ok(vec![t.mean(v[0])?]))
        }),
        ("reshape", |r| {
            let s = r.gen();
            op_problem(vec![normal(r, &[2, 3])], s, |t, v| Ok(vec![t.reshape(v[0], &[3, 2])?]))
        }),
        ("tile_rows", |r| {
            let s = r.gen();
            op_problem(vec![normal(r, &[3])], s, |t, v| Ok(vec![t.tile_rows(v[0], 4)?]))
        }),
        ("tile_cols", |r| {
            let s = r.gen();
            op_problem(vec![normal(r, &[3])], s, |t, v| Ok(vec![t.tile_cols(v[0], 2)?]))
        }),
        ("sum_rows", |r| {
            let s = r.gen();
            op_problem(vec![normal(r, &[4, 3])], s, |t, v| Ok(vec![t.sum_rows(v[0])?]))
        }),
        ("row_norms", |r| {
            let s = r.gen();
            op_problem(vec![normal(r, &[4, 3])], s, |t, v| Ok(vec![t.row_norms(v[0])?]))
        }),
        ("concat_cols", |r| {
            let s = r.gen();
            op_problem(vec![normal(r, &[3, 2]), normal(r, &[3, 1])], s, |t, v| {
                Ok(vec![t.concat_cols(&[v[0], v[1], v[0]])?])
            })
        }),
        ("concat_rows", |r| {
            let s = r.gen();
            op_problem(vec![normal(r, &[2, 3]), normal(r, &[1, 3])], s, |t, v| {
                Ok(vec![t.concat_rows(&[v[1], v[0]])?])
            })
        }),
        ("gather_rows", |r| {
            let s = r.gen();
            op_problem(vec![normal(r, &[3, 2])], s, |t, v| Ok(vec![t.gather_rows(v[0], &[2, 0, 2])?]))
        }),
        ("pick", |r| {
            let s = r.gen();
            op_problem(vec![normal(r, &[3, 2])], s, |t, v| Ok(vec![t.pick(v[0], &[1, 0, 1])?]))
        }),
        ("spread", |r| {
            let s = r.gen();
            op_problem(vec![normal(r, &[5])], s, |t, v| Ok(vec![t.spread(v[0], &[0, 2, 0, 1, 2], 3)?]))
        }),
        ("slice0", |r| {
            let s = r.gen();
            op_problem(vec![normal(r, &[3, 2, 2])], s, |t, v| Ok(vec![t.slice0(v[0], 1)?]))
        }),
        ("pairwise_distances", |r| {
            let s = r.gen();
            op_problem(vec![normal(r, &[4, 3]), normal(r, &[2, 3])], s, |t, v| {
                Ok(vec![t.pairwise_distances(v[0], v[1])?])
            })
        }),
        ("ratio_scores", |r| {
            let s = r.gen();
            op_problem(vec![positive(r, &[4, 3])], s, |t, v| Ok(vec![t.ratio_scores(v[0], 1e-12)?]))
        }),
        ("custom", |r| {
            let s = r.gen();
            op_problem(vec![normal(r, &[2, 2])], s, |t, v| Ok(vec![t.custom(SQUARE, v[0])?]))
        }),
        ("gru_step", |r| {
            let s = r.gen();
            let mut store = ParamStore::new();
            let cell = GruCell::new(&mut store, "g", 3, 4, r).expect("valid dims");
            randomize_biases(&mut store, r);
            Problem {
                store,
                inputs: vec![normal(r, &[2, 3]), normal(r, &[2, 4])],
                build: Box::new(move |t, st, v| {
                    let bound = cell.bind(t, st, 2)?;
                    project(t, &[bound.step(t, v[0], v[1])?], s)
                }),
                max_coords: None,
            }
        }),
        ("gru_layer", |r| {
            let s = r.gen();
            let mut store = ParamStore::new();
            let cell = GruCell::new(&mut store, "g", 2, 3, r).expect("valid dims");
            randomize_biases(&mut store, r);
            Problem {
                store,
                inputs: vec![normal(r, &[8, 2])],
                build: Box::new(move |t, st, v| {
                    let seq = steps(t, v[0], 4)?;
                    project(t, &cell.layer(t, st, &seq)?, s)
                }),
                max_coords: None,
            }
        }),
        ("conv1d", |r| {
            let s = r.gen();
            let mut store = ParamStore::new();
            let block = ConvBlock::new(&mut store, "c", 3, 2, 3, r).expect("valid dims");
            randomize_biases(&mut store, r);
            Problem {
                store,
                inputs: vec![normal(r, &[10, 2])],
                build: Box::new(move |t, st, v| {
                    let seq = steps(t, v[0], 5)?;
                    project(t, &block.convolve(t, st, &seq)?, s)
                }),
                max_coords: None,
            }
        }),
        ("batch_norm_train", |r| {
            let s = r.gen();
            op_problem(
                vec![normal(r, &[6, 3]), positive(r, &[3]), normal(r, &[3])],
                s,
                |t, v| {
                    let seq = steps(t, v[0], 3)?;
                    Ok(batch_norm(t, &seq, v[1], v[2], BatchNormMode::Train, 1e-5)?.0)
                },
            )
        }),
        ("batch_norm_inference", |r| {
            let s = r.gen();
            let mean = normal(r, &[3]);
            let var = positive(r, &[3]);
            op_problem(
                vec![normal(r, &[6, 3]), positive(r, &[3]), normal(r, &[3])],
                s,
                move |t, v| {
                    let seq = steps(t, v[0], 3)?;
                    let mode = BatchNormMode::Inference { mean: &mean, var: &var };
                    Ok(batch_norm(t, &seq, v[1], v[2], mode, 1e-5)?.0)
                },
            )
        }),
        ("conv_block", |r| {
            let s = r.gen();
            let mut store = ParamStore::new();
            let block = ConvBlock::new(&mut store, "c", 3, 2, 3, r).expect("valid dims");
            randomize_biases(&mut store, r);
            Problem {
                store,
                inputs: vec![normal(r, &[10, 2])],
                build: Box::new(move |t, st, v| {
                    let seq = steps(t, v[0], 5)?;
                    let mut b = block.clone();
                    project(t, &b.forward(t, st, &seq, true)?, s)
                }),
                max_coords: None,
            }
        }),
        ("avg_pool1d", |r| {
            let s = r.gen();
            op_problem(vec![normal(r, &[10, 2])], s, |t, v| {
                let seq = steps(t, v[0], 5)?;
                avg_pool1d(t, &seq, 2)
            })
        }),
        ("smb", |r| {
            let s = r.gen();
            let mut store = ParamStore::new();
            let block = SmbBlock::with_reduction(&mut store, "s", 3, 4, 2, r).expect("valid dims");
            randomize_biases(&mut store, r);
            Problem {
                store,
                inputs: vec![normal(r, &[8, 4])],
                build: Box::new(move |t, st, v| {
                    let seq = steps(t, v[0], 4)?;
                    let out = block.forward(t, st, &seq)?;
                    let mut all = out.calibrated;
                    all.extend(out.weights);
                    project(t, &all, s)
                }),
                max_coords: None,
            }
        }),
        ("fc_none", |r| fc_problem(r, Activation::None)),
        ("fc_relu", |r| fc_problem(r, Activation::Relu)),
        ("fc_sigmoid", |r| fc_problem(r, Activation::Sigmoid)),
        ("reconstruction_loss", |r| Problem {
            store: ParamStore::new(),
            inputs: vec![normal(r, &[6, 3]), normal(r, &[6, 3])],
            build: Box::new(|t, _, v| {
                let x = steps(t, v[0], 3)?;
                let y = steps(t, v[1], 3)?;
                reconstruction_loss_seq(t, &x, &y)
            }),
            max_coords: None,
        }),
        ("regularization_loss", |r| {
            let min_score = if r.gen() { None } else { Some(0.3) };
            Problem {
                store: ParamStore::new(),
                inputs: vec![normal(r, &[5, 4]), normal(r, &[3, 4])],
                build: Box::new(move |t, _, v| {
                    let classes = [0, 1, 2, 0, 1];
                    let init = on_tape::init(t, v[0], &classes, 3, None)?;
                    let sup = on_tape::adjust_supervised(t, &init, v[0], &classes)?;
                    let cs = on_tape::adjust_unsupervised(t, &sup, Some(v[1]), min_score)?;
                    on_tape::loss(t, v[0], &classes, cs.matrix)
                }),
                max_coords: None,
            }
        }),
        ("model_end_to_end", |r| {
            let mut c = SmateConfig::new(6, 2);
            c.gru_dim = 3;
            c.conv_filters = 3;
            c.embed_dim = 2;
            c.head_dim = 3;
            c.pool = 2;
            c.seed = r.gen();
            let mut model = SmateModel::new(c).expect("valid config");
            randomize_biases(&mut model.store, r);
            let store = model.store.clone();
            let samples = [normal(r, &[6, 2]), normal(r, &[6, 2])];
            Problem {
                store,
                inputs: vec![],
                build: Box::new(move |t, st, _| {
                    let mut m = model.clone();
                    m.store = st.clone();
                    let refs: Vec<&Tensor> = samples.iter().collect();
                    Ok(batch_objective(&m, t, &refs, &[Some(0), Some(1)], 2, None)?.total)
                }),
                max_coords: Some(10),
            }
        }),
    ]
}

/// Nonzero biases so that no gradient path is trivially symmetric.
fn randomize_biases(store: &mut ParamStore, rng: &mut impl Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        if p.value.rank() == 1 {
            let shape = p.value.shape().to_vec();
            let noise = normal(rng, &shape).map(|x| 0.3 * x);
            p.value.add_assign(&noise);
        }
    }
}

fn fc_problem(r: &mut ChaCha8Rng, act: Activation) -> Problem {
    let s = r.gen();
    op_problem(
        vec![normal(r, &[4, 3]), normal(r, &[3, 2]), normal(r, &[2])],
        s,
        move |t, v| Ok(vec![fc_apply(t, v[1], v[2], v[0], act)?]),
    )
}

/// Runs every check `opts.cases` times and reports the worst case per row.
pub fn run_suite(opts: &GradcheckOptions) -> Result<Vec<CheckRow>> {
    let mut gens = generators();
    if opts.include_corrupted {
        gens.push(("square_corrupted", |r| {
            let s = r.gen();
            op_problem(vec![normal(r, &[2, 2])], s, |t, v| Ok(vec![t.custom(CORRUPTED_SQUARE, v[0])?]))
        }));
    }
    let mut rows = Vec::with_capacity(gens.len());
    for (k, (name, gen)) in gens.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(1_000_003).wrapping_add(k as u64));
        let mut worst = 0.0f64;
        let mut coords = 0;
        for _ in 0..opts.cases.max(1) {
            let problem = gen(&mut rng);
            let (err, n) = check_problem(&problem, opts.step, &mut rng)?;
            worst = worst.max(err);
            coords += n;
        }
        rows.push(CheckRow {
            name: name.to_string(),
            max_rel_error: worst,
            coords,
            tolerance: opts.tolerance,
            passed: worst < opts.tolerance,
        });
    }
    Ok(rows)
}

pub fn format_table(rows: &[CheckRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(2).max(2);
    let mut out = format!("{:<width$}  {:>12}  {:>7}  status\n", "op", "max_rel_err", "coords");
    for r in rows {
        out.push_str(&format!(
            "{:<width$}  {:>12.3e}  {:>7}  {}\n",
            r.name,
            r.max_rel_error,
            r.coords,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    out
}
