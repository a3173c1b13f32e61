use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SmateError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
}

/// Row-wise affine map `x W + b` followed by an activation.
#[derive(Clone, Debug)]
pub struct Fc {
    pub d_in: usize,
    pub d_out: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

impl Fc {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_glorot(format!("{prefix}.W"), &[d_in, d_out], d_in, d_out, rng);
        let bias = store.add(format!("{prefix}.b"), Tensor::zeros(&[d_out]));
        Fc {
            d_in,
            d_out,
            weight,
            bias,
            activation,
        }
    }

    pub fn bind(&self, tape: &Tape, store: &ParamStore) -> (Var, Var) {
        (tape.param(store, self.weight), tape.param(store, self.bias))
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = self.bind(tape, store);
        fc_apply(tape, w, b, x, self.activation)
    }

    /// Applies the layer to every step, sharing one copy of the parameters.
    pub fn forward_seq(&self, tape: &Tape, store: &ParamStore, seq: &[Var]) -> Result<Vec<Var>> {
        let (w, b) = self.bind(tape, store);
        let mut tiled: Option<(usize, Var)> = None;
        seq.iter()
            .map(|&x| {
                let rows = tape.shape(x)[0];
                let bias = match tiled {
                    Some((r, v)) if r == rows => v,
                    _ => {
                        let v = tape.tile_rows(b, rows)?;
                        tiled = Some((rows, v));
                        v
                    }
                };
                let xw = tape.matmul(x, w)?;
                activate(tape, tape.add(xw, bias)?, self.activation)
            })
            .collect()
    }
}

/// `activation(x W + b)` for `x: [n x d_in]`, `W: [d_in x d_out]`, `b: [d_out]`.
pub fn fc_apply(tape: &Tape, w: Var, b: Var, x: Var, activation: Activation) -> Result<Var> {
    let xs = tape.shape(x);
    let ws = tape.shape(w);
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || tape.shape(b) != [ws[1]] {
        return Err(SmateError::dim("fc", &xs, &ws));
    }
    let xw = tape.matmul(x, w)?;
    let bias = tape.tile_rows(b, xs[0])?;
    activate(tape, tape.add(xw, bias)?, activation)
}

fn activate(tape: &Tape, v: Var, activation: Activation) -> Result<Var> {
    match activation {
        Activation::None => Ok(v),
        Activation::Relu => tape.relu(v),
        Activation::Sigmoid => tape.sigmoid(v),
    }
}
