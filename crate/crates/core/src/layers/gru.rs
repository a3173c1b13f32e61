use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SmateError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

use super::batch_of;

/// Gated recurrent unit in row-vector convention (`x W + h U + b`).
#[derive(Clone, Debug)]
pub struct GruCell {
    pub d_in: usize,
    pub d_g: usize,
    pub w_r: ParamId,
    pub w_z: ParamId,
    pub w_h: ParamId,
    pub u_r: ParamId,
    pub u_z: ParamId,
    pub u_h: ParamId,
    pub b_r: ParamId,
    pub b_z: ParamId,
    pub b_h: ParamId,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_g: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if d_in == 0 || d_g == 0 {
            return Err(SmateError::Config(format!(
                "{prefix}: GRU dimensions must be positive (d_in={d_in}, d_g={d_g})"
            )));
        }
        let mut w = |store: &mut ParamStore, name: &str, rows: usize| {
            store.add_glorot(format!("{prefix}.{name}"), &[rows, d_g], rows, d_g, rng)
        };
        let w_r = w(store, "W_r", d_in);
        let w_z = w(store, "W_z", d_in);
        let w_h = w(store, "W_h", d_in);
        let u_r = w(store, "U_r", d_g);
        let u_z = w(store, "U_z", d_g);
        let u_h = w(store, "U_h", d_g);
        let mut b = |name: &str| store.add(format!("{prefix}.{name}"), Tensor::zeros(&[d_g]));
        let b_r = b("b_r");
        let b_z = b("b_z");
        let b_h = b("b_h");
        Ok(GruCell {
            d_in,
            d_g,
            w_r,
            w_z,
            w_h,
            u_r,
            u_z,
            u_h,
            b_r,
            b_z,
            b_h,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 9] {
        [
            self.w_r, self.w_z, self.w_h, self.u_r, self.u_z, self.u_h, self.b_r, self.b_z,
            self.b_h,
        ]
    }

    /// Puts the cell's parameters on `tape`, with biases tiled to `batch` rows.
    pub fn bind(&self, tape: &Tape, store: &ParamStore, batch: usize) -> Result<BoundGru> {
        let p = |id| tape.param(store, id);
        Ok(BoundGru {
            d_in: self.d_in,
            d_g: self.d_g,
            batch,
            w: [p(self.w_r), p(self.w_z), p(self.w_h)],
            u: [p(self.u_r), p(self.u_z), p(self.u_h)],
            b: [
                tape.tile_rows(p(self.b_r), batch)?,
                tape.tile_rows(p(self.b_z), batch)?,
                tape.tile_rows(p(self.b_h), batch)?,
            ],
        })
    }

    /// Full hidden-state sequence from a zero initial state.
    pub fn layer(&self, tape: &Tape, store: &ParamStore, seq: &[Var]) -> Result<Vec<Var>> {
        let (batch, _) = batch_of(tape, seq, "gru_layer")?;
        self.bind(tape, store, batch)?.layer(tape, seq)
    }
}

/// A [`GruCell`] whose parameters already live on a tape.
pub struct BoundGru {
    d_in: usize,
    d_g: usize,
    batch: usize,
    w: [Var; 3],
    u: [Var; 3],
    b: [Var; 3],
}

impl BoundGru {
    /// `r = σ(x W_r + h U_r + b_r)`, `z = σ(x W_z + h U_z + b_z)`,
    /// `h' = (1 - z) ⊙ h + z ⊙ tanh(x W_h + (h ⊙ r) U_h + b_h)`.
    pub fn step(&self, tape: &Tape, x: Var, h_prev: Var) -> Result<Var> {
        let xs = tape.shape(x);
        let hs = tape.shape(h_prev);
        if xs != [self.batch, self.d_in] || hs != [self.batch, self.d_g] {
            return Err(SmateError::dim("gru_step", &xs, &hs));
        }
        let gate = |i: usize, h: Var| -> Result<Var> {
            let xw = tape.matmul(x, self.w[i])?;
            let hu = tape.matmul(h, self.u[i])?;
            let pre = tape.add(xw, hu)?;
            tape.add(pre, self.b[i])
        };
        let r = tape.sigmoid(gate(0, h_prev)?)?;
        let z = tape.sigmoid(gate(1, h_prev)?)?;
        let reset_h = tape.mul(h_prev, r)?;
        let candidate = tape.tanh(gate(2, reset_h)?)?;
        let neg_z = tape.scale(z, -1.0)?;
        let keep = tape.add_scalar(neg_z, 1.0)?;
        let kept = tape.mul(keep, h_prev)?;
        let fresh = tape.mul(z, candidate)?;
        tape.add(kept, fresh)
    }

    pub fn zero_state(&self, tape: &Tape) -> Var {
        tape.constant(Tensor::zeros(&[self.batch, self.d_g]))
    }

    pub fn layer(&self, tape: &Tape, seq: &[Var]) -> Result<Vec<Var>> {
        if seq.is_empty() {
            return Err(SmateError::Contract("gru_layer: empty sequence".into()));
        }
        let mut h = self.zero_state(tape);
        let mut out = Vec::with_capacity(seq.len());
        for &x in seq {
            h = self.step(tape, x, h)?;
            out.push(h);
        }
        Ok(out)
    }
}
