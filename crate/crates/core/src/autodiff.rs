//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation as a node holding its output value and
//! the ids of its inputs. Inputs always precede the node that consumes them,
//! so the node list is already in topological order and the backward sweep is
//! a single reverse walk. The tape is rebuilt for every training step.
//!
//! Broadcasting is never implicit: binary element-wise ops demand identical
//! shapes and every shape adaptation goes through an explicit op such as
//! [`Tape::tile_rows`] or [`Tape::reshape`].

use std::cell::{Ref, RefCell};

use crate::error::{Result, SmateError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_nt, matmul_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// A user-supplied unary op with an explicit backward rule.
#[derive(Clone, Copy)]
pub struct CustomOp {
    pub name: &'static str,
    pub forward: fn(&Tensor) -> Tensor,
    /// `(input, output, upstream) -> input gradient`
    pub backward: fn(&Tensor, &Tensor, &Tensor) -> Tensor,
}

impl std::fmt::Debug for CustomOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CustomOp({})", self.name)
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    Sigmoid,
    Tanh,
    Relu,
    Ln,
    Sqrt,
    Sum,
    Mean,
    Reshape(Vec<usize>),
    TileRows(usize),
    TileCols(usize),
    SumRows,
    RowNorms,
    ConcatCols,
    ConcatRows,
    GatherRows(Vec<usize>),
    Pick(Vec<usize>),
    Spread { groups: Vec<usize>, k: usize },
    Slice0(usize),
    PairwiseDistances,
    RatioScores { eps: f64 },
    Custom(CustomOp),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Ln => "ln",
            Op::Sqrt => "sqrt",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Reshape(_) => "reshape",
            Op::TileRows(_) => "tile_rows",
            Op::TileCols(_) => "tile_cols",
            Op::SumRows => "sum_rows",
            Op::RowNorms => "row_norms",
            Op::ConcatCols => "concat_cols",
            Op::ConcatRows => "concat_rows",
            Op::GatherRows(_) => "gather_rows",
            Op::Pick(_) => "pick",
            Op::Spread { .. } => "spread",
            Op::Slice0(_) => "slice0",
            Op::PairwiseDistances => "pairwise_distances",
            Op::RatioScores { .. } => "ratio_scores",
            Op::Custom(c) => c.name,
        }
    }

    fn forward(&self, ins: &[&Tensor]) -> Result<Tensor> {
        let name = self.name();
        let same = |a: &Tensor, b: &Tensor| -> Result<()> {
            if a.shape() != b.shape() {
                Err(SmateError::dim(name, a.shape(), b.shape()))
            } else {
                Ok(())
            }
        };
        let rank2 = |t: &Tensor| -> Result<(usize, usize)> {
            if t.rank() != 2 {
                Err(SmateError::dim(name, t.shape(), &[0, 0]))
            } else {
                Ok((t.shape()[0], t.shape()[1]))
            }
        };
        match self {
            Op::Leaf => Err(SmateError::Contract("leaf has no forward rule".into())),
            Op::MatMul => ins[0].matmul(ins[1]),
            Op::Add => {
                same(ins[0], ins[1])?;
                Ok(ins[0].zip_map(ins[1], |a, b| a + b))
            }
            Op::Sub => {
                same(ins[0], ins[1])?;
                Ok(ins[0].zip_map(ins[1], |a, b| a - b))
            }
            Op::Mul => {
                same(ins[0], ins[1])?;
                Ok(ins[0].zip_map(ins[1], |a, b| a * b))
            }
            Op::Div => {
                same(ins[0], ins[1])?;
                Ok(ins[0].zip_map(ins[1], |a, b| a / b))
            }
            Op::Scale(c) => Ok(ins[0].map(|a| a * c)),
            Op::AddScalar(c) => Ok(ins[0].map(|a| a + c)),
            Op::Sigmoid => Ok(ins[0].map(sigmoid)),
            Op::Tanh => Ok(ins[0].map(f64::tanh)),
            Op::Relu => Ok(ins[0].map(|a| a.max(0.0))),
            Op::Ln => Ok(ins[0].map(f64::ln)),
            Op::Sqrt => Ok(ins[0].map(f64::sqrt)),
            Op::Sum => Ok(Tensor::scalar(ins[0].sum())),
            Op::Mean => Ok(Tensor::scalar(ins[0].sum() / ins[0].len() as f64)),
            Op::Reshape(shape) => ins[0].reshape(shape),
            Op::TileRows(n) => {
                let x = ins[0];
                if x.rows() != 1 || *n == 0 {
                    return Err(SmateError::dim(name, x.shape(), &[*n]));
                }
                let mut data = Vec::with_capacity(n * x.len());
                for _ in 0..*n {
                    data.extend_from_slice(x.data());
                }
                Tensor::new(vec![*n, x.len()], data)
            }
            Op::TileCols(c) => {
                let x = ins[0];
                if x.rank() != 1 || *c == 0 {
                    return Err(SmateError::dim(name, x.shape(), &[*c]));
                }
                let data = x
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v, *c))
                    .collect();
                Tensor::new(vec![x.len(), *c], data)
            }
            Op::SumRows => {
                let (n, d) = rank2(ins[0])?;
                let mut out = vec![0.0; d];
                for i in 0..n {
                    for (o, v) in out.iter_mut().zip(ins[0].row(i)) {
                        *o += v;
                    }
                }
                Tensor::new(vec![d], out)
            }
            Op::RowNorms => {
                let (n, _) = rank2(ins[0])?;
                let out = (0..n)
                    .map(|i| ins[0].row(i).iter().fold(0.0, |a, v| a + v * v).sqrt())
                    .collect();
                Tensor::new(vec![n], out)
            }
            Op::ConcatCols => {
                let n = rank2(ins[0])?.0;
                let mut total = 0;
                for t in ins {
                    let (r, c) = rank2(t)?;
                    if r != n {
                        return Err(SmateError::dim(name, ins[0].shape(), t.shape()));
                    }
                    total += c;
                }
                let mut data = Vec::with_capacity(n * total);
                for i in 0..n {
                    for t in ins {
                        data.extend_from_slice(t.row(i));
                    }
                }
                Tensor::new(vec![n, total], data)
            }
            Op::ConcatRows => {
                let d = rank2(ins[0])?.1;
                let mut rows = 0;
                let mut data = Vec::new();
                for t in ins {
                    let (r, c) = rank2(t)?;
                    if c != d {
                        return Err(SmateError::dim(name, ins[0].shape(), t.shape()));
                    }
                    rows += r;
                    data.extend_from_slice(t.data());
                }
                Tensor::new(vec![rows, d], data)
            }
            Op::GatherRows(idx) => {
                let (n, d) = rank2(ins[0])?;
                if idx.is_empty() || idx.iter().any(|&i| i >= n) {
                    return Err(SmateError::Contract(format!(
                        "gather_rows: indices {idx:?} out of range for {n} rows"
                    )));
                }
                let mut data = Vec::with_capacity(idx.len() * d);
                for &i in idx {
                    data.extend_from_slice(ins[0].row(i));
                }
                Tensor::new(vec![idx.len(), d], data)
            }
            Op::Pick(idx) => {
                let (n, k) = rank2(ins[0])?;
                if idx.len() != n || idx.iter().any(|&j| j >= k) {
                    return Err(SmateError::Contract(format!(
                        "pick: {} indices for a {n}x{k} input",
                        idx.len()
                    )));
                }
                let out = idx.iter().enumerate().map(|(i, &j)| ins[0].at(i, j)).collect();
                Tensor::new(vec![n], out)
            }
            Op::Spread { groups, k } => {
                let x = ins[0];
                if x.rank() != 1 || groups.len() != x.len() || groups.iter().any(|&g| g >= *k) {
                    return Err(SmateError::dim(name, x.shape(), &[groups.len()]));
                }
                let n = x.len();
                let mut out = vec![0.0; k * n];
                for (i, (&g, &v)) in groups.iter().zip(x.data()).enumerate() {
                    out[g * n + i] = v;
                }
                Tensor::new(vec![*k, n], out)
            }
            Op::Slice0(i) => {
                let x = ins[0];
                if x.rank() < 2 || *i >= x.shape()[0] {
                    return Err(SmateError::dim(name, x.shape(), &[*i]));
                }
                let inner: usize = x.shape()[1..].iter().product();
                Tensor::new(
                    x.shape()[1..].to_vec(),
                    x.data()[i * inner..(i + 1) * inner].to_vec(),
                )
            }
            Op::PairwiseDistances => {
                let (n, f) = rank2(ins[0])?;
                let (k, f2) = rank2(ins[1])?;
                if f != f2 {
                    return Err(SmateError::dim(name, ins[0].shape(), ins[1].shape()));
                }
                let mut out = Vec::with_capacity(n * k);
                for i in 0..n {
                    let e = ins[0].row(i);
                    for j in 0..k {
                        let c = ins[1].row(j);
                        let sq = e.iter().zip(c).fold(0.0, |a, (x, y)| a + (x - y) * (x - y));
                        out.push(sq.sqrt());
                    }
                }
                Tensor::new(vec![n, k], out)
            }
            Op::RatioScores { eps } => {
                let (n, k) = rank2(ins[0])?;
                let mut out = Vec::with_capacity(n * k);
                for i in 0..n {
                    let row = ins[0].row(i);
                    let total = row.iter().fold(0.0, |a, v| a + v);
                    if total == 0.0 {
                        out.extend(std::iter::repeat_n((k as f64 - 1.0) / k as f64, k));
                    } else {
                        out.extend(row.iter().map(|d| 1.0 - d / (total + eps)));
                    }
                }
                Tensor::new(vec![n, k], out)
            }
            Op::Custom(c) => Ok((c.forward)(ins[0])),
        }
    }

    fn backward(
        &self,
        ins: &[&Tensor],
        out: &Tensor,
        g: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let want = |i: usize| needs.get(i).copied().unwrap_or(false);
        match self {
            Op::Leaf => vec![],
            Op::MatMul => {
                let (p, q) = (ins[0].shape()[0], ins[0].shape()[1]);
                let r = ins[1].shape()[1];
                let da = want(0).then(|| {
                    Tensor::new(vec![p, q], matmul_nt(g.data(), ins[1].data(), p, q, r)).unwrap()
                });
                let db = want(1).then(|| {
                    Tensor::new(vec![q, r], matmul_tn(ins[0].data(), g.data(), p, q, r)).unwrap()
                });
                vec![da, db]
            }
            Op::Add => vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())],
            Op::Sub => vec![want(0).then(|| g.clone()), want(1).then(|| g.map(|v| -v))],
            Op::Mul => vec![
                want(0).then(|| g.zip_map(ins[1], |a, b| a * b)),
                want(1).then(|| g.zip_map(ins[0], |a, b| a * b)),
            ],
            Op::Div => vec![
                want(0).then(|| g.zip_map(ins[1], |a, b| a / b)),
                want(1).then(|| {
                    let t = g.zip_map(out, |a, y| a * y);
                    t.zip_map(ins[1], |a, b| -a / b)
                }),
            ],
            Op::Scale(c) => vec![Some(g.map(|v| v * c))],
            Op::AddScalar(_) => vec![Some(g.clone())],
            Op::Sigmoid => vec![Some(g.zip_map(out, |a, y| a * y * (1.0 - y)))],
            Op::Tanh => vec![Some(g.zip_map(out, |a, y| a * (1.0 - y * y)))],
            Op::Relu => vec![Some(g.zip_map(ins[0], |a, x| if x > 0.0 { a } else { 0.0 }))],
            Op::Ln => vec![Some(g.zip_map(ins[0], |a, x| a / x))],
            Op::Sqrt => vec![Some(g.zip_map(out, |a, y| a / (2.0 * y)))],
            Op::Sum => vec![Some(Tensor::filled(ins[0].shape(), g.item()))],
            Op::Mean => vec![Some(Tensor::filled(
                ins[0].shape(),
                g.item() / ins[0].len() as f64,
            ))],
            Op::Reshape(_) => vec![Some(g.reshape(ins[0].shape()).unwrap())],
            Op::TileRows(n) => {
                let d = ins[0].len();
                let mut acc = vec![0.0; d];
                for i in 0..*n {
                    for (a, v) in acc.iter_mut().zip(&g.data()[i * d..(i + 1) * d]) {
                        *a += v;
                    }
                }
                vec![Some(Tensor::new(ins[0].shape().to_vec(), acc).unwrap())]
            }
            Op::TileCols(c) => {
                let acc = (0..ins[0].len())
                    .map(|i| g.data()[i * c..(i + 1) * c].iter().fold(0.0, |a, v| a + v))
                    .collect();
                vec![Some(Tensor::new(ins[0].shape().to_vec(), acc).unwrap())]
            }
            Op::SumRows => {
                let n = ins[0].shape()[0];
                let mut data = Vec::with_capacity(ins[0].len());
                for _ in 0..n {
                    data.extend_from_slice(g.data());
                }
                vec![Some(Tensor::new(ins[0].shape().to_vec(), data).unwrap())]
            }
            Op::RowNorms => {
                let x = ins[0];
                let d = x.cols();
                let mut data = vec![0.0; x.len()];
                for i in 0..x.rows() {
                    let norm = out.data()[i];
                    if norm > 0.0 {
                        let s = g.data()[i] / norm;
                        for (o, v) in data[i * d..(i + 1) * d].iter_mut().zip(x.row(i)) {
                            *o = s * v;
                        }
                    }
                }
                vec![Some(Tensor::new(x.shape().to_vec(), data).unwrap())]
            }
            Op::ConcatCols => {
                let n = out.shape()[0];
                let total = out.shape()[1];
                let mut offset = 0;
                ins.iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let c = t.shape()[1];
                        let res = want(j).then(|| {
                            let mut data = Vec::with_capacity(n * c);
                            for i in 0..n {
                                data.extend_from_slice(
                                    &g.data()[i * total + offset..i * total + offset + c],
                                );
                            }
                            Tensor::new(vec![n, c], data).unwrap()
                        });
                        offset += c;
                        res
                    })
                    .collect()
            }
            Op::ConcatRows => {
                let mut offset = 0;
                ins.iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let len = t.len();
                        let res = want(j).then(|| {
                            Tensor::new(
                                t.shape().to_vec(),
                                g.data()[offset..offset + len].to_vec(),
                            )
                            .unwrap()
                        });
                        offset += len;
                        res
                    })
                    .collect()
            }
            Op::GatherRows(idx) => {
                let d = ins[0].cols();
                let mut acc = Tensor::zeros(ins[0].shape());
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut acc.data_mut()[i * d..(i + 1) * d];
                    for (a, v) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *a += v;
                    }
                }
                vec![Some(acc)]
            }
            Op::Pick(idx) => {
                let k = ins[0].cols();
                let mut acc = Tensor::zeros(ins[0].shape());
                for (i, &j) in idx.iter().enumerate() {
                    acc.data_mut()[i * k + j] = g.data()[i];
                }
                vec![Some(acc)]
            }
            Op::Spread { groups, .. } => {
                let n = groups.len();
                let data = groups
                    .iter()
                    .enumerate()
                    .map(|(i, &gr)| g.data()[gr * n + i])
                    .collect();
                vec![Some(Tensor::new(vec![n], data).unwrap())]
            }
            Op::Slice0(i) => {
                let inner = out.len();
                let mut acc = Tensor::zeros(ins[0].shape());
                acc.data_mut()[i * inner..(i + 1) * inner].copy_from_slice(g.data());
                vec![Some(acc)]
            }
            Op::PairwiseDistances => {
                let (e, c) = (ins[0], ins[1]);
                let (n, f) = (e.shape()[0], e.shape()[1]);
                let k = c.shape()[0];
                let mut de = vec![0.0; n * f];
                let mut dc = vec![0.0; k * f];
                for i in 0..n {
                    for j in 0..k {
                        let dist = out.data()[i * k + j];
                        if dist == 0.0 {
                            continue;
                        }
                        let s = g.data()[i * k + j] / dist;
                        for t in 0..f {
                            let diff = e.data()[i * f + t] - c.data()[j * f + t];
                            de[i * f + t] += s * diff;
                            dc[j * f + t] -= s * diff;
                        }
                    }
                }
                vec![
                    want(0).then(|| Tensor::new(vec![n, f], de).unwrap()),
                    want(1).then(|| Tensor::new(vec![k, f], dc).unwrap()),
                ]
            }
            Op::RatioScores { eps } => {
                let d = ins[0];
                let (n, k) = (d.shape()[0], d.shape()[1]);
                let mut acc = vec![0.0; n * k];
                for i in 0..n {
                    let row = d.row(i);
                    let total = row.iter().fold(0.0, |a, v| a + v);
                    if total == 0.0 {
                        continue;
                    }
                    let denom = total + eps;
                    let gr = &g.data()[i * k..(i + 1) * k];
                    let cross = gr.iter().zip(row).fold(0.0, |a, (gk, dk)| a + gk * dk);
                    for j in 0..k {
                        acc[i * k + j] = -gr[j] / denom + cross / (denom * denom);
                    }
                }
                vec![Some(Tensor::new(vec![n, k], acc).unwrap())]
            }
            Op::Custom(c) => vec![Some((c.backward)(ins[0], out, g))],
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient for a leaf created with [`Tape::input`] or [`Tape::param`].
    /// `None` means the leaf did not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn params(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor>)> + '_ {
        self.params
            .iter()
            .map(move |&(pid, node)| (pid, self.leaves[node].as_ref()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
            param,
        });
        Var(nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_leaf(value, false, None)
    }

    /// A differentiable leaf that is not a model parameter.
    pub fn input(&self, value: Tensor) -> Var {
        self.push_leaf(value, true, None)
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        self.push_leaf(store.get(id).value.clone(), true, Some(id))
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn apply(&self, op: Op, inputs: &[Var]) -> Result<Var> {
        let mut nodes = self.nodes.borrow_mut();
        let value = {
            let ins: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
            op.forward(&ins)?
        };
        if !value.is_finite() {
            return Err(SmateError::NonFinite {
                op: op.name().to_string(),
            });
        }
        let requires_grad = inputs.iter().any(|v| nodes[v.0].requires_grad);
        nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.0).collect(),
            value,
            requires_grad,
            param: None,
        });
        Ok(Var(nodes.len() - 1))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Div, &[a, b])
    }
    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }
    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::AddScalar(c), &[a])
    }
    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[a])
    }
    pub fn relu(&self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }
    pub fn ln(&self, a: Var) -> Result<Var> {
        self.apply(Op::Ln, &[a])
    }
    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.apply(Op::Sqrt, &[a])
    }
    /// Sum of all entries into a rank-0 tensor.
    pub fn sum(&self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }
    pub fn mean(&self, a: Var) -> Result<Var> {
        self.apply(Op::Mean, &[a])
    }
    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }
    /// `[d]` (or `[1 x d]`) to `[n x d]` by repeating the row.
    pub fn tile_rows(&self, a: Var, n: usize) -> Result<Var> {
        self.apply(Op::TileRows(n), &[a])
    }
    /// `[n]` to `[n x c]` by repeating each entry across a row.
    pub fn tile_cols(&self, a: Var, c: usize) -> Result<Var> {
        self.apply(Op::TileCols(c), &[a])
    }
    /// Column sums of `[n x d]`, giving `[d]`.
    pub fn sum_rows(&self, a: Var) -> Result<Var> {
        self.apply(Op::SumRows, &[a])
    }
    /// Euclidean norm of each row of `[n x d]`, giving `[n]`.
    pub fn row_norms(&self, a: Var) -> Result<Var> {
        self.apply(Op::RowNorms, &[a])
    }
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(SmateError::Contract("concat_cols of nothing".into()));
        }
        self.apply(Op::ConcatCols, parts)
    }
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(SmateError::Contract("concat_rows of nothing".into()));
        }
        self.apply(Op::ConcatRows, parts)
    }
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        self.apply(Op::GatherRows(idx.to_vec()), &[a])
    }
    /// `out[i] = a[i, idx[i]]`.
    pub fn pick(&self, a: Var, idx: &[usize]) -> Result<Var> {
        self.apply(Op::Pick(idx.to_vec()), &[a])
    }
    /// `[n]` to `[k x n]` with `out[groups[i], i] = a[i]` and zeros elsewhere.
    pub fn spread(&self, a: Var, groups: &[usize], k: usize) -> Result<Var> {
        self.apply(
            Op::Spread {
                groups: groups.to_vec(),
                k,
            },
            &[a],
        )
    }
    /// Index `i` along the leading axis.
    pub fn slice0(&self, a: Var, i: usize) -> Result<Var> {
        self.apply(Op::Slice0(i), &[a])
    }
    /// Euclidean distances between rows of `[n x f]` and rows of `[k x f]`.
    pub fn pairwise_distances(&self, e: Var, c: Var) -> Result<Var> {
        self.apply(Op::PairwiseDistances, &[e, c])
    }
    /// Row-wise `1 - d_k / (sum_j d_j + eps)`; an all-zero row maps to `(k-1)/k`.
    pub fn ratio_scores(&self, d: Var, eps: f64) -> Result<Var> {
        self.apply(Op::RatioScores { eps }, &[d])
    }
    pub fn custom(&self, op: CustomOp, a: Var) -> Result<Var> {
        self.apply(Op::Custom(op), &[a])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(SmateError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));
        let mut leaves: Vec<Option<Tensor>> = Vec::new();
        leaves.resize_with(nodes.len(), || None);

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                leaves[id] = Some(g);
                continue;
            }
            let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &nodes[i].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let input_grads = node.op.backward(&ins, &node.value, &g, &needs);
            for (slot, ig) in node.inputs.iter().zip(input_grads) {
                if !nodes[*slot].requires_grad {
                    continue;
                }
                let Some(ig) = ig else { continue };
                match &mut grads[*slot] {
                    Some(acc) => acc.add_assign(&ig),
                    empty => *empty = Some(ig),
                }
            }
        }

        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { leaves, params })
    }

    /// Recomputes every non-leaf node from the recorded inputs.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<Tensor> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => {
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &values[i]).collect();
                    op.forward(&ins)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Values currently stored on the tape, in node order.
    pub fn recorded_values(&self) -> Vec<Tensor> {
        self.nodes.borrow().iter().map(|n| n.value.clone()).collect()
    }

    /// Distinct op kinds on the tape.
    pub fn op_kinds(&self) -> Vec<&'static str> {
        let mut kinds: Vec<&'static str> =
            self.nodes.borrow().iter().map(|n| n.op.name()).collect();
        kinds.sort_unstable();
        kinds.dedup();
        kinds
    }
}
