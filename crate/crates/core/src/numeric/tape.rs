//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order of the graph and backward is a single reverse sweep.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    AddBias(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    Embedding(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        scale: f64,
    },
    BinaryCrossEntropy {
        logits: Var,
        targets: Vec<f64>,
        scale: f64,
    },
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation against an immutable parameter store.
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    train: bool,
    rng: Option<ChaCha8Rng>,
}

/// Gradients produced by [`Tape::backward`]; owns its buffers so the tape
/// (and its borrow of the parameter store) can be dropped before applying.
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, n)| self.by_node[n].as_deref())
    }

    /// Adds every parameter gradient into the store's grad buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for &(id, node) in &self.params {
            if let Some(g) = &self.by_node[node] {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

impl<'p> Tape<'p> {
    /// An inference tape: dropout is the identity.
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            train: false,
            rng: None,
        }
    }

    /// A training tape with a seeded generator for dropout masks.
    pub fn training(store: &'p ParamStore, rng: ChaCha8Rng) -> Self {
        Tape {
            train: true,
            rng: Some(rng),
            ..Tape::new(store)
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    /// Hands back the dropout generator so its stream can continue on the
    /// next tape.
    pub fn into_rng(self) -> Option<ChaCha8Rng> {
        self.rng
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.value(v).data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: &'static str, t: Tensor, kind: Op, parents: &[Var]) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite(op.to_string()));
        }
        let needs_grad = parents.iter().any(|&p| self.needs(p));
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: kind,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; gradients flow into it only if the tensor was
    /// created with `requires_grad`.
    pub fn input(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.input(t.with_requires_grad(false))
    }

    /// Parameter leaf; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}×{k}] · [{k2}×{n}]")));
        }
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        self.push(
            "matmul",
            Tensor::new(&[m, n], out)?,
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let out = kernels::transpose(self.data(a), m, n);
        self.push(
            "transpose",
            Tensor::new(&[n, m], out)?,
            Op::Transpose(a),
            &[a],
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    /// `scale · x + shift`, elementwise with constants.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let t = self.map(a, |x| scale * x + shift);
        self.push("affine", t, Op::Affine(a, scale), &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, s, 0.0)
    }

    /// Adds a bias vector (`[n]` or `[1×n]`) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(bias).len() != n {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for input {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        let t = Tensor::new(self.shape(x), data)?;
        self.push("add_bias", t, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, f64::tanh);
        self.push("tanh", t, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, kernels::sigmoid);
        self.push("sigmoid", t, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, |x| x.max(0.0));
        self.push("relu", t, Op::Relu(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} for {shape:?}"),
            ));
        }
        let out = kernels::softmax(self.data(a), &shape, axis);
        self.push(
            "softmax",
            Tensor::new(&shape, out)?,
            Op::Softmax(a, axis),
            &[a],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let axis = self.shape(a).len() - 1;
        self.softmax(a, axis)
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// elementwise affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape("layer_norm", "affine width mismatch"));
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = Vec::with_capacity(self.value(x).len());
        let mut inv_std = Vec::new();
        for row in self.data(x).chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|v| (v - mean) * is));
        }
        let out = xhat
            .chunks(n)
            .flat_map(|r| r.iter().enumerate().map(|(j, v)| v * g[j] + b[j]))
            .collect();
        let t = Tensor::new(self.shape(x), out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Inverted dropout; the identity on inference tapes or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
        }
        if !self.train || rate == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).len();
        let rng = self.rng.as_mut().expect("training tape has a generator");
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(self.shape(x), data)?;
        self.push("dropout", t, Op::Dropout(x, mask), &[x])
    }

    /// Gathers rows of a 2-d table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, h) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(Error::shape("embedding", "no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= rows {
                return Err(Error::OutOfRange {
                    what: "embedding table",
                    index: id,
                    size: rows,
                });
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let t = Tensor::new(&[ids.len(), h], out)?;
        self.push("embedding", t, Op::Embedding(table, ids.to_vec()), &[table])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "nothing to concatenate"));
        };
        let n = self.value(first).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, c) = self.value(p).dims2()?;
            if c != n {
                return Err(Error::shape("concat_rows", format!("widths {n} vs {c}")));
            }
            rows += m;
            out.extend_from_slice(self.data(p));
        }
        let t = Tensor::new(&[rows, n], out)?;
        self.push("concat_rows", t, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if len == 0 || start + len > m {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {m}", start + len),
            ));
        }
        let out = self.data(x)[start * n..(start + len) * n].to_vec();
        let t = Tensor::new(&[len, n], out)?;
        self.push("slice_rows", t, Op::SliceRows(x, start), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if len == 0 || start + len > n {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} of {n}", start + len),
            ));
        }
        let out = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let t = Tensor::new(&[m, len], out)?;
        self.push("slice_cols", t, Op::SliceCols(x, start), &[x])
    }

    /// Column means of a 2-d tensor → `[1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let mut out = vec![0.0; n];
        for row in self.data(x).chunks(n) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let t = Tensor::new(&[1, n], out)?;
        self.push("mean_rows", t, Op::MeanRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.push("sum", t, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / v.len() as f64);
        self.push("mean", t, Op::Mean(x), &[x])
    }

    /// Softmax cross-entropy of `logits [T×V]` against per-row targets;
    /// `None` rows are ignored. Mean reduction divides by the number of
    /// counted rows.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        reduction: Reduction,
    ) -> Result<Var> {
        let (t, v) = self.value(logits).dims2()?;
        if targets.len() != t {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {t} rows", targets.len()),
            ));
        }
        let mut probs = Vec::with_capacity(t * v);
        let mut total = 0.0;
        let mut count = 0usize;
        for (row, target) in self.data(logits).chunks(v).zip(targets) {
            let logp = kernels::log_softmax_row(row);
            if let Some(y) = *target {
                if y >= v {
                    return Err(Error::OutOfRange {
                        what: "cross_entropy vocabulary",
                        index: y,
                        size: v,
                    });
                }
                total -= logp[y];
                count += 1;
            }
            probs.extend(logp.iter().map(|l| l.exp()));
        }
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean if count == 0 => 0.0,
            Reduction::Mean => 1.0 / count as f64,
        };
        let out = Tensor::scalar(total * scale);
        self.push(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                scale,
            },
            &[logits],
        )
    }

    /// Sigmoid binary cross-entropy with soft or hard targets in [0,1].
    pub fn binary_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[f64],
        reduction: Reduction,
    ) -> Result<Var> {
        let n = self.value(logits).len();
        if targets.len() != n {
            return Err(Error::shape(
                "binary_cross_entropy",
                format!("{} targets for {n} logits", targets.len()),
            ));
        }
        let total: f64 = self
            .data(logits)
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / n as f64,
        };
        let out = Tensor::scalar(total * scale);
        self.push(
            "binary_cross_entropy",
            out,
            Op::BinaryCrossEntropy {
                logits,
                targets: targets.to_vec(),
                scale,
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(p, v)| v.map(|v| (ParamId(p), v.0)))
            .collect();
        Ok(Gradients {
            by_node: grads,
            params,
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.value(Var(i));
        let mut give = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("2-d");
                let n = self.value(*b).cols();
                if self.needs(*a) {
                    give(*a, kernels::matmul_nt(g, self.data(*b), m, n, k));
                }
                if self.needs(*b) {
                    give(*b, kernels::matmul_tn(self.data(*a), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = out.dims2().expect("2-d");
                give(*a, kernels::transpose(g, m, n));
            }
            Op::Add(a, b) => {
                give(*a, g.to_vec());
                give(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                give(*a, g.to_vec());
                give(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                give(*a, g.iter().zip(db).map(|(g, y)| g * y).collect());
                give(*b, g.iter().zip(da).map(|(g, x)| g * x).collect());
            }
            Op::Affine(a, s) => give(*a, g.iter().map(|v| v * s).collect()),
            Op::AddBias(x, bias) => {
                give(*x, g.to_vec());
                let n = out.cols();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                give(*bias, db);
            }
            Op::Tanh(a) => give(
                *a,
                g.iter()
                    .zip(out.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect(),
            ),
            Op::Sigmoid(a) => give(
                *a,
                g.iter()
                    .zip(out.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect(),
            ),
            Op::Relu(a) => give(
                *a,
                g.iter()
                    .zip(self.data(*a))
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = kernels::axis_split(out.shape(), *axis);
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + k;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            dx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                give(*a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let gam = self.data(*gamma);
                let mut dx = vec![0.0; xhat.len()];
                let mut dg = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for (r, (grow, xrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                    let dxhat: Vec<f64> = grow.iter().zip(gam).map(|(g, w)| g * w).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx =
                        dxhat.iter().zip(xrow).map(|(d, x)| d * x).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[r * n + j] = inv_std[r] * (dxhat[j] - mean_d - xrow[j] * mean_dx);
                        dg[j] += grow[j] * xrow[j];
                        dbeta[j] += grow[j];
                    }
                }
                give(*x, dx);
                give(*gamma, dg);
                give(*beta, dbeta);
            }
            Op::Dropout(a, mask) => give(*a, g.iter().zip(mask).map(|(g, m)| g * m).collect()),
            Op::Embedding(table, ids) => {
                let tv = self.value(*table);
                let h = tv.cols();
                let mut dt = vec![0.0; tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id * h..(id + 1) * h];
                    dst.iter_mut()
                        .zip(&g[r * h..(r + 1) * h])
                        .for_each(|(d, v)| *d += v);
                }
                give(*table, dt);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    give(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::SliceRows(x, start) => {
                let xv = self.value(*x);
                let n = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                dx[start * n..start * n + g.len()].copy_from_slice(g);
                give(*x, dx);
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let n = xv.cols();
                let len = out.cols();
                let mut dx = vec![0.0; xv.len()];
                for (r, grow) in g.chunks(len).enumerate() {
                    dx[r * n + start..r * n + start + len].copy_from_slice(grow);
                }
                give(*x, dx);
            }
            Op::MeanRows(x) => {
                let (m, _) = self.value(*x).dims2().expect("2-d");
                let row: Vec<f64> = g.iter().map(|v| v / m as f64).collect();
                give(*x, row.repeat(m));
            }
            Op::Sum(x) => give(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                give(*x, vec![g[0] / n as f64; n]);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                scale,
            } => {
                let v = self.value(*logits).cols();
                let s = g[0] * scale;
                let mut dx = vec![0.0; probs.len()];
                for (r, target) in targets.iter().enumerate() {
                    if let Some(y) = *target {
                        for j in 0..v {
                            dx[r * v + j] = s * probs[r * v + j];
                        }
                        dx[r * v + y] -= s;
                    }
                }
                give(*logits, dx);
            }
            Op::BinaryCrossEntropy {
                logits,
                targets,
                scale,
            } => {
                let s = g[0] * scale;
                give(
                    *logits,
                    self.data(*logits)
                        .iter()
                        .zip(targets)
                        .map(|(&x, &y)| s * (kernels::sigmoid(x) - y))
                        .collect(),
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let i2 = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let v = tape.constant(t(&[2, 1], &[5.0, 7.0]));
        let y = tape.matmul(p, v).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && (0.0..1e-300).contains(&d[1]));
    }

    #[test]
    fn uniform_cross_entropy_is_log_classes() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        for target in 0..4 {
            let l = tape
                .cross_entropy(x, &[Some(target)], Reduction::Mean)
                .unwrap();
            assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);
        }
        assert!(matches!(
            tape.cross_entropy(x, &[Some(4)], Reduction::Mean),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::full(&[1, 5], 3.25));
        let g = tape.constant(Tensor::full(&[5], 1.0));
        let b = tape.constant(Tensor::zeros(&[5]));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sigmoid_of_zero() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::zeros(&[1]));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5]);
    }

    #[test]
    fn dropout_is_identity_at_inference() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::full(&[3, 3], 2.0));
        let y = tape.dropout(x, 0.5).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn backward_of_sum_and_square() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::full(&[2, 3], 7.0).with_requires_grad(true));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new(&store);
        let x = tape.input(t(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::zeros(&[2]).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn repeated_backward_accumulates_into_store() {
        let mut store = ParamStore::new();
        let w = store.insert("w", t(&[2], &[1.0, -1.0])).unwrap();
        for _ in 0..2 {
            let grads = {
                let mut tape = Tape::new(&store);
                let v = tape.param(w);
                let s = tape.sum(v).unwrap();
                tape.backward(s).unwrap()
            };
            grads.accumulate_into(&mut store).unwrap();
        }
        assert_eq!(store.get(w).grad().unwrap(), &[2.0, 2.0]);
        store.zero_grad();
        assert!(store.get(w).grad().is_none());
    }

    #[test]
    fn shared_subexpression_matches_duplicated_graph() {
        // y = (a·b) used twice versus two independent copies of a·b.
        let a = t(&[2, 2], &[0.3, -1.2, 0.7, 2.0]);
        let b = t(&[2, 2], &[1.1, 0.4, -0.5, 0.9]);
        let store = ParamStore::new();

        let mut tape = Tape::new(&store);
        let av = tape.input(a.clone().with_requires_grad(true));
        let bv = tape.constant(b.clone());
        let c = tape.matmul(av, bv).unwrap();
        let th = tape.tanh(c).unwrap();
        let prod = tape.mul(c, th).unwrap();
        let loss = tape.sum(prod).unwrap();
        let shared = tape.backward(loss).unwrap().wrt(av).unwrap().to_vec();

        let mut tape = Tape::new(&store);
        let av = tape.input(a.with_requires_grad(true));
        let bv = tape.constant(b);
        let c1 = tape.matmul(av, bv).unwrap();
        let c2 = tape.matmul(av, bv).unwrap();
        let th = tape.tanh(c2).unwrap();
        let prod = tape.mul(c1, th).unwrap();
        let loss = tape.sum(prod).unwrap();
        let dup = tape.backward(loss).unwrap().wrt(av).unwrap().to_vec();

        for (x, y) in shared.iter().zip(&dup) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::full(&[1], 1e300));
        assert!(matches!(tape.mul(x, x), Err(Error::NonFinite(_))));
    }
}
