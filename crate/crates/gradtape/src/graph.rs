//! Tape of primitive operations and the reverse sweep over it.
//!
//! Every primitive appends one node holding its output value. Nodes are
//! appended in evaluation order, so the node index is a topological order and
//! `backward` simply walks the tape from the loss towards the leaves once.

use std::collections::HashMap;

use crate::error::{shape_err, GradError, Result};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax(Var),
    LogSumExp(Var),
    Gather { table: Var, idx: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanPool { x: Var, group: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    SquaredError(Var, Var),
    Cosine { a: Var, b: Var },
    L2Normalize { x: Var, norms: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, dims: kernels::AttnDims, probs: Vec<f64> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass recorded for differentiation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: HashMap<(u64, ParamId), Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<(u64, ParamId), Var>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient for every parameter of `store`, zero-filled where unreachable or frozen.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                self.params
                    .get(&(store.uid(), id))
                    .and_then(|v| self.wrt(*v))
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Constant subgraphs need no backward bookkeeping.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that is not differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node, and
    /// frozen parameters are recorded as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(v) = self.param_leaves.get(&key) {
            return *v;
        }
        let t = store.get(id).clone();
        let v = if store.is_trainable(id) {
            self.input(t)
        } else {
            self.constant(t)
        };
        self.param_leaves.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(shape_err(
                "matmul",
                format!("operands must be matrices, got {:?} and {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (kb, n) = if trans_b {
            (tb.shape()[1], tb.shape()[0])
        } else {
            (tb.shape()[0], tb.shape()[1])
        };
        if k != kb {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}{}", ta.shape(), tb.shape(), if trans_b { "ᵀ" } else { "" }),
            ));
        }
        let mut out = vec![0.0; m * n];
        let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        kernels::gemm(m, k, n, ta.data(), (k as isize, 1), tb.data(), b_strides, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`D` vector to every row of an `[N, D]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.cols();
        if tb.len() != d {
            return Err(shape_err("add_row", format!("{:?} + {:?}", tx.shape(), tb.shape())));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * c).collect())
            .expect("same shape");
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v + c).collect())
            .expect("same shape");
        self.push(t, Op::AddScalar(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v.exp()).collect())
            .expect("same shape");
        self.push(t, Op::Exp(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let mut out = vec![0.0; tx.len()];
        kernels::gelu_map(tx.data(), &mut out);
        let t = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::Gelu(x), &[x])
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.len() != d || tb.len() != d {
            return Err(shape_err(
                "layer_norm",
                format!("input {:?}, gain {:?}, bias {:?}", tx.shape(), tg.shape(), tb.shape()),
            ));
        }
        let rows = tx.len() / d.max(1);
        let mut out = vec![0.0; tx.len()];
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    /// Row-wise softmax over the trailing dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let d = tx.cols();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(d) {
            kernels::softmax_in_place(row);
        }
        let t = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::Softmax(x), &[x])
    }

    /// Row-wise log-sum-exp; `[N, D]` becomes `[N]`, a vector becomes `[1]`.
    pub fn log_sum_exp(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let d = tx.cols();
        let out: Vec<f64> = tx.data().chunks(d).map(kernels::log_sum_exp).collect();
        let n = out.len();
        let t = Tensor::new(vec![n], out).expect("vector");
        self.push(t, Op::LogSumExp(x), &[x])
    }

    /// Row lookup: `out[i] = table[idx[i]]`. Serves embedding lookup and row selection.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = (tt.rows(), tt.cols());
        if let Some(bad) = idx.iter().find(|&&i| i >= v) {
            return Err(shape_err("gather", format!("index {} out of range for {:?}", bad, tt.shape())));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![idx.len(), d], out)?;
        Ok(self.push(t, Op::Gather { table, idx: idx.to_vec() }, &[table]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no operands"));
        }
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        for p in parts {
            let t = self.value(*p);
            if t.rows() != n || t.shape().len() != 2 {
                let shapes: Vec<_> = parts.iter().map(|p| self.value(*p).shape().to_vec()).collect();
                return Err(shape_err("concat_cols", format!("{:?}", shapes)));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let t = Tensor::new(vec![n, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "no operands"));
        }
        let d = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != d {
                let shapes: Vec<_> = parts.iter().map(|p| self.value(*p).shape().to_vec()).collect();
                return Err(shape_err("concat_rows", format!("{:?}", shapes)));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let t = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Averages consecutive groups of `group` rows: `[G·group, D]` becomes `[G, D]`.
    pub fn mean_pool(&mut self, x: Var, group: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = (tx.rows(), tx.cols());
        if group == 0 || n % group != 0 {
            return Err(shape_err("mean_pool", format!("{:?} in groups of {}", tx.shape(), group)));
        }
        let g = n / group;
        let mut out = vec![0.0; g * d];
        for r in 0..n {
            let o = &mut out[(r / group) * d..(r / group + 1) * d];
            for (acc, v) in o.iter_mut().zip(tx.row(r)) {
                *acc += v;
            }
        }
        let inv = 1.0 / group as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let t = Tensor::new(vec![g, d], out)?;
        Ok(self.push(t, Op::MeanPool { x, group }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s = tx.data().iter().sum::<f64>() / tx.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean cross-entropy of row-wise logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, c) = (tl.rows(), tl.cols());
        if targets.len() != n || targets.iter().any(|&t| t >= c) {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {:?} with {} targets (max class {:?})", tl.shape(), targets.len(), targets.iter().max()),
            ));
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let lse = kernels::log_sum_exp(row);
            loss += lse - row[targets[r]];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let t = Tensor::scalar(loss / n as f64);
        Ok(self.push(t, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, &[logits]))
    }

    /// Mean of elementwise squared differences.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same("squared_error", ta, tb)?;
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
            / ta.len().max(1) as f64;
        Ok(self.push(Tensor::scalar(s), Op::SquaredError(a, b), &[a, b]))
    }

    /// Row-wise cosine similarity; `[N, D]` pairs become `[N]`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same("cosine", ta, tb)?;
        let d = ta.cols();
        let out: Vec<f64> = ta
            .data()
            .chunks(d)
            .zip(tb.data().chunks(d))
            .map(|(x, y)| kernels::cosine(x, y))
            .collect();
        let n = out.len();
        Ok(self.push(Tensor::new(vec![n], out)?, Op::Cosine { a, b }, &[a, b]))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let d = tx.cols();
        let mut out = tx.data().to_vec();
        let mut norms = Vec::with_capacity(tx.rows());
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let t = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::L2Normalize { x, norms }, &[x])
    }

    /// Multi-head scaled dot-product attention over `batch` independent
    /// sequences of `seq` rows each. `q`, `k`, `v` are `[batch·seq, width]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        check_same("attention", tq, tk)?;
        check_same("attention", tq, tv)?;
        let width = tq.cols();
        if heads == 0 || width % heads != 0 || tq.rows() != batch * seq {
            return Err(shape_err(
                "attention",
                format!("{:?} as {} sequences of {} with {} heads", tq.shape(), batch, seq, heads),
            ));
        }
        let dims = kernels::AttnDims { batch, seq, heads, width, causal };
        let (out, probs) = kernels::attention_forward(&dims, tq.data(), tk.data(), tv.data());
        let t = Tensor::new(tq.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Attention { q, k, v, dims, probs }, &[q, k, v]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(GradError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.param_leaves.clone(),
        })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = node.value.shape()[1];
                if rg(*a) {
                    // dA = dC · Bᵀ
                    let b_view = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    accumulate(&mut grads[a.0], m * k, |buf| {
                        kernels::gemm(m, n, k, g, (n as isize, 1), tb.data(), b_view, buf, 1.0)
                    });
                }
                if rg(*b) {
                    if *trans_b {
                        // d(b) = dCᵀ · A, b is [n, k]
                        accumulate(&mut grads[b.0], n * k, |buf| {
                            kernels::gemm(n, m, k, g, (1, n as isize), ta.data(), (k as isize, 1), buf, 1.0)
                        });
                    } else {
                        // dB = Aᵀ · dC, B is [k, n]
                        accumulate(&mut grads[b.0], k * n, |buf| {
                            kernels::gemm(k, m, n, ta.data(), (1, k as isize), g, (n as isize, 1), buf, 1.0)
                        });
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if rg(*v) {
                        accumulate(&mut grads[v.0], g.len(), |buf| add_into(buf, g));
                    }
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    accumulate(&mut grads[a.0], g.len(), |buf| add_into(buf, g));
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], g.len(), |buf| {
                        buf.iter_mut().zip(g).for_each(|(o, x)| *o -= x)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if rg(*a) {
                    accumulate(&mut grads[a.0], g.len(), |buf| {
                        for i in 0..g.len() {
                            buf[i] += g[i] * tb.data()[i];
                        }
                    });
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], g.len(), |buf| {
                        for i in 0..g.len() {
                            buf[i] += g[i] * ta.data()[i];
                        }
                    });
                }
            }
            Op::AddRow { x, bias } => {
                if rg(*x) {
                    accumulate(&mut grads[x.0], g.len(), |buf| add_into(buf, g));
                }
                if rg(*bias) {
                    let d = val(*bias).len();
                    accumulate(&mut grads[bias.0], d, |buf| {
                        for row in g.chunks(d) {
                            add_into(buf, row);
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                accumulate(&mut grads[x.0], g.len(), |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, v)| *o += c * v)
                });
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                accumulate(&mut grads[x.0], g.len(), |buf| add_into(buf, g));
            }
            Op::Exp(x) => {
                let y = node.value.data();
                accumulate(&mut grads[x.0], g.len(), |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * y[i];
                    }
                });
            }
            Op::Gelu(x) => {
                let tx = val(*x);
                accumulate(&mut grads[x.0], g.len(), |buf| kernels::gelu_backward(tx.data(), g, buf));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let tg = val(*gain);
                let d = tg.len();
                if rg(*x) {
                    accumulate(&mut grads[x.0], g.len(), |buf| {
                        for (r, is) in inv_std.iter().enumerate() {
                            let gr = &g[r * d..(r + 1) * d];
                            let xr = &xhat[r * d..(r + 1) * d];
                            let mut mean_gy = 0.0;
                            let mut mean_gyx = 0.0;
                            for c in 0..d {
                                let gy = gr[c] * tg.data()[c];
                                mean_gy += gy;
                                mean_gyx += gy * xr[c];
                            }
                            mean_gy /= d as f64;
                            mean_gyx /= d as f64;
                            for c in 0..d {
                                let gy = gr[c] * tg.data()[c];
                                buf[r * d + c] += is * (gy - mean_gy - xr[c] * mean_gyx);
                            }
                        }
                    });
                }
                if rg(*gain) {
                    accumulate(&mut grads[gain.0], d, |buf| {
                        for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for c in 0..d {
                                buf[c] += gr[c] * xr[c];
                            }
                        }
                    });
                }
                if rg(*bias) {
                    accumulate(&mut grads[bias.0], d, |buf| {
                        for gr in g.chunks(d) {
                            add_into(buf, gr);
                        }
                    });
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.cols();
                accumulate(&mut grads[x.0], g.len(), |buf| {
                    for ((yr, gr), br) in y.chunks(d).zip(g.chunks(d)).zip(buf.chunks_mut(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..d {
                            br[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LogSumExp(x) => {
                let tx = val(*x);
                let d = tx.cols();
                let lse = node.value.data();
                accumulate(&mut grads[x.0], tx.len(), |buf| {
                    for (r, (xr, br)) in tx.data().chunks(d).zip(buf.chunks_mut(d)).enumerate() {
                        for c in 0..d {
                            br[c] += g[r] * (xr[c] - lse[r]).exp();
                        }
                    }
                });
            }
            Op::Gather { table, idx } => {
                let tt = val(*table);
                let d = tt.cols();
                accumulate(&mut grads[table.0], tt.len(), |buf| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut buf[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let tp = val(*p);
                    let w = tp.cols();
                    if rg(*p) {
                        accumulate(&mut grads[p.0], tp.len(), |buf| {
                            for (r, br) in buf.chunks_mut(w).enumerate() {
                                add_into(br, &g[r * total + offset..r * total + offset + w]);
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).len();
                    if rg(*p) {
                        accumulate(&mut grads[p.0], n, |buf| add_into(buf, &g[offset..offset + n]));
                    }
                    offset += n;
                }
            }
            Op::MeanPool { x, group } => {
                let tx = val(*x);
                let d = tx.cols();
                let inv = 1.0 / *group as f64;
                accumulate(&mut grads[x.0], tx.len(), |buf| {
                    for (r, br) in buf.chunks_mut(d).enumerate() {
                        let gr = &g[(r / group) * d..(r / group + 1) * d];
                        for c in 0..d {
                            br[c] += gr[c] * inv;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                accumulate(&mut grads[x.0], n, |buf| buf.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                let s = g[0] / n as f64;
                accumulate(&mut grads[x.0], n, |buf| buf.iter_mut().for_each(|o| *o += s));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = val(*logits).cols();
                let s = g[0] / targets.len() as f64;
                accumulate(&mut grads[logits.0], probs.len(), |buf| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            buf[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::SquaredError(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let s = 2.0 * g[0] / ta.len() as f64;
                if rg(*a) {
                    accumulate(&mut grads[a.0], ta.len(), |buf| {
                        for i in 0..buf.len() {
                            buf[i] += s * (ta.data()[i] - tb.data()[i]);
                        }
                    });
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], ta.len(), |buf| {
                        for i in 0..buf.len() {
                            buf[i] -= s * (ta.data()[i] - tb.data()[i]);
                        }
                    });
                }
            }
            Op::Cosine { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let d = ta.cols();
                let cos = node.value.data();
                let (ga, gb) = kernels::cosine_backward(ta.data(), tb.data(), d, cos, g);
                if rg(*a) {
                    accumulate(&mut grads[a.0], ga.len(), |buf| add_into(buf, &ga));
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], gb.len(), |buf| add_into(buf, &gb));
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let d = node.value.cols();
                accumulate(&mut grads[x.0], g.len(), |buf| {
                    for (r, n) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..d {
                            buf[r * d + c] += (gr[c] - yr[c] * dot) / n;
                        }
                    }
                });
            }
            Op::Attention { q, k, v, dims, probs } => {
                let (dq, dk, dv) = kernels::attention_backward(
                    dims,
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    probs,
                    g,
                );
                for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
                    if rg(*var) {
                        accumulate(&mut grads[var.0], grad.len(), |buf| add_into(buf, &grad));
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
