//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every operation appends a node holding its forward value and whatever the
//! backward pass needs. Inputs always have smaller ids than the node that
//! consumes them, so [`Tape::backward`] is a single sweep in reverse append
//! order. A tape belongs to one evaluation and is not shared between threads.

use std::sync::Arc;

use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, matrix_dims, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulT,
    Add,
    AddBias,
    Hadamard,
    Scale,
    Relu,
    Sigmoid,
    Tanh,
    SoftmaxRows,
    LogSoftmaxRows,
    LayerNorm,
    ConcatCols,
    ConcatRows,
    SliceCols,
    SliceRows,
    MeanRows,
    RepeatRows,
    Embedding,
    Sum,
    SelectSum,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::MatMulT,
        OpKind::Add,
        OpKind::AddBias,
        OpKind::Hadamard,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::SoftmaxRows,
        OpKind::LogSoftmaxRows,
        OpKind::LayerNorm,
        OpKind::ConcatCols,
        OpKind::ConcatRows,
        OpKind::SliceCols,
        OpKind::SliceRows,
        OpKind::MeanRows,
        OpKind::RepeatRows,
        OpKind::Embedding,
        OpKind::Sum,
        OpKind::SelectSum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::MatMulT => "matmul_t",
            OpKind::Add => "add",
            OpKind::AddBias => "add_bias",
            OpKind::Hadamard => "hadamard",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LogSoftmaxRows => "log_softmax_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::ConcatCols => "concat_last_dim",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceCols => "slice_cols",
            OpKind::SliceRows => "slice_rows",
            OpKind::MeanRows => "mean_rows",
            OpKind::RepeatRows => "repeat_rows",
            OpKind::Embedding => "embedding_lookup",
            OpKind::Sum => "sum",
            OpKind::SelectSum => "select_sum",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    MeanRows(Var),
    RepeatRows(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Sum(Var),
    SelectSum { x: Var, picks: Vec<(usize, usize)> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulT(..) => OpKind::MatMulT,
            Op::Add(..) => OpKind::Add,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Hadamard(..) => OpKind::Hadamard,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::LogSoftmaxRows(_) => OpKind::LogSoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::MeanRows(_) => OpKind::MeanRows,
            Op::RepeatRows(_) => OpKind::RepeatRows,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::Sum(_) => OpKind::Sum,
            Op::SelectSum { .. } => OpKind::SelectSum,
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not
    /// influence the loss through differentiable nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Moves the gradient of `v` out, or zeros shaped like `v` when absent.
    pub fn take_or_zeros(&mut self, v: Var, tape: &Tape) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }

    /// Like [`Gradients::get`] but returns zeros shaped like `v` when absent.
    pub fn get_or_zeros(&self, v: Var, tape: &Tape) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }
}

fn dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    matrix_dims(t.shape()).ok_or_else(|| TensorError::Shape {
        op,
        left: t.shape().to_vec(),
        right: vec![],
    })
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Vars at or beyond
    /// `len` become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Corrupts the backward rule of one op kind by scaling its upstream
    /// gradient by 1.5. Exists only as a negative control for gradient checks.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// Adds a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Adds a differentiable leaf without copying `value`.
    pub fn shared_param(&mut self, value: Arc<Tensor>) -> Var {
        self.leaf(value, true)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: impl Into<Arc<Tensor>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.into(),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Which inputs of every `relu` node on the tape are positive, in tape
    /// order. Two evaluations of the same graph share a pattern exactly when
    /// no ReLU crossed its kink between them.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: op.kind().name(),
            });
        }
        let requires_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims(ta, "matmul")?;
        let (k2, n) = dims(tb, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims(ta, "matmul_t")?;
        let (n, k2) = dims(tb, "matmul_t")?;
        if k != k2 {
            return Err(shape_err("matmul_t", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(ta.data(), tb.data(), &mut out, m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulT(a, b), &[a, b])
    }

    fn zip_same(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op.kind().name(), ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Hadamard(a, b), |x, y| x * y)
    }

    /// Adds a length-`n` bias to every row of an `m × n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (m, n) = dims(tx, "add_bias")?;
        if tb.len() != n || tb.rows() != 1 {
            return Err(shape_err("add_bias", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let shape = if tx.rank() == 2 { vec![m, n] } else { tx.shape().to_vec() };
        self.push(Tensor::from_parts(shape, data), Op::AddBias(x, bias), &[x, bias])
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(value, op, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, s), |v| v * s)
    }

    /// `max(0, x)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, n) = dims(tx, "softmax_rows")?;
        let mut data = vec![0.0; tx.len()];
        for (src, dst) in tx.data().chunks(n).zip(data.chunks_mut(n)) {
            softmax_row(src, dst);
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(value, Op::SoftmaxRows(x), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, n) = dims(tx, "log_softmax_rows")?;
        let mut data = vec![0.0; tx.len()];
        for (src, dst) in tx.data().chunks(n).zip(data.chunks_mut(n)) {
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s - lse;
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(value, Op::LogSoftmaxRows(x), &[x])
    }

    /// Row-wise normalization with population variance, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (m, d) = dims(tx, "layer_norm")?;
        if d < 2 {
            return Err(TensorError::Contract(format!(
                "layer_norm needs at least 2 features, got {d}"
            )));
        }
        if tg.len() != d || tg.rows() != 1 {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.len() != d || tb.rows() != 1 {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let mut normalized = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                let xh = (row[c] - mean) * inv;
                normalized[r * d + c] = xh;
                out[r * d + c] = tg.data()[c] * xh + tb.data()[c];
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// `[a ; b]` along the last dimension: `m×p`, `m×q` → `m×(p+q)`.
    pub fn concat_last_dim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, p) = dims(ta, "concat_last_dim")?;
        let (m2, q) = dims(tb, "concat_last_dim")?;
        if m != m2 {
            return Err(shape_err("concat_last_dim", ta, tb));
        }
        let mut data = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            data.extend_from_slice(&ta.data()[r * p..(r + 1) * p]);
            data.extend_from_slice(&tb.data()[r * q..(r + 1) * q]);
        }
        self.push(Tensor::from_parts(vec![m, p + q], data), Op::ConcatCols(a, b), &[a, b])
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows of nothing".into()))?;
        let n = dims(self.value(*first), "concat_rows")?.1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let t = self.value(p);
            let (pm, pn) = dims(t, "concat_rows")?;
            if pn != n {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            data.extend_from_slice(t.data());
            m += pm;
        }
        self.push(Tensor::from_parts(vec![m, n], data), Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims(tx, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                len: n,
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&tx.data()[r * n + start..r * n + start + len]);
        }
        self.push(Tensor::from_parts(vec![m, len], data), Op::SliceCols { x, start }, &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims(tx, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                len: m,
            });
        }
        let data = tx.data()[start * n..(start + len) * n].to_vec();
        self.push(Tensor::from_parts(vec![len, n], data), Op::SliceRows { x, start }, &[x])
    }

    /// Column means: `m × n` → `1 × n`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims(tx, "mean_rows")?;
        let mut data = vec![0.0; n];
        for row in tx.data().chunks(n) {
            for (d, v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        for d in &mut data {
            *d /= m as f64;
        }
        self.push(Tensor::from_parts(vec![1, n], data), Op::MeanRows(x), &[x])
    }

    /// Tiles a single row `times` times: `1 × n` → `times × n`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims(tx, "repeat_rows")?;
        if m != 1 || times == 0 {
            return Err(TensorError::Contract(format!(
                "repeat_rows needs a single row and times >= 1, got {m} rows, times {times}"
            )));
        }
        let data = tx.data().repeat(times);
        self.push(Tensor::from_parts(vec![times, n], data), Op::RepeatRows(x), &[x])
    }

    /// Gathers rows of a `V × d` table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = dims(tt, "embedding_lookup")?;
        if ids.is_empty() {
            return Err(TensorError::Contract("embedding_lookup with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index {
                    op: "embedding_lookup",
                    index: id,
                    len: v,
                });
            }
            data.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::from_parts(vec![ids.len(), d], data);
        self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Sum of the selected `(row, col)` entries of a matrix.
    pub fn select_sum(&mut self, x: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims(tx, "select_sum")?;
        let mut total = 0.0;
        for &(r, c) in picks {
            if r >= m || c >= n {
                return Err(TensorError::Index {
                    op: "select_sum",
                    index: r * n + c,
                    len: m * n,
                });
            }
            total += tx.data()[r * n + c];
        }
        self.push(
            Tensor::scalar(total),
            Op::SelectSum {
                x,
                picks: picks.to_vec(),
            },
            &[x],
        )
    }

    /// Propagates d(loss)/d(node) to every node that depends on a parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let g: std::borrow::Cow<'_, [f64]> = if self.fault == Some(node.op.kind()) {
                upstream.iter().map(|v| v * 1.5).collect::<Vec<_>>().into()
            } else {
                (&upstream[..]).into()
            };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(upstream);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), d)))
            .collect();
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.needs(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k) = ta.matrix_dims().unwrap();
                let n = tb.cols();
                if let Some(da) = self.slot(grads, a) {
                    gemm_nt(g, tb.data(), da, m, n, k);
                }
                if let Some(db) = self.slot(grads, b) {
                    gemm_tn(ta.data(), g, db, m, k, n);
                }
            }
            &Op::MatMulT(a, b) => {
                // c = a·bᵀ, a: m×k, b: n×k
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k) = ta.matrix_dims().unwrap();
                let n = tb.rows();
                if let Some(da) = self.slot(grads, a) {
                    gemm_nn(g, tb.data(), da, m, n, k);
                }
                if let Some(db) = self.slot(grads, b) {
                    gemm_tn(g, ta.data(), db, m, n, k);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::AddBias(x, bias) => {
                if let Some(dx) = self.slot(grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                let n = self.value(bias).len();
                if let Some(db) = self.slot(grads, bias) {
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::Hadamard(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                if let Some(da) = self.slot(grads, a) {
                    for ((d, g), y) in da.iter_mut().zip(g).zip(tb.data()) {
                        *d += g * y;
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    for ((d, g), x) in db.iter_mut().zip(g).zip(ta.data()) {
                        *d += g * x;
                    }
                }
            }
            &Op::Scale(x, s) => {
                if let Some(dx) = self.slot(grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g * s);
                }
            }
            &Op::Relu(x) => {
                let tx = self.value(x);
                if let Some(dx) = self.slot(grads, x) {
                    for ((d, g), v) in dx.iter_mut().zip(g).zip(tx.data()) {
                        if *v > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            &Op::Sigmoid(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    for ((d, g), y) in dx.iter_mut().zip(g).zip(out.data()) {
                        *d += g * y * (1.0 - y);
                    }
                }
            }
            &Op::Tanh(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    for ((d, g), y) in dx.iter_mut().zip(g).zip(out.data()) {
                        *d += g * (1.0 - y * y);
                    }
                }
            }
            &Op::SoftmaxRows(x) => {
                let n = out.cols();
                if let Some(dx) = self.slot(grads, x) {
                    for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (g - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmaxRows(x) => {
                let n = out.cols();
                if let Some(dx) = self.slot(grads, x) {
                    for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let total: f64 = gr.iter().sum();
                        for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += g - y.exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = out.cols();
                let tg = self.value(*gain);
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &normalized[r * d..(r + 1) * d];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for c in 0..d {
                            let dxh = gr[c] * tg.data()[c];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xr[c];
                        }
                        let row = &mut dx[r * d..(r + 1) * d];
                        for c in 0..d {
                            let dxh = gr[c] * tg.data()[c];
                            row[c] += inv / d as f64 * (d as f64 * dxh - sum_dxh - xr[c] * sum_dxh_xh);
                        }
                    }
                }
                if let Some(dg) = self.slot(grads, *gain) {
                    for (gr, xr) in g.chunks(d).zip(normalized.chunks(d)) {
                        for c in 0..d {
                            dg[c] += gr[c] * xr[c];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for gr in g.chunks(d) {
                        db.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::ConcatCols(a, b) => {
                let p = self.value(a).cols();
                let q = self.value(b).cols();
                if let Some(da) = self.slot(grads, a) {
                    for (dr, gr) in da.chunks_mut(p).zip(g.chunks(p + q)) {
                        dr.iter_mut().zip(&gr[..p]).for_each(|(d, g)| *d += g);
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    for (dr, gr) in db.chunks_mut(q).zip(g.chunks(p + q)) {
                        dr.iter_mut().zip(&gr[p..]).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(dp) = self.slot(grads, p) {
                        dp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(d, g)| *d += g);
                    }
                    offset += len;
                }
            }
            &Op::SliceCols { x, start } => {
                let n = self.value(x).cols();
                let len = out.cols();
                if let Some(dx) = self.slot(grads, x) {
                    for (dr, gr) in dx.chunks_mut(n).zip(g.chunks(len)) {
                        dr[start..start + len]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::SliceRows { x, start } => {
                let n = out.cols();
                if let Some(dx) = self.slot(grads, x) {
                    dx[start * n..start * n + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, g)| *d += g);
                }
            }
            &Op::MeanRows(x) => {
                let (m, n) = self.value(x).matrix_dims().unwrap();
                if let Some(dx) = self.slot(grads, x) {
                    for dr in dx.chunks_mut(n) {
                        dr.iter_mut().zip(g).for_each(|(d, g)| *d += g / m as f64);
                    }
                }
            }
            &Op::RepeatRows(x) => {
                let n = out.cols();
                if let Some(dx) = self.slot(grads, x) {
                    for gr in g.chunks(n) {
                        dx.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = out.cols();
                if let Some(dt) = self.slot(grads, *table) {
                    for (&id, gr) in ids.iter().zip(g.chunks(d)) {
                        dt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SelectSum { x, picks } => {
                let n = self.value(*x).cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for &(r, c) in picks {
                        dx[r * n + c] += g[0];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::identity(2));
        let a = t.constant(m(&[&[0.3, -1.0], &[2.5, 7.0]]));
        let out = t.matmul(i, a).unwrap();
        assert_eq!(t.value(out), t.value(a));

        let l = t.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let r = t.constant(m(&[&[0.0], &[1.0]]));
        let out = t.matmul(l, r).unwrap();
        assert_eq!(t.value(out).data(), &[2.0, 4.0]);
        assert_eq!(t.shape(out), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn softmax_rows_closed_forms() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[2.0, 2.0, 2.0, 2.0], &[0.0, 3f64.ln(), 0.0, 3f64.ln()]]));
        let y = t.softmax_rows(x).unwrap();
        let v = t.value(y);
        for c in 0..4 {
            assert!((v.get(0, c) - 0.25).abs() < 1e-15);
        }
        let x = t.constant(m(&[&[0.0, 3f64.ln()]]));
        let y = t.softmax_rows(x).unwrap();
        let v = t.value(y);
        assert!((v.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((v.get(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[1000.0, 1000.0]]));
        let y = t.softmax_rows(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_hand_cases() {
        let mut t = Tape::new();
        let gain = t.constant(Tensor::full(&[2], 1.0));
        let bias = t.constant(Tensor::zeros(&[2]));
        let x = t.constant(m(&[&[1.0, 3.0], &[5.0, 5.0]]));
        let y = t.layer_norm(x, gain, bias, 0.0).unwrap_err();
        // zero variance with eps = 0 divides by zero
        assert!(matches!(y, TensorError::NonFinite { op: "layer_norm" }));
        let y = t.layer_norm(x, gain, bias, 1e-300).unwrap();
        let v = t.value(y);
        assert!((v.get(0, 0) + 1.0).abs() < 1e-12);
        assert!((v.get(0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(v.row_slice(1), &[0.0, 0.0]);
    }

    #[test]
    fn layer_norm_rejects_single_feature() {
        let mut t = Tape::new();
        let gain = t.constant(Tensor::full(&[1], 1.0));
        let bias = t.constant(Tensor::zeros(&[1]));
        let x = t.constant(Tensor::zeros(&[3, 1]));
        assert!(matches!(
            t.layer_norm(x, gain, bias, 1e-5),
            Err(TensorError::Contract(_))
        ));
    }

    #[test]
    fn elementwise_definitions() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(&[-2.0, 0.0, 3.0]));
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 3.0]);
        let z = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(z).unwrap();
        assert_eq!(t.value(s).item(), 0.5);
    }

    #[test]
    fn concat_keeps_left_block() {
        let mut t = Tape::new();
        let a = t.constant(m(&[&[0.1, 0.2], &[0.3, 0.4]]));
        let b = t.constant(m(&[&[9.0], &[8.0]]));
        let c = t.concat_last_dim(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 3]);
        let v = t.value(c);
        assert_eq!(&v.row_slice(0)[..2], &[0.1, 0.2]);
        assert_eq!(&v.row_slice(1)[..2], &[0.3, 0.4]);
        let bad = t.constant(Tensor::zeros(&[3, 1]));
        assert!(t.concat_last_dim(a, bad).is_err());
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut t = Tape::new();
        let p = t.param(m(&[&[1.0, -2.0], &[0.5, 3.0]]));
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0; 4]);

        let mut t = Tape::new();
        let p = t.param(m(&[&[1.0, -2.0], &[0.5, 3.0]]));
        let sq = t.hadamard(p, p).unwrap();
        let s = t.sum(sq).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn backward_of_loss_wrt_itself_is_one() {
        let mut t = Tape::new();
        let p = t.param(Tensor::scalar(3.0));
        let g = t.backward(p).unwrap();
        assert_eq!(g.get(p).unwrap().item(), 1.0);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let p = t.param(Tensor::zeros(&[2, 2]));
        assert_eq!(
            t.backward(p).err(),
            Some(TensorError::NonScalarLoss(vec![2, 2]))
        );
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::row(&[1.0, 2.0]));
        let p = t.param(Tensor::row(&[3.0, 4.0]));
        let h = t.hadamard(c, p).unwrap();
        let s = t.sum(h).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let p = t.param(Tensor::row(&[0.0, 1.0]));
        let r = t.relu(p).unwrap();
        let s = t.sum(r).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn non_finite_values_are_reported() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::row(&[f64::MAX]));
        assert_eq!(
            t.scale(a, 10.0).unwrap_err(),
            TensorError::NonFinite { op: "scale" }
        );
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
