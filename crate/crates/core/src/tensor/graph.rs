//! Wengert-tape reverse-mode differentiation.
//!
//! Every operation appends one node to the tape; nodes are therefore already
//! in topological order and backward simply walks the tape in reverse.

use rand::Rng;

use super::kernels::{self, dot, matmul_abt_acc, matmul_acc, matmul_atb_acc};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether stochastic layers (dropout) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    Gather { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    Dropout { x: Var, mask: Vec<T> },
    NormalizeRows { x: Var, norms: Vec<T> },
    Nll { logits: Var, targets: Vec<(usize, usize)>, probs: Vec<T> },
    Sum(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::Tanh(_) => "tanh",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::Gather { .. } => "embedding_lookup",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::SelectRows { .. } => "select_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Dropout { .. } => "dropout",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::Nll { .. } => "nll",
            Op::Sum(_) => "sum",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::MatMulT(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Gather { table, .. } => vec![*table],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::Nll { logits, .. } => vec![*logits],
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Tanh(x)
            | Op::Softmax { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SelectRows { x, .. }
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Dropout { x, .. }
            | Op::NormalizeRows { x, .. }
            | Op::Sum(x) => vec![*x],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One entry of the computation record: operation, inputs, output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpRecord {
    pub op: &'static str,
    pub inputs: Vec<Var>,
    pub output: Var,
}

/// Gradients of a scalar with respect to every `requires_grad` leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// A computation tape. Build the forward pass with the op methods, then call
/// [`Graph::backward`] once.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn record(&self) -> Vec<OpRecord> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| OpRecord { op: n.op.name(), inputs: n.op.inputs(), output: Var(i) })
            .collect()
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let name = op.name();
        let value = value.ensure_finite(name)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).expect_matrix(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul_t")?;
        let (n, k2) = self.mat(b, "matmul_t")?;
        if k != k2 {
            return Err(Error::shape("matmul_t", format!("{m}x{k} times ({n}x{k2})^T")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_abt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, Op::Add(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", format!("{:?} * {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, Op::Mul(a, b))
    }

    /// Adds a length-`d` vector to every row of an `n×d` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = self.mat(x, "add_row")?;
        let tb = self.value(bias);
        if tb.shape() != [d] {
            return Err(Error::shape("add_row", format!("bias {:?} for width {d}", tb.shape())));
        }
        let b = tb.data().to_vec();
        let tx = self.value(x);
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, &bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(t, Op::AddRow(x, bias))
    }

    /// `x · w + b` for `w: d_in×d_out`, `b: d_out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v * s).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(t, Op::Scale(x, s))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v * gauss_cdf(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(t, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v.tanh()).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(t, Op::Tanh(x))
    }

    /// Normalizes each row over the trailing axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (n, d) = self.mat(x, "layer_norm")?;
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::shape("layer_norm", format!("affine parameters must have length {d}")));
        }
        let (tx, g, b) = (self.value(x), self.value(gain).data(), self.value(bias).data());
        let dn = c::<T>(d as f64);
        let mut xhat = Vec::with_capacity(n * d);
        let mut inv_std = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for row in tx.data().chunks(d) {
            let mean = kernels::sum(row) / dn;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        self.push(t, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.masked_softmax(x, axis, None)
    }

    /// Softmax along `axis` where positions with `mask[k] == false` (indexed
    /// along `axis`) get probability exactly zero.
    pub fn masked_softmax(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for rank {}", shape.len())));
        }
        let len = shape[axis];
        if let Some(m) = mask {
            if m.len() != len {
                return Err(Error::shape("softmax", format!("mask length {} vs axis {len}", m.len())));
            }
            if !m.iter().any(|&k| k) {
                return Err(Error::Invalid("softmax mask excludes every position".into()));
            }
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = tx.data();
        let mut out = vec![T::zero(); src.len()];
        let keep = |k: usize| mask.map_or(true, |m| m[k]);
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let mut mx = T::neg_infinity();
                for k in (0..len).filter(|&k| keep(k)) {
                    mx = mx.max(src[at(k)]);
                }
                let mut z = T::zero();
                for k in (0..len).filter(|&k| keep(k)) {
                    let e = (src[at(k)] - mx).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in (0..len).filter(|&k| keep(k)) {
                    out[at(k)] /= z;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::Softmax { x, outer, len, inner })
    }

    /// Row lookup into an embedding table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.mat(table, "embedding_lookup")?;
        if ids.is_empty() {
            return Err(Error::shape("embedding_lookup", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::IdOutOfRange { id: bad as u32, vocab_size: v });
        }
        let tt = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tt.row(i));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        self.push(t, Op::Gather { table, ids: ids.to_vec() })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.mat(x, "slice_cols")?;
        if len == 0 || start + len > d {
            return Err(Error::shape("slice_cols", format!("[{start}, {}) of {d}", start + len)));
        }
        let tx = self.value(x);
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let t = Tensor::new(vec![n, len], out)?;
        self.push(t, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.mat(*parts.first().ok_or_else(|| Error::shape("concat_cols", "empty"))?, "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, w) = self.mat(p, "concat_cols")?;
            if r != n {
                return Err(Error::shape("concat_cols", format!("row counts {r} vs {n}")));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![n, total], out)?;
        self.push(t, Op::ConcatCols(parts.to_vec()))
    }

    /// Gathers rows of a matrix (repetition allowed).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.mat(x, "select_rows")?;
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::shape("select_rows", format!("rows {rows:?} of {n}")));
        }
        let tx = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(tx.row(r));
        }
        let t = Tensor::new(vec![rows.len(), d], out)?;
        self.push(t, Op::SelectRows { x, rows: rows.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.mat(*parts.first().ok_or_else(|| Error::shape("concat_rows", "empty"))?, "concat_rows")?.1;
        let mut out = Vec::new();
        let mut n = 0;
        for &p in parts {
            let (r, w) = self.mat(p, "concat_rows")?;
            if w != d {
                return Err(Error::shape("concat_rows", format!("widths {w} vs {d}")));
            }
            n += r;
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![n, d], out)?;
        self.push(t, Op::ConcatRows(parts.to_vec()))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        self.push(t, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        self.push(t, Op::Reshape(x))
    }

    /// Inverted dropout. Identity in [`Mode::Infer`] or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Infer || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = c::<T>(1.0 / (1.0 - p));
        let tx = self.value(x);
        let mask: Vec<T> =
            (0..tx.numel()).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep_scale }).collect();
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(t, Op::Dropout { x, mask })
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.mat(x, "normalize_rows")?;
        let tx = self.value(x);
        let mut norms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for row in tx.data().chunks(d) {
            let nrm = dot(row, row).sqrt();
            if nrm <= T::zero() {
                return Err(Error::Degenerate { op: "normalize_rows" });
            }
            norms.push(nrm);
            out.extend(row.iter().map(|&v| v / nrm));
        }
        let t = Tensor::new(vec![n, d], out)?;
        self.push(t, Op::NormalizeRows { x, norms })
    }

    /// Negative log-softmax picked at `(row, target)` pairs. Columns with
    /// `col_mask[j] == false` are excluded from every normalizer. Returns a
    /// vector with one term per pair.
    pub fn nll(&mut self, logits: Var, targets: &[(usize, usize)], col_mask: Option<&[bool]>) -> Result<Var> {
        let (n, k) = self.mat(logits, "nll")?;
        if targets.is_empty() {
            return Err(Error::NoSelectedPositions);
        }
        if let Some(m) = col_mask {
            if m.len() != k {
                return Err(Error::shape("nll", format!("column mask {} vs {k} classes", m.len())));
            }
        }
        let keep = |j: usize| col_mask.map_or(true, |m| m[j]);
        let tl = self.value(logits);
        let mut terms = Vec::with_capacity(targets.len());
        let mut probs = Vec::with_capacity(targets.len() * k);
        for &(r, t) in targets {
            if r >= n || t >= k || !keep(t) {
                return Err(Error::shape("nll", format!("target ({r}, {t}) invalid for {n}x{k}")));
            }
            let row = tl.row(r);
            let mx = (0..k).filter(|&j| keep(j)).fold(T::neg_infinity(), |m, j| m.max(row[j]));
            let mut z = T::zero();
            let start = probs.len();
            for (j, &v) in row.iter().enumerate() {
                let e = if keep(j) { (v - mx).exp() } else { T::zero() };
                probs.push(e);
                z += e;
            }
            for p in &mut probs[start..] {
                *p /= z;
            }
            terms.push(z.ln() + mx - row[t]);
        }
        let out = Tensor::vector(terms);
        self.push(out, Op::Nll { logits, targets: targets.to_vec(), probs })
    }

    /// Mean cross-entropy of each row against its class index.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let pairs: Vec<_> = targets.iter().copied().enumerate().collect();
        let terms = self.nll(logits, &pairs, None)?;
        self.mean(terms)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = kernels::sum(self.value(x).data());
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, c::<T>(1.0 / n as f64))
    }

    /// Cosine similarity of two vectors (or `1×d` rows), as a `[1]` tensor.
    pub fn cosine_sim(&mut self, u: Var, v: Var) -> Result<Var> {
        let du = self.value(u).numel();
        let dv = self.value(v).numel();
        if du != dv {
            return Err(Error::shape("cosine_sim", format!("lengths {du} vs {dv}")));
        }
        let u2 = self.reshape(u, &[1, du])?;
        let v2 = self.reshape(v, &[1, dv])?;
        let un = self.normalize_rows(u2).map_err(|_| Error::Degenerate { op: "cosine_sim" })?;
        let vn = self.normalize_rows(v2).map_err(|_| Error::Degenerate { op: "cosine_sim" })?;
        let s = self.matmul_t(un, vn)?;
        self.reshape(s, &[1])
    }

    /// Reverse pass from a scalar. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Backward("graph already differentiated; run a new forward".into()));
        }
        let root = self.nodes.get(loss.0).ok_or_else(|| Error::Backward("unknown loss node".into()))?;
        if root.value.numel() != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {:?}", root.value.shape())));
        }
        if !root.requires_grad {
            return Err(Error::Backward("loss does not depend on any trainable tensor".into()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(root.value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(idx, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| if matches!(n.op, Op::Leaf) { g } else { None })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            let n = &self.nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| Tensor::zeros(n.value.shape()));
            f(buf.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).expect_matrix("matmul")?;
                let n = self.value(*b).cols();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |da| matmul_abt_acc(gd, bv, da, m, n, k));
                acc(*b, &mut |db| matmul_atb_acc(av, gd, db, m, k, n));
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.value(*a).expect_matrix("matmul_t")?;
                let n = self.value(*b).rows();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |da| matmul_acc(gd, bv, da, m, n, k));
                acc(*b, &mut |db| matmul_atb_acc(gd, av, db, m, n, k));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |d| add_into(d, gd));
                }
            }
            Op::AddRow(x, b) => {
                let w = self.value(*b).numel();
                acc(*x, &mut |d| add_into(d, gd));
                acc(*b, &mut |d| {
                    for row in gd.chunks(w) {
                        add_into(d, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| {
                    for ((o, &gi), &bi) in d.iter_mut().zip(gd).zip(bv) {
                        *o += gi * bi;
                    }
                });
                acc(*b, &mut |d| {
                    for ((o, &gi), &ai) in d.iter_mut().zip(gd).zip(av) {
                        *o += gi * ai;
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |d| {
                for (o, &gi) in d.iter_mut().zip(gd) {
                    *o += gi * *s;
                }
            }),
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let inv_sqrt_2pi = c::<T>(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                acc(*x, &mut |d| {
                    for ((o, &gi), &xi) in d.iter_mut().zip(gd).zip(xv) {
                        let pdf = inv_sqrt_2pi * (-(xi * xi) * c(0.5)).exp();
                        *o += gi * (gauss_cdf(xi) + xi * pdf);
                    }
                });
            }
            Op::Tanh(x) => {
                let yv = node.value.data();
                acc(*x, &mut |d| {
                    for ((o, &gi), &yi) in d.iter_mut().zip(gd).zip(yv) {
                        *o += gi * (T::one() - yi * yi);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                let dn = c::<T>(d as f64);
                acc(*gain, &mut |dg| {
                    for (grow, hrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for grow in gd.chunks(d) {
                        add_into(db, grow);
                    }
                });
                acc(*x, &mut |dx| {
                    let mut dxhat = vec![T::zero(); d];
                    for (r, (grow, hrow)) in gd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dxhat[j] = grow[j] * gv[j];
                        }
                        let s1 = kernels::sum(&dxhat);
                        let s2 = dot(&dxhat, hrow);
                        let inv = inv_std[r] / dn;
                        let out = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += inv * (dn * dxhat[j] - s1 - hrow[j] * s2);
                        }
                    }
                });
            }
            Op::Softmax { x, outer, len, inner } => {
                let yv = node.value.data();
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * len * inner + k * inner + i;
                            let s = (0..len).fold(T::zero(), |s, k| s + gd[at(k)] * yv[at(k)]);
                            for k in 0..len {
                                d[at(k)] += yv[at(k)] * (gd[at(k)] - s);
                            }
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).cols();
                acc(*table, &mut |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &gd[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let w = node.value.cols();
                let d = self.value(*x).cols();
                acc(*x, &mut |dx| {
                    for (r, grow) in gd.chunks(w).enumerate() {
                        add_into(&mut dx[r * d + start..r * d + start + w], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &mut |dp| {
                        for (r, out) in dp.chunks_mut(w).enumerate() {
                            add_into(out, &gd[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::SelectRows { x, rows } => {
                let d = node.value.cols();
                acc(*x, &mut |dx| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut dx[r * d..(r + 1) * d], &gd[k * d..(k + 1) * d]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(p, &mut |dp| add_into(dp, &gd[off..off + n]));
                    off += n;
                }
            }
            Op::Transpose(x) => {
                let gt = g.transpose()?;
                acc(*x, &mut |d| add_into(d, gt.data()));
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, gd)),
            Op::Dropout { x, mask } => acc(*x, &mut |d| {
                for ((o, &gi), &m) in d.iter_mut().zip(gd).zip(mask) {
                    *o += gi * m;
                }
            }),
            Op::NormalizeRows { x, norms } => {
                let yv = node.value.data();
                let d = node.value.cols();
                acc(*x, &mut |dx| {
                    for (r, (grow, yrow)) in gd.chunks(d).zip(yv.chunks(d)).enumerate() {
                        let s = dot(grow, yrow);
                        let out = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += (grow[j] - yrow[j] * s) / norms[r];
                        }
                    }
                });
            }
            Op::Nll { logits, targets, probs } => {
                let k = self.value(*logits).cols();
                acc(*logits, &mut |dl| {
                    for (q, &(r, t)) in targets.iter().enumerate() {
                        let out = &mut dl[r * k..(r + 1) * k];
                        let p = &probs[q * k..(q + 1) * k];
                        for j in 0..k {
                            out[j] += gd[q] * p[j];
                        }
                        out[t] -= gd[q];
                    }
                });
            }
            Op::Sum(x) => {
                let gs = gd[0];
                acc(*x, &mut |d| {
                    for o in d.iter_mut() {
                        *o += gs;
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}

#[inline]
fn gauss_cdf<T: Scalar>(x: T) -> T {
    c::<T>(0.5) * (T::one() + (x * c(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_matmul_and_hand_product() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let x = g.constant(m(&[&[3.0, -2.0], &[0.5, 7.0]]));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let a = g.constant(m(&[&[1.0, 2.0]]));
        let b = g.constant(m(&[&[3.0], &[4.0]]));
        let ab = g.matmul(a, b).unwrap();
        assert_eq!(g.value(ab).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_uniform_and_large_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::vector(vec![100.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        let p = g.value(y).data();
        assert!((p[0] - 1.0).abs() < 1e-40_f64.max(1e-15));
        assert!(p[1] > 0.0 && p[1] < 1e-40);
    }

    #[test]
    fn masked_softmax_zeroes_excluded_columns() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(m(&[&[1.0, 2.0, 3.0], &[0.0, 0.0, 50.0]]));
        let y = g.masked_softmax(x, 1, Some(&[true, true, false])).unwrap();
        let t = g.value(y);
        assert_eq!(t.at(0, 2), 0.0);
        assert_eq!(t.at(1, 2), 0.0);
        assert!((t.at(1, 0) - 0.5).abs() < 1e-15);
        assert!((t.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_of_self_and_orthogonal() {
        let mut g = Graph::<f64>::new();
        let u = g.constant(Tensor::vector(vec![0.3, -1.2, 4.0]));
        let s = g.cosine_sim(u, u).unwrap();
        assert!((g.value(s).item() - 1.0).abs() < 1e-15);
        let a = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let b = g.constant(Tensor::vector(vec![0.0, 1.0]));
        let s = g.cosine_sim(a, b).unwrap();
        assert_eq!(g.value(s).item(), 0.0);
        let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
        assert!(matches!(g.cosine_sim(a, z), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(m(&[&[2.5, 2.5, 2.5, 2.5]]));
        let gain = g.constant(Tensor::filled(&[4], 1.0));
        let bias = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gelu_at_zero_and_far_tails() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(vec![0.0, 10.0, -10.0]));
        let y = g.gelu(x).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-12);
        assert!(v[2].abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut g = Graph::<f64>::new();
        let k = 7;
        let x = g.constant(Tensor::zeros(&[2, k]));
        let l = g.cross_entropy(x, &[0, 3]).unwrap();
        assert!((g.value(l).item() - (k as f64).ln()).abs() < 1e-12);
        let mut logits = vec![0.0; k];
        logits[2] = 60.0;
        let x = g.constant(Tensor::new(vec![1, k], logits).unwrap());
        let l = g.cross_entropy(x, &[2]).unwrap();
        assert!(g.value(l).item() < 1e-20);
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn cosine_gradient_at_orthogonality() {
        let mut g = Graph::<f64>::new();
        let u = g.param(Tensor::vector(vec![2.0, 0.0, 0.0]));
        let v = g.constant(Tensor::vector(vec![0.0, 3.0, 4.0]));
        let s = g.cosine_sim(u, v).unwrap();
        let grads = g.backward(s).unwrap();
        // u ⟂ v: d cos / du = v / (|u||v|)
        let expect = [0.0, 3.0 / 10.0, 4.0 / 10.0];
        for (a, e) in grads.get(u).unwrap().data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn second_backward_and_detached_loss_fail() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Backward(_))));

        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let s = g.sum(c).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Backward(_))));

        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Backward(_))));
    }

    #[test]
    fn dropout_is_identity_in_inference() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![1.0; 64]));
        let y = g.dropout(x, 0.5, Mode::Infer, &mut rng).unwrap();
        assert_eq!(x, y);
        let y = g.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        let vals = g.value(y).data().to_vec();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), vals.as_slice());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(vec![1e300, 1.0]));
        assert!(matches!(g.scale(x, 1e300), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn record_lists_ops_in_order() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::vector(vec![1.0, 2.0]));
        let t = g.tanh(a).unwrap();
        let s = g.sum(t).unwrap();
        let rec = g.record();
        assert_eq!(rec.iter().map(|r| r.op).collect::<Vec<_>>(), ["leaf", "tanh", "sum"]);
        assert_eq!(rec[2].inputs, vec![t]);
        assert_eq!(rec[2].output, s);
    }
}
