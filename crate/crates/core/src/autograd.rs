//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so walking the tape backwards is a valid reverse
//! topological order. Only leaves keep gradients across `backward` calls;
//! interior adjoints are scratch.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Real, Tensor};

const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale(Var, T),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Sigmoid(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    PoolRows { x: Var, group: usize },
    MeanRows(Var),
    MaxRows { x: Var, argmax: Vec<usize> },
    Sum(Var),
    Bce { p: Var, dp: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

#[derive(Debug)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    track_params: bool,
    macs: u64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Graph::new()
    }
}

/// Splits a shape around `axis` into (outer, axis extent, inner).
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let one = T::one();
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let val = half * x * (one + t);
    let dinner = c * (one + T::of(3.0) * k * x * x);
    let der = half * (one + t) + half * x * (one - t * t) * dinner;
    (val, der)
}

/// Adjoint buffer for `v`, allocated on first use; `None` if `v` needs no gradient.
fn slot<'a, T: Real>(
    nodes: &[Node<T>],
    adj: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(adj[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

impl<T: Real> Graph<T> {
    /// A graph whose parameter leaves require gradients.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            track_params: true,
            macs: 0,
        }
    }

    /// A graph for evaluation: parameters enter as constants.
    pub fn inference() -> Self {
        Graph {
            track_params: false,
            ..Graph::new()
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for a stored parameter; each parameter maps to one leaf per graph.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_shared(store.shared(id).clone(), Op::Leaf, self.track_params);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Bytes held by every tensor recorded on the tape.
    pub fn live_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.nbytes()).sum()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.fill(T::zero());
            }
        }
    }

    // ---- operations --------------------------------------------------------

    fn check_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.shape().len() != 2 {
            return Err(Error::shape(op, t.shape(), &[0, 0]));
        }
        Ok((t.rows(), t.cols()))
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.check_matrix("matmul", a)?;
        let (br, bc) = self.check_matrix("matmul", b)?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            out.data_mut(),
            false,
        );
        self.macs += (m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`cols` bias to every row; the only broadcast supported.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let cols = tx.cols();
        if tb.len() != cols {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let s = T::of(factor);
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v * s).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.shape().len() {
            return Err(Error::Usage(format!(
                "softmax axis {axis} out of range for shape {:?}",
                tx.shape()
            )));
        }
        if tx.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input contains a non-finite value".into()));
        }
        let (outer, len, inner) = lanes(tx.shape(), axis);
        let mut out = tx.clone();
        let data = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for a in 0..len {
                    max = max.max(data[base + a * inner]);
                }
                let mut sum = T::zero();
                for a in 0..len {
                    let e = (data[base + a * inner] - max).exp();
                    data[base + a * inner] = e;
                    sum += e;
                }
                for a in 0..len {
                    data[base + a * inner] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        if cols == 0 {
            return Err(Error::shape("layer_norm", tx.shape(), &[1]));
        }
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != cols || tb.len() != cols {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.rows();
        let n = T::of(cols as f64);
        let eps = T::of(eps);
        let mut out = Tensor::zeros(tx.shape());
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            let o = &mut out.data_mut()[r * cols..(r + 1) * cols];
            for j in 0..cols {
                o[j] = (row[j] - mean) * rstd * tg.data()[j] + tb.data()[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| gelu_parts(v).0).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            })
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::Usage("concat_rows of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape("concat_rows", &[rows, cols], t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::Usage("concat_cols of nothing".into()))?;
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::shape("concat_cols", &[rows, total], t.shape()));
            }
            total += t.cols();
        }
        let mut out = Tensor::zeros(&[rows, total]);
        let mut offset = 0;
        for &p in parts {
            let t = &*self.nodes[p.0].value;
            let c = t.cols();
            for r in 0..rows {
                out.data_mut()[r * total + offset..r * total + offset + c].copy_from_slice(t.row(r));
            }
            offset += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if start > end || end > t.rows() {
            return Err(Error::shape("slice_rows", t.shape(), &[start, end]));
        }
        let c = t.cols();
        let out = Tensor::new(vec![end - start, c], t.data()[start * c..end * c].to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if start > end || end > t.cols() {
            return Err(Error::shape("slice_cols", t.shape(), &[start, end]));
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let out = Tensor::new(vec![rows, end - start], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::shape("gather_rows", t.shape(), &[bad]));
        }
        let out = t.select_rows(idx);
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Averages each run of `group` consecutive rows.
    pub fn pool_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if group == 0 || rows % group != 0 {
            return Err(Error::shape("pool_rows", t.shape(), &[group]));
        }
        let inv = T::one() / T::of(group as f64);
        let mut out = Tensor::zeros(&[rows / group, cols]);
        for r in 0..rows {
            let k = r / group;
            let src = t.row(r);
            let dst = &mut out.data_mut()[k * cols..(k + 1) * cols];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s * inv;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::PoolRows { x, group }, rg))
    }

    /// Column means, shape `1×cols`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if rows == 0 {
            return Err(Error::shape("mean_rows", t.shape(), &[1, cols]));
        }
        let inv = T::one() / T::of(rows as f64);
        let mut out = Tensor::zeros(&[1, cols]);
        for r in 0..rows {
            for (o, &v) in out.data_mut().iter_mut().zip(t.row(r)) {
                *o += v * inv;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanRows(x), rg))
    }

    /// Column maxima, shape `1×cols`; ties resolve to the first row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if rows == 0 {
            return Err(Error::shape("max_rows", t.shape(), &[1, cols]));
        }
        let mut argmax = vec![0usize; cols];
        let mut out = Tensor::zeros(&[1, cols]);
        out.data_mut().copy_from_slice(t.row(0));
        for r in 1..rows {
            for (j, &v) in t.row(r).iter().enumerate() {
                if v > out.data()[j] {
                    out.data_mut()[j] = v;
                    argmax[j] = r;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxRows { x, argmax }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 targets,
    /// with `p` clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let tp = self.value(p);
        if tp.len() != targets.len() || targets.is_empty() {
            return Err(Error::shape("bce", tp.shape(), &[targets.len()]));
        }
        let k = targets.len() as f64;
        let mut loss = 0.0;
        let mut dp = Vec::with_capacity(targets.len());
        for (&pv, &t) in tp.data().iter().zip(targets) {
            let raw = pv.as_f64();
            let clamped = raw.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            loss -= t * clamped.ln() + (1.0 - t) * (1.0 - clamped).ln();
            let g = if raw != clamped {
                0.0
            } else {
                (-t / clamped + (1.0 - t) / (1.0 - clamped)) / k
            };
            dp.push(T::of(g));
        }
        let rg = self.rg(p);
        Ok(self.push(Tensor::scalar(T::of(loss / k)), Op::Bce { p, dp }, rg))
    }

    // ---- reverse pass ------------------------------------------------------

    /// Propagates d(loss)/d(node) to every reachable leaf, adding into any
    /// gradient already held by that leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                adj[i] = Some(dy);
                continue;
            }
            self.backprop_node(i, &dy, &mut adj);
        }

        for (i, slot) in adj.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if let (Op::Leaf, Some(g)) = (&node.op, slot) {
                match node.grad.as_mut() {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(g) {
                            *a += v;
                        }
                    }
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, dy: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| -> &Tensor<T> { &nodes[v.0].value };

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = nodes[i].value.cols();
                if let Some(da) = slot(nodes, adj, *a) {
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, dy, false, tb.data(), !trans_b, da, true);
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    if *trans_b {
                        // B is n×k: dB = dCᵀ · A
                        gemm(n, m, k, dy, true, ta.data(), false, db, true);
                    } else {
                        // B is k×n: dB = Aᵀ · dC
                        gemm(k, m, n, ta.data(), true, dy, false, db, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = slot(nodes, adj, v) {
                        for (g, &y) in d.iter_mut().zip(dy) {
                            *g += y;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if let Some(d) = slot(nodes, adj, *a) {
                    for ((g, &y), &o) in d.iter_mut().zip(dy).zip(tb.data()) {
                        *g += y * o;
                    }
                }
                if let Some(d) = slot(nodes, adj, *b) {
                    for ((g, &y), &o) in d.iter_mut().zip(dy).zip(ta.data()) {
                        *g += y * o;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                let cols = val(*x).cols().max(1);
                if let Some(d) = slot(nodes, adj, *x) {
                    for (g, &y) in d.iter_mut().zip(dy) {
                        *g += y;
                    }
                }
                if let Some(d) = slot(nodes, adj, *bias) {
                    for row in dy.chunks(cols) {
                        for (g, &y) in d.iter_mut().zip(row) {
                            *g += y;
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(d) = slot(nodes, adj, *x) {
                    for (g, &y) in d.iter_mut().zip(dy) {
                        *g += y * *s;
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = &nodes[i].value;
                let (outer, len, inner) = lanes(y.shape(), *axis);
                if let Some(d) = slot(nodes, adj, *x) {
                    let yd = y.data();
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let mut dot = T::zero();
                            for a in 0..len {
                                let idx = base + a * inner;
                                dot += dy[idx] * yd[idx];
                            }
                            for a in 0..len {
                                let idx = base + a * inner;
                                d[idx] += yd[idx] * (dy[idx] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let tx = val(*x);
                let tg = val(*gamma);
                let (rows, cols) = (tx.rows(), tx.cols());
                let n = T::of(cols as f64);
                let xhat = |r: usize, j: usize| (tx.at(r, j) - mean[r]) * rstd[r];
                if let Some(d) = slot(nodes, adj, *gamma) {
                    for r in 0..rows {
                        for j in 0..cols {
                            d[j] += dy[r * cols + j] * xhat(r, j);
                        }
                    }
                }
                if let Some(d) = slot(nodes, adj, *beta) {
                    for r in 0..rows {
                        for j in 0..cols {
                            d[j] += dy[r * cols + j];
                        }
                    }
                }
                if let Some(d) = slot(nodes, adj, *x) {
                    for r in 0..rows {
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for j in 0..cols {
                            let dxh = dy[r * cols + j] * tg.data()[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat(r, j);
                        }
                        for j in 0..cols {
                            let dxh = dy[r * cols + j] * tg.data()[j];
                            d[r * cols + j] +=
                                rstd[r] / n * (n * dxh - sum_dxh - xhat(r, j) * sum_dxh_xh);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let tx = val(*x);
                if let Some(d) = slot(nodes, adj, *x) {
                    for ((g, &y), &v) in d.iter_mut().zip(dy).zip(tx.data()) {
                        *g += y * gelu_parts(v).1;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = &nodes[i].value;
                if let Some(d) = slot(nodes, adj, *x) {
                    for ((g, &up), &s) in d.iter_mut().zip(dy).zip(y.data()) {
                        *g += up * s * (T::one() - s);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    if let Some(d) = slot(nodes, adj, p) {
                        for (g, &y) in d.iter_mut().zip(&dy[offset..offset + len]) {
                            *g += y;
                        }
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.cols();
                let rows = nodes[i].value.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if let Some(d) = slot(nodes, adj, p) {
                        for r in 0..rows {
                            for j in 0..c {
                                d[r * c + j] += dy[r * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceRows { x, start } => {
                let c = val(*x).cols();
                if let Some(d) = slot(nodes, adj, *x) {
                    for (g, &y) in d[start * c..start * c + dy.len()].iter_mut().zip(dy) {
                        *g += y;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let c = val(*x).cols();
                let w = nodes[i].value.cols();
                let rows = nodes[i].value.rows();
                if let Some(d) = slot(nodes, adj, *x) {
                    for r in 0..rows {
                        for j in 0..w {
                            d[r * c + start + j] += dy[r * w + j];
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let c = val(*x).cols();
                if let Some(d) = slot(nodes, adj, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            d[src * c + j] += dy[r * c + j];
                        }
                    }
                }
            }
            Op::PoolRows { x, group } => {
                let tx = val(*x);
                let (rows, c) = (tx.rows(), tx.cols());
                let inv = T::one() / T::of(*group as f64);
                if let Some(d) = slot(nodes, adj, *x) {
                    for r in 0..rows {
                        let k = r / group;
                        for j in 0..c {
                            d[r * c + j] += dy[k * c + j] * inv;
                        }
                    }
                }
            }
            Op::MeanRows(x) => {
                let tx = val(*x);
                let (rows, c) = (tx.rows(), tx.cols());
                let inv = T::one() / T::of(rows as f64);
                if let Some(d) = slot(nodes, adj, *x) {
                    for r in 0..rows {
                        for j in 0..c {
                            d[r * c + j] += dy[j] * inv;
                        }
                    }
                }
            }
            Op::MaxRows { x, argmax } => {
                let c = val(*x).cols();
                if let Some(d) = slot(nodes, adj, *x) {
                    for (j, &r) in argmax.iter().enumerate() {
                        d[r * c + j] += dy[j];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = slot(nodes, adj, *x) {
                    for g in d.iter_mut() {
                        *g += dy[0];
                    }
                }
            }
            Op::Bce { p, dp } => {
                if let Some(d) = slot(nodes, adj, *p) {
                    for (g, &v) in d.iter_mut().zip(dp) {
                        *g += v * dy[0];
                    }
                }
            }
        }
    }

    /// Adds parameter-leaf gradients into the store's accumulators.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                for (a, &b) in store.grad_mut(id).iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(Tensor::eye(2));
        let m = g.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(t(&[vec![1.0, 2.0]]));
        let b = g.constant(t(&[vec![3.0], vec![4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, 3], &[0.0, 0.0, 0.0]).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = g.constant(Tensor::from_f64(&[1, 2], &[1000.0, 1000.0]).unwrap());
        let y = g.softmax(x, 1).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.constant(Tensor::from_f64(&[1, 2], &[0.0, 3f64.ln()]).unwrap());
        let y = g.softmax(x, 1).unwrap();
        assert!((g.value(y).data()[0] - 0.25).abs() < 1e-12);
        assert!((g.value(y).data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_over_first_axis() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[vec![0.0, 1.0], vec![0.0, 1.0]]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_f64(&[1, 2], &[f64::NAN, 0.0]).unwrap());
        assert!(matches!(g.softmax(x, 1), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let gamma = g.constant(Tensor::full(&[1, 3], 1.0));
        let beta = g.constant(Tensor::zeros(&[1, 3]));
        let x = g.constant(Tensor::full(&[1, 3], 4.2));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let gamma = g.constant(Tensor::full(&[1, 2], 1.0));
        let beta = g.constant(Tensor::zeros(&[1, 2]));
        let x = g.constant(Tensor::from_f64(&[1, 2], &[1.0, -1.0]).unwrap());
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        let out = g.value(y).data();
        assert!((out[0] - 1.0).abs() < 1e-9 && (out[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn gelu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, 3], &[0.0, 20.0, -20.0]).unwrap());
        let y = g.gelu(x);
        let out = g.value(y).data();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 20.0).abs() < 1e-9);
        assert!(out[2].abs() < 1e-9);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[3], &[0.3, -1.0, 2.0]).unwrap(), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn bce_gradient_vanishes_when_clamped() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(Tensor::from_f64(&[1, 2], &[1.0, 0.5]).unwrap(), true);
        let l = g.bce(p, &[1.0, 1.0]).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(p).unwrap();
        assert_eq!(grad[0], 0.0);
        assert!((grad[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn counts_matmul_macs() {
        let mut g = Graph::<f32>::inference();
        let a = g.constant(Tensor::zeros(&[3, 4]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        g.matmul(a, b).unwrap();
        let c = g.constant(Tensor::zeros(&[7, 4]));
        g.matmul_nt(a, c).unwrap();
        assert_eq!(g.macs(), 3 * 4 * 5 + 3 * 4 * 7);
    }
}
