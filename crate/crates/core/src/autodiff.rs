//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a Wengert list: every operation appends a node whose inputs
//! were appended earlier, so the node order is already topological and
//! [`Graph::backward`] simply walks it in reverse. Graphs are single-threaded;
//! build one per sample (or per thread) and drop it after the backward pass.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Strided, Tensor};

/// Handle to a node in a [`Graph`].
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
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Adds a vector along the last axis of every row.
    AddRowVector(Var, Var),
    Scale(Var, f64),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Sum(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Select {
        x: Var,
        index: usize,
    },
    LnFloor {
        x: Var,
        floor: f64,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_COEF: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// Recorded computation (the computation tape).
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Same value as `x`, but gradients stop here.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = Arc::clone(&self.nodes[x.0].value);
        self.leaf_shared(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).expect_rank2("matmul_t lhs")?;
        let (n, k2) = self.value(b).expect_rank2("matmul_t rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_t inner dimensions {m}x{k} * ({n}x{k2})ᵀ"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            Strided::row_major(self.value(a).data(), k),
            Strided::transposed(self.value(b).data(), k),
            &mut out,
        );
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// `x + v` with `v` broadcast over every row of `x`; `v` must hold exactly
    /// as many values as the last axis of `x`.
    pub fn add_row_vector(&mut self, x: Var, v: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(v).numel() != cols {
            return Err(Error::Dimension(format!(
                "row vector of {} values added to rows of {cols}",
                self.value(v).numel()
            )));
        }
        let vd = self.value(v).data();
        let tx = self.value(x);
        let data = tx
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(vd).map(|(a, b)| a + b))
            .collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(out, Op::AddRowVector(x, v), &[x, v]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let (outer, len, inner) = axis_split(tx.shape(), axis)?;
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| src[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..len {
                    let e = (src[at(i)] - max).exp();
                    out[at(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    out[at(i)] /= total;
                }
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalises each row (last axis) to zero mean and unit variance, then
    /// applies `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let e = tx.cols();
        if self.value(gamma).numel() != e || self.value(beta).numel() != e {
            return Err(Error::Dimension(format!("layer_norm affine must have {e} values")));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = tx.numel() / e;
        let mut normalized = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for (r, row) in tx.data().chunks(e).enumerate() {
            let mean = row.iter().sum::<f64>() / e as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / e as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..e {
                let xh = (row[c] - mean) * is;
                normalized[r * e + c] = xh;
                out[r * e + c] = g[c] * xh + b[c];
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            let t = (GELU_SCALE * (v + GELU_COEF * v * v * v)).tanh();
            0.5 * v * (1.0 + t)
        });
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(x).expect_rank2("slice_rows")?;
        if start >= end || end > r {
            return Err(Error::Dimension(format!("row slice {start}..{end} of {r}")));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let out = Tensor::from_parts(vec![end - start, c], data);
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(x).expect_rank2("slice_cols")?;
        if start >= end || end > c {
            return Err(Error::Dimension(format!("column slice {start}..{end} of {c}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * (end - start));
        for row in src.chunks(c) {
            data.extend_from_slice(&row[start..end]);
        }
        let out = Tensor::from_parts(vec![r, end - start], data);
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).expect_rank2("concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).expect_rank2("concat_rows")?;
            if c != cols {
                return Err(Error::Dimension(format!("concat_rows: {c} vs {cols} columns")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_parts(vec![rows, cols], data);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).expect_rank2("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).expect_rank2("concat_cols")?;
            if r != rows {
                return Err(Error::Dimension(format!("concat_cols: {r} vs {rows} rows")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::from_parts(vec![rows, total], data);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Scalar holding the element at flat position `index`.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let len = self.value(x).numel();
        if index >= len {
            return Err(Error::Index { index, len });
        }
        let out = Tensor::scalar(self.value(x).data()[index]);
        Ok(self.push(out, Op::Select { x, index }, &[x]))
    }

    /// `ln(max(x, floor))` elementwise.
    pub fn ln_floor(&mut self, x: Var, floor: f64) -> Var {
        let out = self.value(x).map(|v| v.max(floor).ln());
        self.push(out, Op::LnFloor { x, floor }, &[x])
    }

    /// Reverse-mode sweep from a scalar `output`. The graph is not modified,
    /// so repeated calls return identical gradients.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(Tensor::filled(self.shape(output), 1.0));

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, g: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += x;
                    }
                }
                slot => *slot = Some(g),
            }
        };
        let needs = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        Strided::row_major(dy.data(), n),
                        Strided::transposed(tb.data(), n),
                        &mut da,
                    );
                    acc(*a, Tensor::from_parts(vec![m, k], da));
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        Strided::transposed(ta.data(), k),
                        Strided::row_major(dy.data(), n),
                        &mut db,
                    );
                    acc(*b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.rows();
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        Strided::row_major(dy.data(), n),
                        Strided::row_major(tb.data(), k),
                        &mut da,
                    );
                    acc(*a, Tensor::from_parts(vec![m, k], da));
                }
                if needs(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(
                        n,
                        m,
                        k,
                        Strided::transposed(dy.data(), n),
                        Strided::row_major(ta.data(), k),
                        &mut db,
                    );
                    acc(*b, Tensor::from_parts(vec![n, k], db));
                }
            }
            Op::Transpose(x) => acc(*x, dy.transpose().expect("rank 2")),
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let d = dy.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    acc(*a, Tensor::from_parts(dy.shape().to_vec(), d));
                }
                if needs(*b) {
                    let d = dy.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    acc(*b, Tensor::from_parts(dy.shape().to_vec(), d));
                }
            }
            Op::AddRowVector(x, v) => {
                acc(*x, dy.clone());
                if needs(*v) {
                    let cols = dy.cols();
                    let mut dv = vec![0.0; cols];
                    for row in dy.data().chunks(cols) {
                        for (d, g) in dv.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    acc(*v, Tensor::from_parts(self.shape(*v).to_vec(), dv));
                }
            }
            Op::Scale(x, factor) => acc(*x, dy.map(|g| g * factor)),
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(dy.shape(), *axis).expect("validated");
                let g = dy.data();
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let dot: f64 = (0..len).map(|i| y[at(i)] * g[at(i)]).sum();
                        for i in 0..len {
                            dx[at(i)] = y[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
                acc(*x, Tensor::from_parts(dy.shape().to_vec(), dx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let e = dy.cols();
                let gd = self.value(*gamma).data();
                let g = dy.data();
                if needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let row = r * e..(r + 1) * e;
                        let dxh: Vec<f64> = g[row.clone()].iter().zip(gd).map(|(a, b)| a * b).collect();
                        let xh = &normalized[row.clone()];
                        let sum_dxh: f64 = dxh.iter().sum();
                        let sum_dxh_xh: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for c in 0..e {
                            dx[r * e + c] =
                                is / e as f64 * (e as f64 * dxh[c] - sum_dxh - xh[c] * sum_dxh_xh);
                        }
                    }
                    acc(*x, Tensor::from_parts(dy.shape().to_vec(), dx));
                }
                if needs(*gamma) {
                    let mut dg = vec![0.0; e];
                    for (i, (gv, xh)) in g.iter().zip(normalized).enumerate() {
                        dg[i % e] += gv * xh;
                    }
                    acc(*gamma, Tensor::from_parts(self.shape(*gamma).to_vec(), dg));
                }
                if needs(*beta) {
                    let mut db = vec![0.0; e];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % e] += gv;
                    }
                    acc(*beta, Tensor::from_parts(self.shape(*beta).to_vec(), db));
                }
            }
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                let d = dy
                    .data()
                    .iter()
                    .zip(xs)
                    .map(|(g, &v)| {
                        let inner = GELU_SCALE * (v + GELU_COEF * v * v * v);
                        let t = inner.tanh();
                        let dinner = GELU_SCALE * (1.0 + 3.0 * GELU_COEF * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
                    })
                    .collect();
                acc(*x, Tensor::from_parts(dy.shape().to_vec(), d));
            }
            Op::Sum(x) => acc(*x, Tensor::filled(self.shape(*x), dy.item())),
            Op::SliceRows { x, start } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let c = dy.cols();
                dx.data_mut()[start * c..start * c + dy.numel()].copy_from_slice(dy.data());
                acc(*x, dx);
            }
            Op::SliceCols { x, start } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let (w, c) = (dy.cols(), dx.cols());
                for (r, row) in dy.data().chunks(w).enumerate() {
                    dx.data_mut()[r * c + start..r * c + start + w].copy_from_slice(row);
                }
                acc(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let piece = dy.data()[offset..offset + n].to_vec();
                    acc(p, Tensor::from_parts(self.shape(p).to_vec(), piece));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = dy.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut piece = Vec::with_capacity(self.value(p).numel());
                    for row in dy.data().chunks(total) {
                        piece.extend_from_slice(&row[offset..offset + w]);
                    }
                    acc(p, Tensor::from_parts(self.shape(p).to_vec(), piece));
                    offset += w;
                }
            }
            Op::Select { x, index } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                dx.data_mut()[*index] = dy.item();
                acc(*x, dx);
            }
            Op::LnFloor { x, floor } => {
                let xs = self.value(*x).data();
                let d = dy
                    .data()
                    .iter()
                    .zip(xs)
                    .map(|(g, &v)| if v > *floor { g / v } else { 0.0 })
                    .collect();
                acc(*x, Tensor::from_parts(dy.shape().to_vec(), d));
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the output w.r.t. `v`, `None` when `v` does not influence
    /// the output or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Denominator floor for [`relative_error`]; components smaller than this
/// are compared with an absolute tolerance of `floor · rel_tol` instead.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Largest relative error between reverse-mode gradients of `f` at `x` and
/// central finite differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[which].shape()));
        for i in 0..inputs[which].numel() {
            let orig = inputs[which].data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[which].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.square(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let c = g.constant(Tensor::scalar(7.0));
        let zero = g.scale(x, 0.0);
        let y = g.add(zero, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 0.0);
    }

    #[test]
    fn product_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let y = g.leaf(Tensor::scalar(5.0), true);
        let p = g.mul(x, y).unwrap();
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
        assert_eq!(grads.get(y).unwrap().item(), 2.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_is_identical() {
        let mut r = rng(3);
        let mut g = Graph::new();
        let a = g.leaf(Tensor::randn(&[3, 4], 1.0, &mut r), true);
        let b = g.leaf(Tensor::randn(&[4, 2], 1.0, &mut r), true);
        let m = g.matmul(a, b).unwrap();
        let s = g.softmax(m, 1).unwrap();
        let sq = g.square(s).unwrap();
        let out = g.sum(sq);
        let first = g.backward(out).unwrap();
        let second = g.backward(out).unwrap();
        assert_eq!(first.get(a), second.get(a));
        assert_eq!(first.get(b), second.get(b));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::new(vec![2], vec![2f64.ln(), 0.0]).unwrap());
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-15 && (v[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 3.0]]).unwrap());
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s);
        assert!((v.at(0, 0) - 0.5).abs() < 1e-15);
        assert!((v.at(0, 1) + v.at(1, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gamma = g.constant(Tensor::ones(&[2]));
        let beta = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::from_rows(&[vec![1.0, -1.0], vec![4.0, 4.0]]).unwrap());
        let y = g.layer_norm(x, gamma, beta).unwrap();
        let v = g.value(y);
        // unit variance row is reproduced up to the epsilon inside the sqrt
        assert!((v.at(0, 0) - 1.0).abs() < 1e-5 && (v.at(0, 1) + 1.0).abs() < 1e-5);
        assert_eq!(v.row(1), &[0.0, 0.0]);

        let gamma0 = g.constant(Tensor::zeros(&[2]));
        let beta2 = g.constant(Tensor::new(vec![2], vec![0.3, -0.7]).unwrap());
        let y = g.layer_norm(x, gamma0, beta2).unwrap();
        assert_eq!(g.value(y).row(0), &[0.3, -0.7]);
        assert_eq!(g.value(y).row(1), &[0.3, -0.7]);
    }

    #[test]
    fn gradcheck_sum_of_squares() {
        let x = Tensor::randn(&[4, 5], 1.0, &mut rng(5));
        let err = grad_check(
            |g, x| {
                let s = g.square(x)?;
                Ok(g.sum(s))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn gradcheck_linear_is_exact() {
        let x = Tensor::randn(&[6], 1.0, &mut rng(6));
        let err = grad_check(
            |g, x| {
                let s = g.scale(x, 3.0);
                Ok(g.sum(s))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn gradcheck_every_primitive() {
        let mut r = rng(17);
        let a = Tensor::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[4, 5], 1.0, &mut r);
        let c = Tensor::randn(&[4, 5], 1.0, &mut r);
        let w = Tensor::randn(&[3, 5], 1.0, &mut r);
        let gamma = Tensor::randn(&[5], 1.0, &mut r);
        let beta = Tensor::randn(&[5], 1.0, &mut r);
        let bias = Tensor::randn(&[5], 1.0, &mut r);
        let inputs = [a, b, c, w, gamma, beta, bias];
        let err = grad_check_many(
            |g, v| {
                let ab = g.matmul(v[0], v[1])?; // 3x5
                let abt = g.matmul_t(ab, v[2])?; // 3x4
                let t = g.transpose(abt)?; // 4x3
                let back = g.transpose(t)?;
                let ln_in = g.matmul(back, v[1])?; // 3x5
                let biased = g.add_row_vector(ln_in, v[6])?;
                let ln = g.layer_norm(biased, v[4], v[5])?;
                let act = g.gelu(ln);
                let sm = g.softmax(act, 0)?;
                let sm1 = g.softmax(act, 1)?;
                let prod = g.mul(sm, v[3])?;
                let diff = g.sub(prod, sm1)?;
                let top = g.slice_rows(diff, 1, 3)?;
                let left = g.slice_cols(top, 0, 2)?;
                let right = g.slice_cols(top, 2, 5)?;
                let cat = g.concat_cols(&[right, left])?;
                let cat2 = g.concat_rows(&[cat, top])?;
                let scaled = g.scale(cat2, 0.7);
                let sq = g.square(scaled)?;
                let pick = g.select(sm1, 4)?;
                let logp = g.ln_floor(pick, 1e-12);
                let total = g.sum(sq);
                let m = g.mean(sq);
                let t2 = g.add(total, logp)?;
                g.add(t2, m)
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn ln_floor_clamps_and_stops_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0), true);
        let y = g.ln_floor(x, 1e-12);
        assert!((g.value(y).item() - 1e-12f64.ln()).abs() < 1e-12);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 0.0);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_are_distributions(
                vals in proptest::collection::vec(-15.0f64..15.0, 12),
                shift in -100.0f64..100.0,
            ) {
                let mut g = Graph::new();
                let x = g.constant(Tensor::new(vec![3, 4], vals.clone()).unwrap());
                let s = g.softmax(x, 1).unwrap();
                let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
                let xs = g.constant(Tensor::new(vec![3, 4], shifted).unwrap());
                let ss = g.softmax(xs, 1).unwrap();
                for r in 0..3 {
                    let row = g.value(s).row(r);
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
                }
                prop_assert!(g.value(s).max_abs_diff(g.value(ss)) < 1e-12);
            }
        }
    }
}
