//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node to the graph; `backward` walks the nodes in
//! exact reverse recording order. Matrix ops take rank-2 operands.
//! Elementwise binary ops require equal shapes, except that either operand
//! may hold a single element (tensor-by-scalar).

use std::collections::BTreeMap;

use super::kernels;
use super::tensor::{numel, Tensor, TensorId};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Softplus,
    Sqrt,
    Abs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    Offset(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    SumCols(Var),
    ExpandRows(Var),
    Concat(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    NormalizeRows(Var, Vec<f64>),
    Im2Col { x: Var, h: usize, w: usize },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    param: Option<TensorId>,
}

/// Ordered record of operations with their forward values.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one [`Graph::backward`] pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<TensorId, Vec<f64>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a parameter tensor, summed over every leaf recorded from it.
    pub fn for_param(&self, id: TensorId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    /// Adds this pass's gradients into the accumulators of matching tensors.
    pub fn accumulate_into<'a, I>(&self, tensors: I)
    where
        I: IntoIterator<Item = &'a mut Tensor>,
    {
        for t in tensors {
            if let Some(g) = self.params.get(&t.id()) {
                if let Some(acc) = t.grad_mut() {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
        }
    }
}

fn is_scalar(shape: &[usize]) -> bool {
    numel(shape) == 1
}

fn as_matrix(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::dim(op, shape, &[])),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Copies a node's forward value out as a plain tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::dim("constant", &shape, &[data.len()]));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(vec![1], vec![value], Op::Leaf, false)
    }

    /// Records a tensor as a leaf; gradients flow back to it if it requires them.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        );
        self.nodes[v.0].param = Some(t.id());
        v
    }

    /// A constant copy of `v`: same value, no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix("matmul", self.shape(a))?;
        let (k2, n) = as_matrix("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::mm(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix("matmul_t", self.shape(a))?;
        let (n, k2) = as_matrix("matmul_t", self.shape(b))?;
        if k != k2 {
            return Err(Error::dim("matmul_t", self.shape(a), self.shape(b)));
        }
        let bt = kernels::transpose(self.value(b), n, k);
        let out = kernels::mm(self.value(a), &bt, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = as_matrix("transpose", self.shape(a))?;
        let out = kernels::transpose(self.value(a), m, n);
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = if sa == sb || is_scalar(sb) {
            sa.to_vec()
        } else if is_scalar(sa) {
            sb.to_vec()
        } else {
            let name = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            };
            return Err(Error::dim(name, sa, sb));
        };
        let (va, vb) = (self.value(a), self.value(b));
        let n = numel(&shape);
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let x = if va.len() == 1 { va[0] } else { va[i] };
                let y = if vb.len() == 1 { vb[0] } else { vb[i] };
                f(x, y)
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .map(|&x| match kind {
                Unary::Relu => x.max(0.0),
                Unary::Sigmoid => kernels::sigmoid(x),
                Unary::Exp => x.exp(),
                Unary::Log => x.ln(),
                Unary::Softplus => kernels::softplus(x),
                Unary::Sqrt => x.sqrt(),
                Unary::Abs => x.abs(),
            })
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Unary(kind, a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Scale(a, c), rg)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Offset(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = kernels::fixed_sum(self.value(a));
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = kernels::fixed_sum(v) / v.len() as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Mean(a), rg)
    }

    /// Column sums: `m×n → 1×n`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = as_matrix("sum_rows", self.shape(a))?;
        let v = self.value(a);
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, x) in out.iter_mut().zip(&v[r * n..(r + 1) * n]) {
                *o += x;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![1, n], out, Op::SumRows(a), rg))
    }

    /// Column means: `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = as_matrix("mean_rows", self.shape(a))?;
        if m == 0 {
            return Err(Error::dim("mean_rows", self.shape(a), &[1, n]));
        }
        let v = self.value(a);
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, x) in out.iter_mut().zip(&v[r * n..(r + 1) * n]) {
                *o += x;
            }
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(a);
        Ok(self.push(vec![1, n], out, Op::MeanRows(a), rg))
    }

    /// Max-pool over points (rows): `m×n → 1×n`. The gradient goes to the
    /// first row holding the maximum.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = as_matrix("max_rows", self.shape(a))?;
        if m == 0 {
            return Err(Error::dim("max_rows", self.shape(a), &[1, n]));
        }
        let v = self.value(a);
        let mut out = v[..n].to_vec();
        let mut arg = vec![0usize; n];
        for r in 1..m {
            for c in 0..n {
                let x = v[r * n + c];
                if x > out[c] {
                    out[c] = x;
                    arg[c] = r;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![1, n], out, Op::MaxRows(a, arg), rg))
    }

    /// Row sums: `m×n → m×1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (m, n) = as_matrix("sum_cols", self.shape(a))?;
        let v = self.value(a);
        let out = (0..m).map(|r| kernels::fixed_sum(&v[r * n..(r + 1) * n])).collect();
        let rg = self.rg(a);
        Ok(self.push(vec![m, 1], out, Op::SumCols(a), rg))
    }

    /// Repeats a `1×n` row `m` times.
    pub fn expand_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let (r, n) = as_matrix("expand_rows", self.shape(a))?;
        if r != 1 {
            return Err(Error::dim("expand_rows", self.shape(a), &[1, n]));
        }
        let row = self.value(a);
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(row);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![m, n], out, Op::ExpandRows(a), rg))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (m, _) = as_matrix("concat", self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = as_matrix("concat", self.shape(p))?;
            if r != m {
                return Err(Error::dim("concat", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![m, total], out, Op::Concat(parts.to_vec()), rg))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = as_matrix("slice_rows", self.shape(a))?;
        if start > end || end > m {
            return Err(Error::dim("slice_rows", self.shape(a), &[start, end]));
        }
        let out = self.value(a)[start * n..end * n].to_vec();
        let rg = self.rg(a);
        Ok(self.push(vec![end - start, n], out, Op::SliceRows(a, start), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = as_matrix("slice_cols", self.shape(a))?;
        if start > end || end > n {
            return Err(Error::dim("slice_cols", self.shape(a), &[start, end]));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            out.extend_from_slice(&v[r * n + start..r * n + end]);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![m, end - start], out, Op::SliceCols(a, start), rg))
    }

    /// Softmax over the last axis of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = as_matrix("softmax_rows", self.shape(a))?;
        let v = self.value(a);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &v[r * n..(r + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * n..(r + 1) * n];
            for (oi, &x) in o.iter_mut().zip(row) {
                *oi = (x - mx).exp();
            }
            let s = kernels::fixed_sum(o);
            o.iter_mut().for_each(|x| *x /= s);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![m, n], out, Op::Softmax(a), rg))
    }

    /// Per-row standardization to zero mean and unit variance (no affine).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (m, n) = as_matrix("layer_norm_rows", self.shape(a))?;
        let v = self.value(a);
        let mut out = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for r in 0..m {
            let row = &v[r * n..(r + 1) * n];
            let mean = kernels::fixed_sum(row) / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for (o, &x) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (x - mean) * inv;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![m, n], out, Op::LayerNorm(a, inv_std), rg))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = as_matrix("normalize_rows", self.shape(a))?;
        let v = self.value(a);
        let mut out = vec![0.0; m * n];
        let mut norms = vec![0.0; m];
        for r in 0..m {
            let row = &v[r * n..(r + 1) * n];
            let nrm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            norms[r] = nrm;
            for (o, &x) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = x / nrm;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![m, n], out, Op::NormalizeRows(a, norms), rg))
    }

    /// 3×3 neighbourhood gather with zero padding. Input is an image stored
    /// as `(h·w) × c` (pixels row-major); output is `(h·w) × 9c` where the
    /// block `k = 3·(dy+1) + (dx+1)` holds the channels of pixel `(y+dy, x+dx)`.
    pub fn im2col3x3(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let (p, c) = as_matrix("im2col3x3", self.shape(a))?;
        if p != h * w {
            return Err(Error::dim("im2col3x3", self.shape(a), &[h, w]));
        }
        let out = kernels::im2col3x3(self.value(a), h, w, c);
        let rg = self.rg(a);
        Ok(self.push(vec![p, 9 * c], out, Op::Im2Col { x: a, h, w }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(a)) {
            return Err(Error::dim("reshape", self.shape(a), &shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Reshape(a), rg))
    }

    /// Reverse pass from a scalar loss. Returns this pass's gradients; use
    /// [`Gradients::accumulate_into`] to add them to parameter tensors.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !is_scalar(self.shape(loss)) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        let mut params: BTreeMap<TensorId, Vec<f64>> = BTreeMap::new();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Some(id), Some(g), true) = (node.param, g, node.requires_grad) {
                match params.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
                    None => {
                        params.insert(id, g.clone());
                    }
                }
            }
        }
        Ok(Gradients { grads, params })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if let Some(ga) = self.slot(grads, *a) {
                    let bt = kernels::transpose(&self.nodes[b.0].value, k, n);
                    kernels::mm_acc(gout, &bt, m, n, k, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::mm_tn_acc(&self.nodes[a.0].value, gout, m, k, n, gb);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[0];
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::mm_acc(gout, &self.nodes[b.0].value, m, n, k, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::mm_tn_acc(gout, &self.nodes[a.0].value, m, n, k, gb);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                if let Some(ga) = self.slot(grads, *a) {
                    let t = kernels::transpose(gout, n, m);
                    add_into(ga, &t);
                }
            }
            Op::Binary(kind, a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let at = |v: &[f64], j: usize| if v.len() == 1 { v[0] } else { v[j] };
                if let Some(ga) = self.slot(grads, *a) {
                    let bcast = ga.len() == 1 && gout.len() != 1;
                    for (j, &go) in gout.iter().enumerate() {
                        let d = match kind {
                            Binary::Add | Binary::Sub => go,
                            Binary::Mul => go * at(vb, j),
                            Binary::Div => go / at(vb, j),
                        };
                        if bcast {
                            ga[0] += d;
                        } else {
                            ga[j] += d;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let bcast = gb.len() == 1 && gout.len() != 1;
                    for (j, &go) in gout.iter().enumerate() {
                        let d = match kind {
                            Binary::Add => go,
                            Binary::Sub => -go,
                            Binary::Mul => go * at(va, j),
                            Binary::Div => {
                                let y = at(vb, j);
                                -go * at(va, j) / (y * y)
                            }
                        };
                        if bcast {
                            gb[0] += d;
                        } else {
                            gb[j] += d;
                        }
                    }
                }
            }
            Op::Unary(kind, a) => {
                let x = &self.nodes[a.0].value;
                let y = &node.value;
                if let Some(ga) = self.slot(grads, *a) {
                    for j in 0..gout.len() {
                        let d = match kind {
                            Unary::Relu => {
                                if x[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sigmoid => y[j] * (1.0 - y[j]),
                            Unary::Exp => y[j],
                            Unary::Log => 1.0 / x[j],
                            Unary::Softplus => kernels::sigmoid(x[j]),
                            Unary::Sqrt => 0.5 / y[j].max(1e-300),
                            Unary::Abs => {
                                if x[j] > 0.0 {
                                    1.0
                                } else if x[j] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        ga[j] += gout[j] * d;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (g, go) in ga.iter_mut().zip(gout) {
                        *g += go * c;
                    }
                }
            }
            Op::Offset(a) | Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, gout);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|g| *g += gout[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let d = gout[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|g| *g += d);
                }
            }
            Op::SumRows(a) => {
                let n = gout.len();
                if let Some(ga) = self.slot(grads, *a) {
                    for row in ga.chunks_mut(n) {
                        add_into(row, gout);
                    }
                }
            }
            Op::MeanRows(a) => {
                let n = gout.len();
                let m = self.nodes[a.0].shape[0];
                let inv = 1.0 / m as f64;
                if let Some(ga) = self.slot(grads, *a) {
                    for row in ga.chunks_mut(n) {
                        for (g, go) in row.iter_mut().zip(gout) {
                            *g += go * inv;
                        }
                    }
                }
            }
            Op::MaxRows(a, arg) => {
                let n = gout.len();
                if let Some(ga) = self.slot(grads, *a) {
                    for (c, &r) in arg.iter().enumerate() {
                        ga[r * n + c] += gout[c];
                    }
                }
            }
            Op::SumCols(a) => {
                let n = self.nodes[a.0].shape[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for (row, go) in ga.chunks_mut(n).zip(gout) {
                        row.iter_mut().for_each(|g| *g += go);
                    }
                }
            }
            Op::ExpandRows(a) => {
                let n = self.nodes[a.0].shape[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for row in gout.chunks(n) {
                        add_into(ga, row);
                    }
                }
            }
            Op::Concat(parts) => {
                let m = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].shape[1];
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..m {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &gout[r * total + off..r * total + off + w],
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let n = node.shape[1];
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(&mut ga[start * n..start * n + gout.len()], gout);
                }
            }
            Op::SliceCols(a, start) => {
                let n = self.nodes[a.0].shape[1];
                let w = node.shape[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, go) in gout.chunks(w.max(1)).enumerate() {
                        add_into(&mut ga[r * n + start..r * n + start + w], go);
                    }
                }
            }
            Op::Softmax(a) => {
                let n = node.shape[1];
                let y = &node.value;
                if let Some(ga) = self.slot(grads, *a) {
                    for ((gr, yr), gor) in ga.chunks_mut(n).zip(y.chunks(n)).zip(gout.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gor).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gr[j] += yr[j] * (gor[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm(a, inv_std) => {
                let n = node.shape[1];
                let y = &node.value;
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, ((gr, yr), gor)) in ga
                        .chunks_mut(n)
                        .zip(y.chunks(n))
                        .zip(gout.chunks(n))
                        .enumerate()
                    {
                        let mean_g = gor.iter().sum::<f64>() / n as f64;
                        let mean_gy = gor.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gr[j] += inv_std[r] * (gor[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
            }
            Op::NormalizeRows(a, norms) => {
                let n = node.shape[1];
                let y = &node.value;
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, ((gr, yr), gor)) in ga
                        .chunks_mut(n)
                        .zip(y.chunks(n))
                        .zip(gout.chunks(n))
                        .enumerate()
                    {
                        let dot: f64 = yr.iter().zip(gor).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gr[j] += (gor[j] - yr[j] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::Im2Col { x, h, w } => {
                let c = self.nodes[x.0].shape[1];
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::col2im3x3_acc(gout, *h, *w, c, gx);
                }
            }
        }
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += x;
    }
}
