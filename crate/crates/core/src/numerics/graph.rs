//! Reverse-mode differentiation over a linear operation record.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the record is a topological order by construction and
//! `backward` simply walks it in reverse.

use super::tensor::{self, matmul, matmul_nt, matmul_tn, softmax_rows, Tensor};
use crate::error::{Error, Result};

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
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Reshape(Var),
    Conv1d {
        x: Var,
        kernels: Var,
        stride: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
    grad: Option<Tensor>,
}

/// Operation record for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
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

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            tracked,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let tr = self.tracked(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), tr))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (_, cb) = self.dims(b);
        if ca != cb || self.value(a).rank() != 2 || self.value(b).rank() != 2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let out = if ra == 0 {
            Tensor::from_parts(vec![0, self.dims(b).0], vec![])
        } else {
            matmul_nt(self.value(a), self.value(b))
        };
        let tr = self.tracked(&[a, b]);
        Ok(self.push(out, Op::MatMulNT(a, b), tr))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let tr = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), tr))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let tr = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), tr))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let tr = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), tr))
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.value(row).len() != c {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let mut out = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for i in 0..r {
            for (o, b) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(&bias) {
                *o += b;
            }
        }
        let tr = self.tracked(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), tr))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let tr = self.tracked(&[a]);
        self.push(out, Op::Scale(a, s), tr)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let tr = self.tracked(&[a]);
        self.push(out, Op::AddScalar(a), tr)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let tr = self.tracked(&[a]);
        self.push(out, Op::Gelu(a), tr)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let tr = self.tracked(&[a]);
        self.push(out, Op::Square(a), tr)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let tr = self.tracked(&[a]);
        self.push(out, Op::SoftmaxRows(a), tr)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims2();
        let mut out = x.data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        let tr = self.tracked(&[a]);
        self.push(out, Op::LogSoftmaxRows(a), tr)
    }

    /// Per-row layer normalization with learned `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x);
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let (mean, var) = tensor::moments(row);
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * inv;
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(k, v)| v * g[k % c] + b[k % c])
            .collect();
        let shape = xv.shape().to_vec();
        let out = Tensor::from_parts(shape.clone(), out);
        let tr = self.tracked(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: Tensor::from_parts(shape, xhat),
                inv_std,
            },
            tr,
        ))
    }

    /// Scales every row to unit Euclidean norm. Zero rows are rejected.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let mut norms = Vec::with_capacity(r);
        let mut out = xv.data().to_vec();
        for i in 0..r {
            let n = xv.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::invalid(format!("row {i} has zero or non-finite norm")));
            }
            out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let tr = self.tracked(&[x]);
        Ok(self.push(out, Op::NormalizeRows { x, norms }, tr))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let tr = self.tracked(&[a]);
        self.push(out, Op::Transpose(a), tr)
    }

    /// Stacks rank-2 inputs vertically. Inputs with zero rows are allowed.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let c = self.dims(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let out = Tensor::from_parts(vec![rows, c], data);
        let tr = self.tracked(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), tr))
    }

    /// Joins rank-2 inputs side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let r = self.dims(first).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        for &p in parts {
            if self.dims(p).0 != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for i in 0..r {
                data[i * total + off..i * total + off + w].copy_from_slice(v.row(i));
            }
            off += w;
        }
        let out = Tensor::from_parts(vec![r, total], data);
        let tr = self.tracked(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), tr))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start >= end || end > c {
            return Err(Error::invalid(format!("column slice {start}..{end} of width {c}")));
        }
        let w = end - start;
        let v = self.value(a);
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&v.row(i)[start..end]);
        }
        let out = Tensor::from_parts(vec![r, w], data);
        let tr = self.tracked(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start, end), tr))
    }

    /// Selects rows by index (repeats allowed, empty selection allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(format!("row index {bad} out of range for {r} rows")));
        }
        let v = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(v.row(i));
        }
        let out = Tensor::from_parts(vec![idx.len(), c], data);
        let tr = self.tracked(&[a]);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec()), tr))
    }

    /// For each row `i`, picks column `cols[i]`; yields a vector.
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return Err(Error::invalid(format!("pick_cols needs {r} indices below {c}")));
        }
        let v = self.value(a);
        let data = cols.iter().enumerate().map(|(i, &j)| v.at2(i, j)).collect();
        let out = Tensor::vector(data);
        let tr = self.tracked(&[a]);
        Ok(self.push(out, Op::PickCols(a, cols.to_vec()), tr))
    }

    /// Mean over rows, giving a `1×c` matrix.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r == 0 {
            return Err(Error::invalid("mean over zero rows"));
        }
        let v = self.value(a);
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (d, x) in data.iter_mut().zip(v.row(i)) {
                *d += x;
            }
        }
        data.iter_mut().for_each(|d| *d /= r as f64);
        let out = Tensor::from_parts(vec![1, c], data);
        let tr = self.tracked(&[a]);
        Ok(self.push(out, Op::MeanRows(a), tr))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let tr = self.tracked(&[a]);
        self.push(out, Op::Sum(a), tr)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let out = Tensor::scalar(self.value(a).sum() / n as f64);
        let tr = self.tracked(&[a]);
        Ok(self.push(out, Op::Mean(a), tr))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let tr = self.tracked(&[a]);
        Ok(self.push(out, Op::Reshape(a), tr))
    }

    /// Valid strided 1-D convolution, differentiable in both arguments.
    pub fn conv1d(&mut self, x: Var, kernels: Var, stride: usize) -> Result<Var> {
        let out = tensor::conv1d(self.value(x), self.value(kernels), stride)?;
        let tr = self.tracked(&[x, kernels]);
        Ok(self.push(out, Op::Conv1d { x, kernels, stride }, tr))
    }

    /// Mean squared difference between `a` and `b`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        self.mean(sq)
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.tracked {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    /// Back-propagates from a scalar `root`, filling gradient accumulators for
    /// every tracked node that `root` depends on.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let shape = self.shape(root).to_vec();
        self.nodes[root.0].grad = Some(Tensor::filled(&shape, 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor) {
        // Temporarily move the op out so parent values can be borrowed freely.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = matmul_nt(g, self.value(*b));
                let gb = matmul_tn(self.value(*a), g);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::MatMulNT(a, b) => {
                // out = a·bᵀ: da = g·b, db = gᵀ·a.
                let (ra, ca) = self.dims(*a);
                let (rb, _) = self.dims(*b);
                let ga = if ra == 0 {
                    Tensor::from_parts(vec![0, ca], vec![])
                } else {
                    matmul(g, self.value(*b)).expect("shapes checked in forward")
                };
                let gb = if ra == 0 {
                    Tensor::zeros(&[rb, ca])
                } else {
                    matmul_tn(g, self.value(*a))
                };
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |x, y| x * y);
                let gb = g.zip_map(self.value(*a), |x, y| x * y);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::AddRow(a, row) => {
                let (r, c) = g.dims2();
                let mut gr = vec![0.0; c];
                for k in 0..r {
                    for (d, x) in gr.iter_mut().zip(g.row(k)) {
                        *d += x;
                    }
                }
                let shape = self.shape(*row).to_vec();
                self.accumulate(*a, g.clone());
                self.accumulate(*row, Tensor::from_parts(shape, gr));
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(*a, g.map(|x| x * s));
            }
            Op::AddScalar(a) => self.accumulate(*a, g.clone()),
            Op::Gelu(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| gv * gelu_grad(x));
                self.accumulate(*a, ga);
            }
            Op::Square(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| 2.0 * gv * x);
                self.accumulate(*a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let (r, c) = y.dims2();
                let mut ga = vec![0.0; r * c];
                for k in 0..r {
                    let (yr, gr) = (y.row(k), g.row(k));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        ga[k * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                let ga = Tensor::from_parts(y.shape().to_vec(), ga);
                self.accumulate(*a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let (r, c) = y.dims2();
                let mut ga = vec![0.0; r * c];
                for k in 0..r {
                    let (yr, gr) = (y.row(k), g.row(k));
                    let total: f64 = gr.iter().sum();
                    for j in 0..c {
                        ga[k * c + j] = gr[j] - yr[j].exp() * total;
                    }
                }
                let ga = Tensor::from_parts(y.shape().to_vec(), ga);
                self.accumulate(*a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, c) = xhat.dims2();
                let gv = self.value(*gain).data().to_vec();
                let mut gx = vec![0.0; r * c];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                let n = c as f64;
                for k in 0..r {
                    let (xh, gr) = (xhat.row(k), g.row(k));
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..c {
                        let d = gr[j] * gv[j];
                        sum_d += d;
                        sum_dx += d * xh[j];
                        gg[j] += gr[j] * xh[j];
                        gb[j] += gr[j];
                    }
                    for j in 0..c {
                        let d = gr[j] * gv[j];
                        gx[k * c + j] = inv_std[k] / n * (n * d - sum_d - xh[j] * sum_dx);
                    }
                }
                let gshape = self.shape(*gain).to_vec();
                let bshape = self.shape(*bias).to_vec();
                self.accumulate(*x, Tensor::from_parts(xhat.shape().to_vec(), gx));
                self.accumulate(*gain, Tensor::from_parts(gshape, gg));
                self.accumulate(*bias, Tensor::from_parts(bshape, gb));
            }
            Op::NormalizeRows { x, norms } => {
                let y = &self.nodes[i].value;
                let (r, c) = y.dims2();
                let mut gx = vec![0.0; r * c];
                for k in 0..r {
                    let (yr, gr) = (y.row(k), g.row(k));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        gx[k * c + j] = (gr[j] - yr[j] * dot) / norms[k];
                    }
                }
                let gx = Tensor::from_parts(y.shape().to_vec(), gx);
                self.accumulate(*x, gx);
            }
            Op::Transpose(a) => self.accumulate(*a, g.transpose()),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.dims(p);
                    let slice = g.data()[off * c..(off + r) * c].to_vec();
                    let shape = self.shape(p).to_vec();
                    self.accumulate(p, Tensor::from_parts(shape, slice));
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = g.dims2();
                let mut off = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    let mut data = Vec::with_capacity(r * w);
                    for k in 0..r {
                        data.extend_from_slice(&g.data()[k * total + off..k * total + off + w]);
                    }
                    let shape = self.shape(p).to_vec();
                    self.accumulate(p, Tensor::from_parts(shape, data));
                    off += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                let (r, c) = self.dims(*a);
                let w = end - start;
                let mut data = vec![0.0; r * c];
                for k in 0..r {
                    data[k * c + start..k * c + end].copy_from_slice(&g.data()[k * w..(k + 1) * w]);
                }
                let shape = self.shape(*a).to_vec();
                self.accumulate(*a, Tensor::from_parts(shape, data));
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.dims(*a);
                let mut data = vec![0.0; r * c];
                for (k, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        data[src * c + j] += g.data()[k * c + j];
                    }
                }
                let shape = self.shape(*a).to_vec();
                self.accumulate(*a, Tensor::from_parts(shape, data));
            }
            Op::PickCols(a, cols) => {
                let (r, c) = self.dims(*a);
                let mut data = vec![0.0; r * c];
                for (k, &j) in cols.iter().enumerate() {
                    data[k * c + j] = g.data()[k];
                }
                let shape = self.shape(*a).to_vec();
                self.accumulate(*a, Tensor::from_parts(shape, data));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.dims(*a);
                let inv = 1.0 / r as f64;
                let mut data = Vec::with_capacity(r * c);
                for _ in 0..r {
                    data.extend(g.data().iter().map(|v| v * inv));
                }
                let shape = self.shape(*a).to_vec();
                self.accumulate(*a, Tensor::from_parts(shape, data));
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(*a, Tensor::filled(&shape, g.data()[0]));
            }
            Op::Mean(a) => {
                let shape = self.shape(*a).to_vec();
                let n = self.value(*a).len() as f64;
                self.accumulate(*a, Tensor::filled(&shape, g.data()[0] / n));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                let ga = Tensor::from_parts(shape, g.data().to_vec());
                self.accumulate(*a, ga);
            }
            Op::Conv1d { x, kernels, stride } => {
                let xv = self.value(*x);
                let kv = self.value(*kernels);
                let (cin, cout) = (xv.shape()[1], kv.shape()[2]);
                let w = kv.shape()[0];
                let t_out = g.dims2().0;
                let mut gx = vec![0.0; xv.len()];
                let mut gk = vec![0.0; kv.len()];
                for o in 0..t_out {
                    let grow = g.row(o);
                    for k in 0..w {
                        let t = o * stride + k;
                        for ci in 0..cin {
                            let base = (k * cin + ci) * cout;
                            let xval = xv.data()[t * cin + ci];
                            let mut acc = 0.0;
                            for co in 0..cout {
                                acc += grow[co] * kv.data()[base + co];
                                gk[base + co] += xval * grow[co];
                            }
                            gx[t * cin + ci] += acc;
                        }
                    }
                }
                let xs = xv.shape().to_vec();
                let ks = kv.shape().to_vec();
                self.accumulate(*x, Tensor::from_parts(xs, gx));
                self.accumulate(*kernels, Tensor::from_parts(ks, gk));
            }
        }
        self.nodes[i].op = op;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 4, vec![0.3, -1.2, 2.0, 0.7]).unwrap());
        let s = g.softmax_rows(x);
        let y = g.sum(s);
        g.backward(y).unwrap();
        for v in g.grad(x).unwrap().data() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let x = g.leaf(Tensor::scalar(5.0));
        let y = g.mul(c, x).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn reused_node_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, -2.0]));
        let a = g.scale(x, 3.0);
        let b = g.add(a, x).unwrap();
        let y = g.sum(b);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 4.0]);
    }
}
