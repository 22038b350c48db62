//! Reverse-mode differentiation over a flat operation tape.
//!
//! Nodes are appended in evaluation order, so the tape order is already a
//! topological order and `backward` is a single reverse sweep. Every operator
//! stores whatever it needs for its reverse rule at forward time.

use super::array::{gemm, gemm_nt, gemm_tn, logsumexp, Array};
use super::LOG_FLOOR;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    LeakyRelu(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        cols: Vec<f64>,
        stride: usize,
        pad: usize,
        width: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    L2NormRows {
        x: Var,
        norms: Vec<f64>,
    },
    RowReplace {
        x: Var,
        fill: Var,
        mask: Vec<bool>,
    },
    Sum(Var),
    Mean(Var),
    External {
        x: Var,
        grad: Array,
    },
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch(format!("{op}: {a:?} vs {b:?}"))
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Outer/inner decomposition around `axis`: (outer, axis extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable input: gradients are tracked through it.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant input: never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Array::matrix(m, n, out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let out = gemm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Array::matrix(m, n, out)?, Op::MatMulNt(a, b), ng))
    }

    fn zip_same(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Array::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a row vector to every row (leading-batch broadcast only).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.ndim() != 1 || va.cols() != vr.len() {
            return Err(shape_err("add_row", va.shape(), vr.shape()));
        }
        let mut out = va.clone();
        let c = vr.len();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += vr.data()[i % c];
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    /// Adds a constant array (no gradient flows to the constant).
    pub fn add_const(&mut self, a: Var, c: &Array) -> Result<Var> {
        let va = self.value(a);
        if va.shape() != c.shape() {
            return Err(shape_err("add_const", va.shape(), c.shape()));
        }
        let mut out = va.clone();
        out.add_assign(c);
        let ng = self.ng(a);
        Ok(self.push(out, Op::AddConst(a), ng))
    }

    /// `k·x + b` with constant `k`, `b`.
    pub fn affine(&mut self, x: Var, k: f64, b: f64) -> Var {
        let out = self.value(x).map(|v| k * v + b);
        let ng = self.ng(x);
        self.push(out, Op::Affine(x, k), ng)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.affine(x, k, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let ng = self.ng(x);
        self.push(out, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v >= 0.0 { v } else { slope * v });
        let ng = self.ng(x);
        self.push(out, Op::LeakyRelu(x, slope), ng)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = super::array::log_softmax_rows(self.value(x));
        for v in out.data_mut() {
            *v = v.exp();
        }
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let out = super::array::log_softmax_rows(self.value(x));
        let ng = self.ng(x);
        self.push(out, Op::LogSoftmax(x), ng)
    }

    /// Row-wise log-sum-exp; drops the last axis.
    pub fn logsumexp(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data: Vec<f64> = (0..vx.rows()).map(|r| logsumexp(vx.row(r))).collect();
        let shape = vx.shape()[..vx.ndim().saturating_sub(1)].to_vec();
        let out = Array::new(shape, data).expect("row count matches");
        let ng = self.ng(x);
        self.push(out, Op::LogSumExp(x), ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.cols();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("layer_norm", vx.shape(), self.shape(gamma)));
        }
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (j, v) in row.iter().enumerate() {
                xhat[r * c + j] = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, xh)| xh * g[i % c] + b[i % c])
            .collect();
        let out = Array::new(vx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Temporal convolution of `x: [T, C_in]` with `w: [C_out, width·C_in]`
    /// (tap-major), zero padding `pad` on both ends.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || stride == 0 || sw[1] % sx[1] != 0 {
            return Err(shape_err("conv1d", &sx, &sw));
        }
        let (t_in, c_in, c_out) = (sx[0], sx[1], sw[0]);
        let width = sw[1] / c_in;
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(shape_err("conv1d bias", self.shape(b), &[c_out]));
            }
        }
        let padded = t_in + 2 * pad;
        if padded < width {
            return Err(Error::InputTooShort {
                len: t_in,
                field: width,
            });
        }
        let t_out = (padded - width) / stride + 1;
        let k = width * c_in;
        let xv = self.value(x).data();
        let mut cols = vec![0.0; t_out * k];
        for t in 0..t_out {
            for tap in 0..width {
                let src = (t * stride + tap) as isize - pad as isize;
                if src < 0 || src as usize >= t_in {
                    continue;
                }
                let src = src as usize;
                cols[t * k + tap * c_in..t * k + (tap + 1) * c_in].copy_from_slice(&xv[src * c_in..(src + 1) * c_in]);
            }
        }
        let mut out = gemm_nt(&cols, self.value(w).data(), t_out, k, c_out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (i, o) in out.iter_mut().enumerate() {
                *o += bv[i % c_out];
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(
            Array::matrix(t_out, c_out, out)?,
            Op::Conv1d {
                x,
                w,
                b,
                cols,
                stride,
                pad,
                width,
            },
            ng,
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.ndim() != 2 {
            return Err(shape_err("embedding", vt.shape(), &[]));
        }
        let e = vt.cols();
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= vt.rows() {
                return Err(Error::InvalidId(id));
            }
            data.extend_from_slice(vt.row(id));
        }
        let out = Array::matrix(ids.len(), e, data)?;
        let ng = self.ng(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat axis", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(shape_err("concat", s, &first));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let block = ext * inner;
                data.extend_from_slice(&self.value(p).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Array::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start + len > sx[axis] {
            return Err(shape_err("slice", &sx, &[axis, start, len]));
        }
        let (outer, ext, inner) = split_axis(&sx, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(Array::new(shape, data)?, Op::Slice { x, axis, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.value(x).ndim() != 2 {
            return Err(shape_err("transpose", self.shape(x), &[]));
        }
        let out = self.value(x).transpose();
        let ng = self.ng(x);
        Ok(self.push(out, Op::Transpose(x), ng))
    }

    /// Flat-index gather into a rank-1 result.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= vx.len() {
                return Err(Error::ShapeMismatch(format!(
                    "gather index {i} out of range for {:?}",
                    vx.shape()
                )));
            }
            data.push(vx.data()[i]);
        }
        let ng = self.ng(x);
        Ok(self.push(Array::vector(data), Op::Gather { x, idx: idx.to_vec() }, ng))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let mut out = vx.clone();
        let mut norms = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let n = vx.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::ZeroNormVector("l2_normalize_rows"));
            }
            norms.push(n);
            for v in out.row_mut(r) {
                *v /= n;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::L2NormRows { x, norms }, ng))
    }

    /// Replaces the rows of `x` flagged in `mask` with the vector `fill`.
    pub fn row_replace(&mut self, x: Var, fill: Var, mask: &[bool]) -> Result<Var> {
        let (vx, vf) = (self.value(x), self.value(fill));
        if vx.ndim() != 2 || vf.ndim() != 1 || vx.cols() != vf.len() {
            return Err(shape_err("row_replace", vx.shape(), vf.shape()));
        }
        if mask.len() != vx.rows() {
            return Err(Error::LengthMismatch {
                expected: vx.rows(),
                got: mask.len(),
            });
        }
        let mut out = vx.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(r).copy_from_slice(vf.data());
            }
        }
        let ng = self.ng(x) || self.ng(fill);
        Ok(self.push(
            out,
            Op::RowReplace {
                x,
                fill,
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Array::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Array::scalar(vx.sum() / vx.len().max(1) as f64);
        let ng = self.ng(x);
        self.push(out, Op::Mean(x), ng)
    }

    /// Scalar node whose value and gradient with respect to `x` were computed
    /// outside the tape (e.g. by a dynamic-programming loss).
    pub fn external_scalar(&mut self, x: Var, value: f64, grad: Array) -> Result<Var> {
        if grad.shape() != self.shape(x) {
            return Err(shape_err("external_scalar", grad.shape(), self.shape(x)));
        }
        let ng = self.ng(x);
        Ok(self.push(Array::scalar(value), Op::External { x, grad }, ng))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Array::full(rv.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) {
        let mut acc = |v: Var, d: Array| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot => *slot = Some(d),
            }
        };
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.ng(*a) {
                    let da = gemm_nt(gd, vb.data(), m, n, k);
                    acc(*a, Array::matrix(m, k, da).unwrap());
                }
                if self.ng(*b) {
                    let db = gemm_tn(va.data(), gd, m, k, n);
                    acc(*b, Array::matrix(k, n, db).unwrap());
                }
            }
            Op::MatMulNt(a, b) => {
                // y = a·bᵀ: da = g·b, db = gᵀ·a
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[0]);
                if self.ng(*a) {
                    let da = gemm(gd, vb.data(), m, n, k);
                    acc(*a, Array::matrix(m, k, da).unwrap());
                }
                if self.ng(*b) {
                    let db = gemm_tn(gd, va.data(), m, n, k);
                    acc(*b, Array::matrix(n, k, db).unwrap());
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                let c = self.value(*r).len();
                let mut dr = vec![0.0; c];
                for (i, v) in gd.iter().enumerate() {
                    dr[i % c] += v;
                }
                acc(*r, Array::vector(dr));
            }
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da: Vec<f64> = gd.iter().zip(vb.data()).map(|(g, b)| g * b).collect();
                let db: Vec<f64> = gd.iter().zip(va.data()).map(|(g, a)| g * a).collect();
                acc(*a, Array::new(va.shape().to_vec(), da).unwrap());
                acc(*b, Array::new(vb.shape().to_vec(), db).unwrap());
            }
            Op::Affine(x, k) => acc(*x, g.map(|v| v * k)),
            Op::Tanh(x) => {
                let d = gd.iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                acc(*x, Array::new(y.shape().to_vec(), d).unwrap());
            }
            Op::Sigmoid(x) => {
                let d = gd.iter().zip(y.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                acc(*x, Array::new(y.shape().to_vec(), d).unwrap());
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let d = gd.iter().zip(vx.data()).map(|(g, &x)| g * gelu_grad(x)).collect();
                acc(*x, Array::new(y.shape().to_vec(), d).unwrap());
            }
            Op::LeakyRelu(x, s) => {
                let vx = self.value(*x);
                let d = gd
                    .iter()
                    .zip(vx.data())
                    .map(|(g, &x)| if x >= 0.0 { *g } else { g * s })
                    .collect();
                acc(*x, Array::new(y.shape().to_vec(), d).unwrap());
            }
            Op::Softmax(x) => {
                let mut d = g.clone();
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, v) in d.row_mut(r).iter_mut().enumerate() {
                        *v = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, d);
            }
            Op::LogSoftmax(x) => {
                let mut d = g.clone();
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s: f64 = gr.iter().sum();
                    for (j, v) in d.row_mut(r).iter_mut().enumerate() {
                        *v = gr[j] - yr[j].exp() * s;
                    }
                }
                acc(*x, d);
            }
            Op::LogSumExp(x) => {
                let vx = self.value(*x);
                let mut d = vx.clone();
                for r in 0..vx.rows() {
                    let l = y.data()[r];
                    let gr = gd[r];
                    for v in d.row_mut(r).iter_mut() {
                        *v = if l <= LOG_FLOOR { 0.0 } else { gr * (*v - l).exp() };
                    }
                }
                acc(*x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = y.cols();
                let gam = self.value(*gamma).data();
                let mut dgam = vec![0.0; c];
                let mut dbet = vec![0.0; c];
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let gr = &gd[r * c..(r + 1) * c];
                    let xr = &xhat[r * c..(r + 1) * c];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..c {
                        dgam[j] += gr[j] * xr[j];
                        dbet[j] += gr[j];
                        let dxh = gr[j] * gam[j];
                        m1 += dxh;
                        m2 += dxh * xr[j];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for j in 0..c {
                        let dxh = gr[j] * gam[j];
                        dx[r * c + j] = inv_std[r] * (dxh - m1 - xr[j] * m2);
                    }
                }
                acc(*x, Array::new(y.shape().to_vec(), dx).unwrap());
                acc(*gamma, Array::vector(dgam));
                acc(*beta, Array::vector(dbet));
            }
            Op::Conv1d {
                x,
                w,
                b,
                cols,
                stride,
                pad,
                width,
            } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (t_in, c_in) = (vx.shape()[0], vx.shape()[1]);
                let (t_out, c_out) = (y.shape()[0], y.shape()[1]);
                let k = width * c_in;
                if self.ng(*w) {
                    let dw = gemm_tn(gd, cols, t_out, c_out, k);
                    acc(*w, Array::matrix(c_out, k, dw).unwrap());
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; c_out];
                    for (i, v) in gd.iter().enumerate() {
                        db[i % c_out] += v;
                    }
                    acc(*b, Array::vector(db));
                }
                if self.ng(*x) {
                    let dcols = gemm(gd, vw.data(), t_out, c_out, k);
                    let mut dx = vec![0.0; t_in * c_in];
                    for t in 0..t_out {
                        for tap in 0..*width {
                            let src = (t * stride + tap) as isize - *pad as isize;
                            if src < 0 || src as usize >= t_in {
                                continue;
                            }
                            let src = src as usize;
                            for c in 0..c_in {
                                dx[src * c_in + c] += dcols[t * k + tap * c_in + c];
                            }
                        }
                    }
                    acc(*x, Array::matrix(t_in, c_in, dx).unwrap());
                }
            }
            Op::Embedding { table, ids } => {
                let vt = self.value(*table);
                let e = vt.cols();
                let mut d = Array::zeros(vt.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = d.row_mut(id);
                    for (j, v) in dst.iter_mut().enumerate() {
                        *v += gd[r * e + j];
                    }
                }
                acc(*table, d);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let sp = self.shape(p).to_vec();
                    let ext = sp[*axis];
                    let mut d = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        d.extend_from_slice(&gd[base..base + ext * inner]);
                    }
                    offset += ext;
                    acc(p, Array::new(sp, d).unwrap());
                }
            }
            Op::Slice { x, axis, start } => {
                let sx = self.shape(*x).to_vec();
                let (outer, ext, inner) = split_axis(&sx, *axis);
                let len = y.shape()[*axis];
                let mut d = vec![0.0; outer * ext * inner];
                for o in 0..outer {
                    let base = o * ext * inner + start * inner;
                    d[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, Array::new(sx, d).unwrap());
            }
            Op::Reshape(x) => {
                let sx = self.shape(*x).to_vec();
                acc(*x, g.clone().reshape(&sx).unwrap());
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::Gather { x, idx } => {
                let mut d = Array::zeros(self.shape(*x));
                for (k, &i) in idx.iter().enumerate() {
                    d.data_mut()[i] += gd[k];
                }
                acc(*x, d);
            }
            Op::L2NormRows { x, norms } => {
                let mut d = g.clone();
                for (r, n) in norms.iter().enumerate() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, v) in d.row_mut(r).iter_mut().enumerate() {
                        *v = (gr[j] - yr[j] * dot) / n;
                    }
                }
                acc(*x, d);
            }
            Op::RowReplace { x, fill, mask } => {
                let c = y.cols();
                let mut dx = g.clone();
                let mut df = vec![0.0; c];
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        for (j, v) in dx.row_mut(r).iter_mut().enumerate() {
                            df[j] += *v;
                            *v = 0.0;
                        }
                    }
                }
                acc(*x, dx);
                acc(*fill, Array::vector(df));
            }
            Op::Sum(x) => acc(*x, Array::full(self.shape(*x), gd[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                acc(*x, Array::full(self.shape(*x), gd[0] / n));
            }
            Op::External { x, grad } => {
                let mut d = grad.clone();
                d.scale_assign(gd[0]);
                acc(*x, d);
            }
        }
    }
}
