//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every forward pass builds a fresh [`Tape`]: leaves are registered first,
//! each operation appends a node holding its output value and the recipe
//! that produced it. Nodes are created in forward order, so the record list
//! is already topologically sorted and [`Tape::backward`] is a single
//! reverse sweep. A [`Var`] is a handle into one tape and must not be mixed
//! across tapes.
//!
//! All tensors on a tape are 2-d. Row vectors are `[1, q]`, per-row scales
//! `[p, 1]`, scalars `[1, 1]`. Reductions run in a fixed serial order so a
//! fixed seed gives bit-identical results across runs.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on one tape (the spec's `grad_id`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    /// Tensor scaled by a 1x1 variable (differentiable in both).
    ScaleVar(Var, Var),
    Recip(Var),
    /// Broadcast-add a `[1, q]` row vector to every row.
    AddRow(Var, Var),
    /// Broadcast-multiply a `[1, q]` row vector into every row.
    MulRow(Var, Var),
    /// Multiply row i by scale `[p, 1]` entry i.
    ScaleRows(Var, Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: S,
    },
    Gelu(Var),
    Tanh(Var),
    /// Pairwise rotation with fixed per-row angle tables `[p, q/2]`.
    Rope {
        x: Var,
        cos: Tensor<S>,
        sin: Tensor<S>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    SumAll(Var),
    /// Repeat a `[1, q]` row `rows` times.
    BroadcastRow {
        x: Var,
        rows: usize,
    },
    /// out.data[k] = in.data[idx[k]]; backward scatter-adds.
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. `v`. Leaves off every path to the loss
    /// hold exact zeros.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf (parameter, input, or constant).
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, value: S) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let s = self.nodes[v.0].value.shape();
        debug_assert_eq!(s.len(), 2);
        (s[0], s[1])
    }

    // ---- forward ops -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, qa) = self.dims2(a);
        let (qb, r) = self.dims2(b);
        if qa != qb {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let out = matmul_raw(self.value(a), self.value(b), p, qa, r);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (p, q) = self.dims2(a);
        let x = self.value(a).data();
        let mut out = vec![S::zero(); p * q];
        for i in 0..p {
            for j in 0..q {
                out[j * p + i] = x[i * q + j];
            }
        }
        let t = Tensor::new(vec![q, p], out)?;
        Ok(self.push(t, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn zip_same_shape(
        &mut self,
        opname: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension {
                op: opname,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, op))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    /// `a * s` where `s` is a 1x1 variable; gradient flows into both.
    pub fn scale_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::Contract(format!(
                "scale_var needs a 1x1 scale, got {:?}",
                self.value(s).shape()
            )));
        }
        let c = self.value(s).item();
        let t = self.value(a).map(|x| x * c);
        Ok(self.push(t, Op::ScaleVar(a, s)))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| S::one() / x);
        self.push(t, Op::Recip(a))
    }

    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        self.rowwise("add_row", a, v, |x, y| x + y, Op::AddRow(a, v))
    }

    pub fn mul_row(&mut self, a: Var, v: Var) -> Result<Var> {
        self.rowwise("mul_row", a, v, |x, y| x * y, Op::MulRow(a, v))
    }

    fn rowwise(
        &mut self,
        opname: &'static str,
        a: Var,
        v: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        let (p, q) = self.dims2(a);
        let (vr, vq) = self.dims2(v);
        if vr != 1 || vq != q {
            return Err(Error::Dimension {
                op: opname,
                lhs: vec![p, q],
                rhs: vec![vr, vq],
            });
        }
        let x = self.value(a).data();
        let w = self.value(v).data();
        let mut out = Vec::with_capacity(p * q);
        for i in 0..p {
            for j in 0..q {
                out.push(f(x[i * q + j], w[j]));
            }
        }
        let t = Tensor::new(vec![p, q], out)?;
        Ok(self.push(t, op))
    }

    /// Multiply row i of `a` by entry i of the `[p, 1]` column `s`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (p, q) = self.dims2(a);
        let (sp, sq) = self.dims2(s);
        if sp != p || sq != 1 {
            return Err(Error::Dimension {
                op: "scale_rows",
                lhs: vec![p, q],
                rhs: vec![sp, sq],
            });
        }
        let x = self.value(a).data();
        let w = self.value(s).data();
        let mut out = Vec::with_capacity(p * q);
        for i in 0..p {
            for j in 0..q {
                out.push(x[i * q + j] * w[i]);
            }
        }
        let t = Tensor::new(vec![p, q], out)?;
        Ok(self.push(t, Op::ScaleRows(a, s)))
    }

    /// Row-wise softmax, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric {
                op: "softmax_rows",
                detail: "NaN input".into(),
            });
        }
        let (p, q) = self.dims2(a);
        let x = self.value(a).data();
        let mut out = vec![S::zero(); p * q];
        for i in 0..p {
            let row = &x[i * q..(i + 1) * q];
            let mut mx = row[0];
            for &v in row.iter() {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = S::zero();
            for j in 0..q {
                let e = (row[j] - mx).exp();
                out[i * q + j] = e;
                sum = sum + e;
            }
            for j in 0..q {
                out[i * q + j] = out[i * q + j] / sum;
            }
        }
        let t = Tensor::new(vec![p, q], out)?;
        Ok(self.push(t, Op::SoftmaxRows(a)))
    }

    /// Per-row layer normalization with 1/q variance divisor:
    /// `(x - mean) / sqrt(var + eps) * gamma + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let (p, q) = self.dims2(x);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let (vr, vq) = self.dims2(v);
            if vr != 1 || vq != q {
                return Err(Error::Dimension {
                    op: if name == "gamma" {
                        "layer_norm gamma"
                    } else {
                        "layer_norm beta"
                    },
                    lhs: vec![p, q],
                    rhs: vec![vr, vq],
                });
            }
        }
        if eps <= S::zero() {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![S::zero(); p * q];
        let qs = S::of_f64(q as f64);
        for i in 0..p {
            let row = &xd[i * q..(i + 1) * q];
            let mut mean = S::zero();
            for &v in row.iter() {
                mean = mean + v;
            }
            mean = mean / qs;
            let mut var = S::zero();
            for &v in row.iter() {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / qs;
            let inv = S::one() / (var + eps).sqrt();
            for j in 0..q {
                out[i * q + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let t = Tensor::new(vec![p, q], out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Exact Gaussian-CDF GELU: `x * 0.5 * (1 + erf(x / sqrt(2)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu_scalar);
        self.push(t, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.tanh());
        self.push(t, Op::Tanh(a))
    }

    /// Rotate adjacent column pairs `(2j, 2j+1)` of each row by the angles
    /// in `cos`/`sin` (shape `[p, q/2]`). Used for rotary position encoding;
    /// the tables are constants, not differentiated.
    pub fn rope(&mut self, x: Var, cos: Tensor<S>, sin: Tensor<S>) -> Result<Var> {
        let (p, q) = self.dims2(x);
        if q % 2 != 0 || cos.shape() != [p, q / 2] || sin.shape() != [p, q / 2] {
            return Err(Error::Dimension {
                op: "rope",
                lhs: vec![p, q],
                rhs: cos.shape().to_vec(),
            });
        }
        let xd = self.value(x).data();
        let half = q / 2;
        let mut out = vec![S::zero(); p * q];
        for i in 0..p {
            for j in 0..half {
                let c = cos.data()[i * half + j];
                let s = sin.data()[i * half + j];
                let x0 = xd[i * q + 2 * j];
                let x1 = xd[i * q + 2 * j + 1];
                out[i * q + 2 * j] = x0 * c - x1 * s;
                out[i * q + 2 * j + 1] = x0 * s + x1 * c;
            }
        }
        let t = Tensor::new(vec![p, q], out)?;
        Ok(self.push(t, Op::Rope { x, cos, sin }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let (_, q) = self.dims2(parts[0]);
        let mut rows = 0;
        for &v in parts {
            let (vp, vq) = self.dims2(v);
            if vq != q {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(v).shape().to_vec(),
                });
            }
            rows += vp;
        }
        let mut data = Vec::with_capacity(rows * q);
        for &v in parts {
            data.extend_from_slice(self.value(v).data());
        }
        let t = Tensor::new(vec![rows, q], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (p, q) = self.dims2(x);
        if start + len > p || len == 0 {
            return Err(Error::Contract(format!(
                "slice_rows [{start}, {}) out of {p} rows",
                start + len
            )));
        }
        let data = self.value(x).data()[start * q..(start + len) * q].to_vec();
        let t = Tensor::new(vec![len, q], data)?;
        Ok(self.push(t, Op::SliceRows { x, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let (p, _) = self.dims2(parts[0]);
        let mut cols = 0;
        for &v in parts {
            let (vp, vq) = self.dims2(v);
            if vp != p {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(v).shape().to_vec(),
                });
            }
            cols += vq;
        }
        let mut data = Vec::with_capacity(p * cols);
        for i in 0..p {
            for &v in parts {
                let (_, vq) = self.dims2(v);
                data.extend_from_slice(&self.value(v).data()[i * vq..(i + 1) * vq]);
            }
        }
        let t = Tensor::new(vec![p, cols], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (p, q) = self.dims2(x);
        if start + len > q || len == 0 {
            return Err(Error::Contract(format!(
                "slice_cols [{start}, {}) out of {q} cols",
                start + len
            )));
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(p * len);
        for i in 0..p {
            data.extend_from_slice(&xd[i * q + start..i * q + start + len]);
        }
        let t = Tensor::new(vec![p, len], data)?;
        Ok(self.push(t, Op::SliceCols { x, start, len }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut sum = S::zero();
        for &v in self.value(a).data() {
            sum = sum + v;
        }
        self.push(Tensor::scalar(sum), Op::SumAll(a))
    }

    /// Repeat a `[1, q]` row vector into `[rows, q]`.
    pub fn broadcast_row(&mut self, x: Var, rows: usize) -> Result<Var> {
        let (p, q) = self.dims2(x);
        if p != 1 || rows == 0 {
            return Err(Error::Contract(format!(
                "broadcast_row needs [1, q] input and rows > 0, got {:?} x{rows}",
                self.value(x).shape()
            )));
        }
        let row = self.value(x).data().to_vec();
        let mut data = Vec::with_capacity(rows * q);
        for _ in 0..rows {
            data.extend_from_slice(&row);
        }
        let t = Tensor::new(vec![rows, q], data)?;
        Ok(self.push(t, Op::BroadcastRow { x, rows }))
    }

    /// Element gather: `out.data[k] = x.data[idx[k]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).numel();
        if idx.iter().any(|&i| i >= n) {
            return Err(Error::Contract("gather index out of bounds".into()));
        }
        if shape.iter().product::<usize>() != idx.len() {
            return Err(Error::Contract("gather shape/index length mismatch".into()));
        }
        let xd = self.value(x).data();
        let data: Vec<S> = idx.iter().map(|&i| xd[i]).collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Gather { x, idx }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    // ---- composites --------------------------------------------------------

    /// `x @ w (+ bias)`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Mean squared error over all elements, as a 1x1 var.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        let s = self.sum_all(sq);
        let n = self.value(a).numel();
        Ok(self.scale(s, S::of_f64(1.0 / n as f64)))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Every leaf receives a gradient
    /// tensor; leaves with no path to the loss hold exact zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(S::one()));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        // Exact zeros for untouched leaves.
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (p, q) = self.dims2(*a);
                let (_, r) = self.dims2(*b);
                // dA = g . B^T
                let bd = self.value(*b).data();
                let mut da = vec![S::zero(); p * q];
                for ii in 0..p {
                    for k in 0..q {
                        let mut acc = S::zero();
                        for j in 0..r {
                            acc = acc + gd[ii * r + j] * bd[k * r + j];
                        }
                        da[ii * q + k] = acc;
                    }
                }
                self.accum(grads, *a, da);
                // dB = A^T . g
                let ad = self.value(*a).data();
                let mut db = vec![S::zero(); q * r];
                for k in 0..q {
                    for j in 0..r {
                        let mut acc = S::zero();
                        for ii in 0..p {
                            acc = acc + ad[ii * q + k] * gd[ii * r + j];
                        }
                        db[k * r + j] = acc;
                    }
                }
                self.accum(grads, *b, db);
            }
            Op::Transpose(a) => {
                let (p, q) = self.dims2(*a);
                let mut da = vec![S::zero(); p * q];
                for ii in 0..p {
                    for j in 0..q {
                        da[ii * q + j] = gd[j * p + ii];
                    }
                }
                self.accum(grads, *a, da);
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, gd.to_vec());
                self.accum(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, gd.to_vec());
                self.accum(grads, *b, gd.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                self.accum(
                    grads,
                    *a,
                    gd.iter().zip(bd.iter()).map(|(&g, &b)| g * b).collect(),
                );
                self.accum(
                    grads,
                    *b,
                    gd.iter().zip(ad.iter()).map(|(&g, &a)| g * a).collect(),
                );
            }
            Op::Scale(a, c) => {
                self.accum(grads, *a, gd.iter().map(|&x| x * *c).collect());
            }
            Op::ScaleVar(a, s) => {
                let c = self.value(*s).item();
                self.accum(grads, *a, gd.iter().map(|&x| x * c).collect());
                let ad = self.value(*a).data();
                let mut acc = S::zero();
                for (gk, ak) in gd.iter().zip(ad.iter()) {
                    acc = acc + *gk * *ak;
                }
                self.accum(grads, *s, vec![acc]);
            }
            Op::Recip(a) => {
                let yd = node.value.data();
                self.accum(
                    grads,
                    *a,
                    gd.iter().zip(yd.iter()).map(|(&g, &y)| -g * y * y).collect(),
                );
            }
            Op::AddRow(a, v) => {
                let (p, q) = self.dims2(*a);
                self.accum(grads, *a, gd.to_vec());
                let mut dv = vec![S::zero(); q];
                for ii in 0..p {
                    for j in 0..q {
                        dv[j] = dv[j] + gd[ii * q + j];
                    }
                }
                self.accum(grads, *v, dv);
            }
            Op::MulRow(a, v) => {
                let (p, q) = self.dims2(*a);
                let ad = self.value(*a).data();
                let vd = self.value(*v).data();
                let mut da = vec![S::zero(); p * q];
                let mut dv = vec![S::zero(); q];
                for ii in 0..p {
                    for j in 0..q {
                        da[ii * q + j] = gd[ii * q + j] * vd[j];
                        dv[j] = dv[j] + gd[ii * q + j] * ad[ii * q + j];
                    }
                }
                self.accum(grads, *a, da);
                self.accum(grads, *v, dv);
            }
            Op::ScaleRows(a, s) => {
                let (p, q) = self.dims2(*a);
                let ad = self.value(*a).data();
                let sd = self.value(*s).data();
                let mut da = vec![S::zero(); p * q];
                let mut ds = vec![S::zero(); p];
                for ii in 0..p {
                    for j in 0..q {
                        da[ii * q + j] = gd[ii * q + j] * sd[ii];
                        ds[ii] = ds[ii] + gd[ii * q + j] * ad[ii * q + j];
                    }
                }
                self.accum(grads, *a, da);
                self.accum(grads, *s, ds);
            }
            Op::SoftmaxRows(a) => {
                let (p, q) = self.dims2(*a);
                let yd = node.value.data();
                let mut da = vec![S::zero(); p * q];
                for ii in 0..p {
                    let mut dot = S::zero();
                    for j in 0..q {
                        dot = dot + yd[ii * q + j] * gd[ii * q + j];
                    }
                    for j in 0..q {
                        da[ii * q + j] = yd[ii * q + j] * (gd[ii * q + j] - dot);
                    }
                }
                self.accum(grads, *a, da);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (p, q) = self.dims2(*x);
                let xd = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let qs = S::of_f64(q as f64);
                let mut dx = vec![S::zero(); p * q];
                let mut dgamma = vec![S::zero(); q];
                let mut dbeta = vec![S::zero(); q];
                for ii in 0..p {
                    let row = &xd[ii * q..(ii + 1) * q];
                    let mut mean = S::zero();
                    for &v in row.iter() {
                        mean = mean + v;
                    }
                    mean = mean / qs;
                    let mut var = S::zero();
                    for &v in row.iter() {
                        let d = v - mean;
                        var = var + d * d;
                    }
                    var = var / qs;
                    let inv = S::one() / (var + *eps).sqrt();
                    // xhat, then the standard three-term layer-norm backward
                    let mut m1 = S::zero(); // mean of dxhat
                    let mut m2 = S::zero(); // mean of dxhat * xhat
                    for j in 0..q {
                        let xhat = (row[j] - mean) * inv;
                        let go = gd[ii * q + j];
                        dgamma[j] = dgamma[j] + go * xhat;
                        dbeta[j] = dbeta[j] + go;
                        let dxhat = go * gam[j];
                        m1 = m1 + dxhat;
                        m2 = m2 + dxhat * xhat;
                    }
                    m1 = m1 / qs;
                    m2 = m2 / qs;
                    for j in 0..q {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = gd[ii * q + j] * gam[j];
                        dx[ii * q + j] = inv * (dxhat - m1 - xhat * m2);
                    }
                }
                self.accum(grads, *x, dx);
                self.accum(grads, *gamma, dgamma);
                self.accum(grads, *beta, dbeta);
            }
            Op::Gelu(a) => {
                let ad = self.value(*a).data();
                self.accum(
                    grads,
                    *a,
                    gd.iter()
                        .zip(ad.iter())
                        .map(|(&g, &x)| g * gelu_grad_scalar(x))
                        .collect(),
                );
            }
            Op::Tanh(a) => {
                let yd = node.value.data();
                self.accum(
                    grads,
                    *a,
                    gd.iter()
                        .zip(yd.iter())
                        .map(|(&g, &y)| g * (S::one() - y * y))
                        .collect(),
                );
            }
            Op::Rope { x, cos, sin } => {
                let (p, q) = self.dims2(*x);
                let half = q / 2;
                let mut dx = vec![S::zero(); p * q];
                for ii in 0..p {
                    for j in 0..half {
                        let c = cos.data()[ii * half + j];
                        let s = sin.data()[ii * half + j];
                        let g0 = gd[ii * q + 2 * j];
                        let g1 = gd[ii * q + 2 * j + 1];
                        // inverse rotation
                        dx[ii * q + 2 * j] = g0 * c + g1 * s;
                        dx[ii * q + 2 * j + 1] = -g0 * s + g1 * c;
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let (_, q) = (node.value.rows(), node.value.cols());
                let mut start = 0;
                for &v in parts {
                    let (vp, _) = self.dims2(v);
                    let dv = gd[start * q..(start + vp) * q].to_vec();
                    self.accum(grads, v, dv);
                    start += vp;
                }
            }
            Op::SliceRows { x, start, len } => {
                let (p, q) = self.dims2(*x);
                let mut dx = vec![S::zero(); p * q];
                dx[start * q..(start + len) * q].copy_from_slice(gd);
                self.accum(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let p = node.value.rows();
                let total = node.value.cols();
                let mut start = 0;
                for &v in parts {
                    let (_, vq) = self.dims2(v);
                    let mut dv = vec![S::zero(); p * vq];
                    for ii in 0..p {
                        dv[ii * vq..(ii + 1) * vq]
                            .copy_from_slice(&gd[ii * total + start..ii * total + start + vq]);
                    }
                    self.accum(grads, v, dv);
                    start += vq;
                }
            }
            Op::SliceCols { x, start, len } => {
                let (p, q) = self.dims2(*x);
                let mut dx = vec![S::zero(); p * q];
                for ii in 0..p {
                    dx[ii * q + start..ii * q + start + len]
                        .copy_from_slice(&gd[ii * len..(ii + 1) * len]);
                }
                self.accum(grads, *x, dx);
            }
            Op::SumAll(a) => {
                let n = self.value(*a).numel();
                let gv = gd[0];
                self.accum(grads, *a, vec![gv; n]);
            }
            Op::BroadcastRow { x, rows } => {
                let (_, q) = self.dims2(*x);
                let mut dv = vec![S::zero(); q];
                for ii in 0..*rows {
                    for j in 0..q {
                        dv[j] = dv[j] + gd[ii * q + j];
                    }
                }
                self.accum(grads, *x, dv);
            }
            Op::Gather { x, idx } => {
                let n = self.value(*x).numel();
                let mut dx = vec![S::zero(); n];
                for (k, &src) in idx.iter().enumerate() {
                    dx[src] = dx[src] + gd[k];
                }
                self.accum(grads, *x, dx);
            }
            Op::Reshape(x) => {
                self.accum(grads, *x, gd.to_vec());
            }
        }
    }

    fn accum(&self, grads: &mut [Option<Tensor<S>>], v: Var, delta: Vec<S>) {
        match &mut grads[v.0] {
            Some(t) => {
                debug_assert_eq!(t.numel(), delta.len());
                for (dst, src) in t.data_mut().iter_mut().zip(delta.into_iter()) {
                    *dst = *dst + src;
                }
            }
            None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                grads[v.0] = Some(Tensor::new(shape, delta).expect("gradient shape"));
            }
        }
    }
}

fn matmul_raw<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, p: usize, q: usize, r: usize) -> Tensor<S> {
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![S::zero(); p * r];
    // ikj loop order: per-element accumulation still walks k in increasing
    // order, keeping the reduction order fixed.
    for i in 0..p {
        for k in 0..q {
            let aik = ad[i * q + k];
            let brow = &bd[k * r..(k + 1) * r];
            let orow = &mut out[i * r..(i + 1) * r];
            for j in 0..r {
                orow[j] = orow[j] + aik * brow[j];
            }
        }
    }
    Tensor::new(vec![p, r], out).expect("matmul shape")
}

fn gelu_scalar<S: Scalar>(x: S) -> S {
    let half = S::of_f64(0.5);
    let inv_sqrt2 = S::of_f64(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (S::one() + (x * inv_sqrt2).erf())
}

fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let half = S::of_f64(0.5);
    let inv_sqrt2 = S::of_f64(std::f64::consts::FRAC_1_SQRT_2);
    let cdf = half * (S::one() + (x * inv_sqrt2).erf());
    let pdf = S::of_f64((-(x.as_f64() * x.as_f64()) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randt(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    // Independent erf for the GELU oracle: Abramowitz-Stegun style series,
    // accurate to ~1e-12 for |x| <= 2.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        for n in 1..60 {
            term *= -x * x / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn matmul_identity_and_closed_form() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(randt(vec![3, 3], 1));
        let id = tape.leaf(Tensor::identity(3));
        let out = tape.matmul(id, a).unwrap();
        assert!(tape.value(out).bit_eq(tape.value(a)));

        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.leaf(Tensor::scalar(3.0));
        let z = tape.matmul(x, y).unwrap();
        assert_eq!(tape.value(z).item(), 6.0);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let a = randt(vec![5, 4], 2);
        let b = randt(vec![4, 6], 3);
        let mut tape: Tape<f64> = Tape::new();
        let va = tape.leaf(a.clone());
        let vb = tape.leaf(b.clone());
        let vc = tape.matmul(va, vb).unwrap();
        // naive ijk oracle
        let mut expect = vec![0.0; 5 * 6];
        for i in 0..5 {
            for j in 0..6 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.get(&[i, k]) * b.get(&[k, j]);
                }
                expect[i * 6 + j] = s;
            }
        }
        let expect = Tensor::new(vec![5, 6], expect).unwrap();
        let rel = tape.value(vc).max_abs_diff(&expect) / expect.frobenius_norm().max(1e-12);
        assert!(rel < 1e-6, "rel err {rel}");
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap());
        let s = tape.softmax_rows(a).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let b = tape.leaf(Tensor::from_rows(&[vec![0.0, 2.0_f64.ln()]]).unwrap());
        let s = tape.softmax_rows(b).unwrap();
        assert!((tape.value(s).data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((tape.value(s).data()[1] - 2.0 / 3.0).abs() < 1e-12);

        // stability at magnitude 1e3
        let c = tape.leaf(Tensor::from_rows(&[vec![1000.0, 1000.0]]).unwrap());
        let s = tape.softmax_rows(c).unwrap();
        assert!((tape.value(s).data()[0] - 0.5).abs() < 1e-12);

        let n = tape.leaf(Tensor::from_rows(&[vec![f64::NAN, 0.0]]).unwrap());
        assert!(matches!(
            tape.softmax_rows(n),
            Err(crate::error::Error::Numeric { .. })
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape: Tape<f64> = Tape::new();
        let gamma = tape.leaf(Tensor::full(vec![1, 4], 1.0));
        let beta = tape.leaf(Tensor::zeros(vec![1, 4]));

        // constant row -> zeros
        let a = tape.leaf(Tensor::full(vec![2, 4], 3.5));
        let y = tape.layer_norm(a, gamma, beta, 1e-5).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.0);
        }

        // already-normalized row stays put within eps effect
        let row = vec![1.0, -1.0, 1.0, -1.0]; // mean 0, var 1
        let b = tape.leaf(Tensor::from_rows(&[row.clone()]).unwrap());
        let y = tape.layer_norm(b, gamma, beta, 1e-5).unwrap();
        for (o, i) in tape.value(y).data().iter().zip(row.iter()) {
            assert!((o - i).abs() < 1e-3);
        }

        // random row vs direct scalar-loop oracle
        let x = randt(vec![3, 5], 7);
        let g5 = tape.leaf(randt(vec![1, 5], 8));
        let b5 = tape.leaf(randt(vec![1, 5], 9));
        let vx = tape.leaf(x.clone());
        let y = tape.layer_norm(vx, g5, b5, 1e-5).unwrap();
        for i in 0..3 {
            let mean: f64 = (0..5).map(|j| x.get(&[i, j])).sum::<f64>() / 5.0;
            let var: f64 = (0..5).map(|j| (x.get(&[i, j]) - mean).powi(2)).sum::<f64>() / 5.0;
            for j in 0..5 {
                let expect = (x.get(&[i, j]) - mean) / (var + 1e-5).sqrt()
                    * tape.value(g5).data()[j]
                    + tape.value(b5).data()[j];
                assert!((tape.value(y).get(&[i, j]) - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gelu_examples_against_series_erf() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![0.0, 10.0, 1.0]]).unwrap());
        let y = tape.gelu(a);
        let out = tape.value(y).data();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 10.0).abs() < 1e-6);
        let expect = 0.5 * (1.0 + erf_series(1.0 / 2.0_f64.sqrt()));
        assert!((out[2] - expect).abs() < 1e-12);
    }

    #[test]
    fn backward_square_sum_and_unused_leaf() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap());
        let unused = tape.leaf(Tensor::full(vec![2, 2], 5.0));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.data(), &[2.0, -4.0, 6.0]);
        let gu = grads.get(unused).unwrap();
        assert!(gu.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]));
        assert!(matches!(
            tape.backward(x),
            Err(crate::error::Error::Contract(_))
        ));
    }

    /// Central finite differences against the analytic gradient for a
    /// composition of linear, gelu and layer_norm (64-bit, eps = 1e-3).
    #[test]
    fn gradients_match_finite_differences() {
        let run = |params: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
            let mut tape: Tape<f64> = Tape::new();
            let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
            let (w1, b1, w2, gamma, beta, x) =
                (vars[0], vars[1], vars[2], vars[3], vars[4], vars[5]);
            let h = tape.linear(x, w1, Some(b1)).unwrap();
            let h = tape.gelu(h);
            let h = tape.matmul(h, w2).unwrap();
            let h = tape.layer_norm(h, gamma, beta, 1e-5).unwrap();
            let sm = tape.softmax_rows(h).unwrap();
            let t = tape.tanh(sm);
            let loss = tape.sum_all(t);
            let sq = tape.mul(loss, loss).unwrap();
            let g = tape.backward(sq).unwrap();
            (
                tape.value(sq).item(),
                vars.iter().map(|&v| g.get(v).unwrap().clone()).collect(),
            )
        };

        let params = vec![
            randt(vec![4, 6], 11),
            randt(vec![1, 6], 12),
            randt(vec![6, 5], 13),
            randt(vec![1, 5], 14),
            randt(vec![1, 5], 15),
            randt(vec![3, 4], 16),
        ];
        let (_, analytic) = run(&params);
        let eps = 1e-3;
        for pi in 0..params.len() {
            for k in 0..params[pi].numel() {
                let mut plus = params.clone();
                plus[pi].data_mut()[k] += eps;
                let mut minus = params.clone();
                minus[pi].data_mut()[k] -= eps;
                let fd = (run(&plus).0 - run(&minus).0) / (2.0 * eps);
                let an = analytic[pi].data()[k];
                let denom = an.abs().max(fd.abs()).max(1e-4);
                assert!(
                    ((an - fd) / denom).abs() < 1e-4,
                    "param {pi} entry {k}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn rope_round_trips_through_backward() {
        // gradient of sum(rope(x)) equals rope^T applied to ones
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(randt(vec![3, 4], 21));
        let cos = randt(vec![3, 2], 22).map(f64::cos);
        let sin = randt(vec![3, 2], 22).map(f64::sin);
        let y = tape.rope(x, cos.clone(), sin.clone()).unwrap();
        let loss = tape.sum_all(y);
        let g = tape.backward(loss).unwrap();
        // finite differences
        let base = tape.value(x).clone();
        let eps = 1e-6;
        for k in 0..base.numel() {
            let mut t2: Tape<f64> = Tape::new();
            let mut d = base.clone();
            d.data_mut()[k] += eps;
            let xv = t2.leaf(d);
            let y2 = t2.rope(xv, cos.clone(), sin.clone()).unwrap();
            let l2 = t2.sum_all(y2);
            let fd = (t2.value(l2).item() - tape.value(loss).item()) / eps;
            assert!((fd - g.get(x).unwrap().data()[k]).abs() < 1e-5);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        // softmax rows sum to 1 +- 1e-6 for all finite inputs incl. 1e3 scale
        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..500, scale in 1.0f64..1000.0) {
            let x = randt(vec![4, 7], seed).map(|v| v * scale);
            let mut tape: Tape<f64> = Tape::new();
            let v = tape.leaf(x);
            let s = tape.softmax_rows(v).unwrap();
            for i in 0..4 {
                let sum: f64 = (0..7).map(|j| tape.value(s).get(&[i, j])).sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
        }

        // (AB)C ~= A(BC) within 1e-5
        #[test]
        fn matmul_associativity(seed in 0u64..500) {
            let a = randt(vec![3, 4], seed);
            let b = randt(vec![4, 5], seed + 1000);
            let c = randt(vec![5, 2], seed + 2000);
            let mut tape: Tape<f64> = Tape::new();
            let (va, vb, vc) = (tape.leaf(a), tape.leaf(b), tape.leaf(c));
            let ab = tape.matmul(va, vb).unwrap();
            let ab_c = tape.matmul(ab, vc).unwrap();
            let bc = tape.matmul(vb, vc).unwrap();
            let a_bc = tape.matmul(va, bc).unwrap();
            prop_assert!(tape.value(ab_c).max_abs_diff(tape.value(a_bc)) < 1e-5);
        }
    }
}
