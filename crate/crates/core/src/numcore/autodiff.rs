//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every primitive in the order it is evaluated, so node
//! ids are already a topological order and [`Graph::backward`] is a single
//! reverse sweep. Leaves created with [`Graph::param`] receive gradients;
//! leaves created with [`Graph::constant`] (and anything computed only from
//! constants) do not. [`Graph::detach`] copies a value into a new constant,
//! which is how stop-gradient branches are expressed.

use crate::error::{Error, Result};
use crate::numcore::matrix::{Axis, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of an image batch stored one image per row, channel-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Abs(NodeId),
    L2Normalize { x: NodeId, axis: Axis, norms: Vec<f64>, eps: f64 },
    BatchNorm { x: NodeId, inv_std: Vec<f64> },
    RowLogSumExp { x: NodeId, mask: Option<Vec<bool>> },
    RowSum(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ConcatCols(NodeId, NodeId),
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize> },
    Conv2d { x: NodeId, weight: NodeId, bias: NodeId, input: ImageShape, kernel: usize },
    AvgPool2 { x: NodeId, input: ImageShape },
    GlobalAvgPool { x: NodeId, input: ImageShape },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every parameter leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::ShapeMismatch { op, left: a.shape(), right: b.shape() }
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    /// Same value, no gradient flow.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).get(0, 0)
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.rg(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Adds a `1×C` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(shape_err("add_row", av, bv));
        }
        let mut v = av.clone();
        for r in 0..v.rows() {
            v.row_mut(r).iter_mut().zip(bv.row(0)).for_each(|(x, b)| *x += b);
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(v, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(v, Op::Abs(a), rg)
    }

    /// Axis-wise unit normalization, dividing by `max(‖v‖, eps)`.
    pub fn l2_normalize(&mut self, a: NodeId, axis: Axis, eps: f64) -> Result<NodeId> {
        let x = self.value(a);
        let v = x.l2_normalize(axis, eps)?;
        let norms = x.norms(axis);
        let rg = self.rg(a);
        Ok(self.push(v, Op::L2Normalize { x: a, axis, norms, eps }, rg))
    }

    /// Standardizes every column over the batch (biased variance, no affine).
    pub fn batch_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let x = self.value(a);
        let (n, c) = x.shape();
        if n == 0 || c == 0 {
            return Err(Error::EmptyMatrix);
        }
        let mut mean = vec![0.0; c];
        for r in 0..n {
            mean.iter_mut().zip(x.row(r)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / n as f64 + eps).sqrt()).collect();
        let v = Matrix::from_fn(n, c, |r, j| (x.get(r, j) - mean[j]) * inv_std[j]);
        let rg = self.rg(a);
        Ok(self.push(v, Op::BatchNorm { x: a, inv_std }, rg))
    }

    /// `log Σ_j exp(x_ij)` per row over the unmasked entries (`mask[k]` true
    /// keeps entry `k` in row-major order). Output is `rows × 1`.
    pub fn row_log_sum_exp(&mut self, a: NodeId, mask: Option<Vec<bool>>) -> Result<NodeId> {
        let x = self.value(a);
        if let Some(m) = &mask {
            if m.len() != x.len() {
                return Err(Error::InvalidArgument(format!(
                    "mask length {} for {}x{} input",
                    m.len(),
                    x.rows(),
                    x.cols()
                )));
            }
        }
        let cols = x.cols();
        let mut out = Matrix::zeros(x.rows(), 1);
        let mut buf = Vec::with_capacity(cols);
        for r in 0..x.rows() {
            buf.clear();
            for (c, &v) in x.row(r).iter().enumerate() {
                if mask.as_ref().is_none_or(|m| m[r * cols + c]) {
                    buf.push(v);
                }
            }
            out.set(r, 0, super::softmax::log_sum_exp(&buf));
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::RowLogSumExp { x: a, mask }, rg))
    }

    /// Sum of each row, `rows × 1`.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = Matrix::from_fn(x.rows(), 1, |r, _| x.row(r).iter().sum());
        let rg = self.rg(a);
        self.push(v, Op::RowSum(a), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = Matrix::filled(1, 1, x.sum() / x.len() as f64);
        let rg = self.rg(a);
        self.push(v, Op::Mean(a), rg)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(shape_err("concat_cols", av, bv));
        }
        let ac = av.cols();
        let v = Matrix::from_fn(av.rows(), ac + bv.cols(), |r, c| {
            if c < ac {
                av.get(r, c)
            } else {
                bv.get(r, c - ac)
            }
        });
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::ConcatCols(a, b), rg))
    }

    /// Mean softmax cross-entropy of `logits` (`N × classes`) against labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let x = self.value(logits);
        if labels.len() != x.rows() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} rows",
                labels.len(),
                x.rows()
            )));
        }
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= x.cols() {
                return Err(Error::IndexOutOfRange { index: y, len: x.cols() });
            }
            total += super::softmax::log_sum_exp(x.row(r)) - x.get(r, y);
        }
        let v = Matrix::filled(1, 1, total / labels.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(v, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec() }, rg))
    }

    /// Same-padded, stride-1 convolution. `weight` is `out × (in·k·k)`,
    /// `bias` is `1 × out`; output rows are `out·H·W`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        input: ImageShape,
        kernel: usize,
    ) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(weight), self.value(bias));
        let patch = input.channels * kernel * kernel;
        if xv.cols() != input.len() || wv.cols() != patch || bv.shape() != (1, wv.rows()) || kernel % 2 == 0 {
            return Err(shape_err("conv2d", xv, wv));
        }
        let out_c = wv.rows();
        let hw = input.height * input.width;
        let mut out = Matrix::zeros(xv.rows(), out_c * hw);
        for n in 0..xv.rows() {
            let cols = im2col(xv.row(n), input, kernel);
            let y = wv.matmul(&cols)?;
            let dst = out.row_mut(n);
            for o in 0..out_c {
                let b = bv.get(0, o);
                for (d, s) in dst[o * hw..(o + 1) * hw].iter_mut().zip(y.row(o)) {
                    *d = s + b;
                }
            }
        }
        let rg = self.rg(x) || self.rg(weight) || self.rg(bias);
        Ok(self.push(out, Op::Conv2d { x, weight, bias, input, kernel }, rg))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: NodeId, input: ImageShape) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.cols() != input.len() || input.height % 2 != 0 || input.width % 2 != 0 {
            return Err(Error::InvalidArgument(format!("avg_pool2 on {input:?}")));
        }
        let (h2, w2) = (input.height / 2, input.width / 2);
        let mut out = Matrix::zeros(xv.rows(), input.channels * h2 * w2);
        for n in 0..xv.rows() {
            let src = xv.row(n);
            let dst = out.row_mut(n);
            for c in 0..input.channels {
                for i in 0..h2 {
                    for j in 0..w2 {
                        let base = c * input.height * input.width;
                        let at = |di: usize, dj: usize| src[base + (2 * i + di) * input.width + 2 * j + dj];
                        dst[c * h2 * w2 + i * w2 + j] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::AvgPool2 { x, input }, rg))
    }

    /// Spatial mean per channel, `N × channels`.
    pub fn global_avg_pool(&mut self, x: NodeId, input: ImageShape) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.cols() != input.len() {
            return Err(Error::InvalidArgument(format!("global_avg_pool on {input:?}")));
        }
        let hw = input.height * input.width;
        let out = Matrix::from_fn(xv.rows(), input.channels, |n, c| {
            xv.row(n)[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64
        });
        let rg = self.rg(x);
        Ok(self.push(out, Op::GlobalAvgPool { x, input }, rg))
    }

    /// Reverse sweep from a `1×1` node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.shape() != (1, 1) {
            return Err(Error::NotScalar(out.value.shape()));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }

        // parameter leaves unreachable from the output get explicit zeros
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[idx].is_none() {
                grads[idx] = Some(Matrix::zeros(node.value.rows(), node.value.cols()));
            } else if !matches!(node.op, Op::Leaf) {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) -> Result<()> {
        if !self.rg(id) {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(existing) => existing.axpy(1.0, &g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                debug_assert!(a.0 < idx && b.0 < idx);
                if self.rg(*a) {
                    self.acc(grads, *a, g.matmul_t(self.value(*b))?)?;
                }
                if self.rg(*b) {
                    self.acc(grads, *b, self.value(*a).t_matmul(g)?)?;
                }
            }
            Op::MatMulT(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if self.rg(*a) {
                    self.acc(grads, *a, g.matmul(self.value(*b))?)?;
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g.t_matmul(self.value(*a))?)?;
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose())?,
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone())?;
                self.acc(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone())?;
                self.acc(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.hadamard(self.value(*b))?)?;
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g.hadamard(self.value(*a))?)?;
                }
            }
            Op::AddRow(a, bias) => {
                self.acc(grads, *a, g.clone())?;
                if self.rg(*bias) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        db.row_mut(0).iter_mut().zip(g.row(r)).for_each(|(d, v)| *d += v);
                    }
                    self.acc(grads, *bias, db)?;
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.scale(*s))?,
            Op::Relu(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, g.zip_map(x, "relu", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?)?;
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                let d = g.zip_map(x, "abs", |gv, xv| {
                    if xv > 0.0 {
                        gv
                    } else if xv < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })?;
                self.acc(grads, *a, d)?;
            }
            Op::L2Normalize { x, axis, norms, eps } => {
                // y = x / max(‖x‖, eps); below eps the map is linear
                let xv = self.value(*x);
                let mut dots = vec![0.0; norms.len()];
                for r in 0..y.rows() {
                    for (c, (yv, gv)) in y.row(r).iter().zip(g.row(r)).enumerate() {
                        let k = if *axis == Axis::Rows { r } else { c };
                        dots[k] += yv * gv;
                    }
                }
                let dx = Matrix::from_fn(xv.rows(), xv.cols(), |r, c| {
                    let k = if *axis == Axis::Rows { r } else { c };
                    if norms[k] < *eps {
                        g.get(r, c) / eps
                    } else {
                        (g.get(r, c) - y.get(r, c) * dots[k]) / norms[k]
                    }
                });
                self.acc(grads, *x, dx)?;
            }
            Op::BatchNorm { x, inv_std } => {
                let (n, c) = y.shape();
                let mut mean_g = vec![0.0; c];
                let mut mean_gy = vec![0.0; c];
                for r in 0..n {
                    for j in 0..c {
                        mean_g[j] += g.get(r, j);
                        mean_gy[j] += g.get(r, j) * y.get(r, j);
                    }
                }
                let nf = n as f64;
                let dx = Matrix::from_fn(n, c, |r, j| {
                    inv_std[j] * (g.get(r, j) - mean_g[j] / nf - y.get(r, j) * mean_gy[j] / nf)
                });
                self.acc(grads, *x, dx)?;
            }
            Op::RowLogSumExp { x, mask } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let dx = Matrix::from_fn(xv.rows(), cols, |r, c| {
                    if mask.as_ref().is_none_or(|m| m[r * cols + c]) {
                        g.get(r, 0) * (xv.get(r, c) - y.get(r, 0)).exp()
                    } else {
                        0.0
                    }
                });
                self.acc(grads, *x, dx)?;
            }
            Op::RowSum(a) => {
                let xv = self.value(*a);
                self.acc(grads, *a, Matrix::from_fn(xv.rows(), xv.cols(), |r, _| g.get(r, 0)))?;
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.acc(grads, *a, Matrix::filled(r, c, g.get(0, 0)))?;
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                self.acc(grads, *a, Matrix::filled(r, c, g.get(0, 0) / (r * c) as f64))?;
            }
            Op::ConcatCols(a, b) => {
                let ac = self.value(*a).cols();
                let bc = self.value(*b).cols();
                self.acc(grads, *a, Matrix::from_fn(g.rows(), ac, |r, c| g.get(r, c)))?;
                self.acc(grads, *b, Matrix::from_fn(g.rows(), bc, |r, c| g.get(r, ac + c)))?;
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let xv = self.value(*logits);
                let scale = g.get(0, 0) / labels.len() as f64;
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for (r, &lab) in labels.iter().enumerate() {
                    let lse = super::softmax::log_sum_exp(xv.row(r));
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        let p = (xv.get(r, c) - lse).exp();
                        *o = scale * (p - if c == lab { 1.0 } else { 0.0 });
                    }
                }
                self.acc(grads, *logits, dx)?;
            }
            Op::Conv2d { x, weight, bias, input, kernel } => {
                let (xv, wv) = (self.value(*x), self.value(*weight));
                let out_c = wv.rows();
                let hw = input.height * input.width;
                let mut dw = Matrix::zeros(wv.rows(), wv.cols());
                let mut db = Matrix::zeros(1, out_c);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for n in 0..xv.rows() {
                    let gy = Matrix::from_vec(out_c, hw, g.row(n).to_vec())?;
                    for o in 0..out_c {
                        db.data_mut()[o] += gy.row(o).iter().sum::<f64>();
                    }
                    if self.rg(*weight) {
                        let cols = im2col(xv.row(n), *input, *kernel);
                        dw.axpy(1.0, &gy.matmul_t(&cols)?)?;
                    }
                    if self.rg(*x) {
                        let dcols = wv.t_matmul(&gy)?;
                        col2im_add(&dcols, *input, *kernel, dx.row_mut(n));
                    }
                }
                self.acc(grads, *weight, dw)?;
                self.acc(grads, *bias, db)?;
                self.acc(grads, *x, dx)?;
            }
            Op::AvgPool2 { x, input } => {
                let xv = self.value(*x);
                let (h2, w2) = (input.height / 2, input.width / 2);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for n in 0..xv.rows() {
                    let gr = g.row(n);
                    let dst = dx.row_mut(n);
                    for c in 0..input.channels {
                        let base = c * input.height * input.width;
                        for i in 0..h2 {
                            for j in 0..w2 {
                                let v = 0.25 * gr[c * h2 * w2 + i * w2 + j];
                                for di in 0..2 {
                                    for dj in 0..2 {
                                        dst[base + (2 * i + di) * input.width + 2 * j + dj] += v;
                                    }
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *x, dx)?;
            }
            Op::GlobalAvgPool { x, input } => {
                let hw = input.height * input.width;
                let xv = self.value(*x);
                let dx = Matrix::from_fn(xv.rows(), xv.cols(), |n, k| g.get(n, k / hw) / hw as f64);
                self.acc(grads, *x, dx)?;
            }
        }
        Ok(())
    }
}

/// Patch matrix `(C·k·k) × (H·W)` of one channel-major image, zero padded.
fn im2col(img: &[f64], s: ImageShape, k: usize) -> Matrix {
    let pad = (k / 2) as isize;
    let (h, w) = (s.height as isize, s.width as isize);
    let mut m = Matrix::zeros(s.channels * k * k, s.height * s.width);
    for c in 0..s.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = m.row_mut((c * k + ki) * k + kj);
                for i in 0..h {
                    let si = i + ki as isize - pad;
                    if si < 0 || si >= h {
                        continue;
                    }
                    for j in 0..w {
                        let sj = j + kj as isize - pad;
                        if sj < 0 || sj >= w {
                            continue;
                        }
                        row[(i * w + j) as usize] = img[c * s.height * s.width + (si * w + sj) as usize];
                    }
                }
            }
        }
    }
    m
}

fn col2im_add(cols: &Matrix, s: ImageShape, k: usize, img: &mut [f64]) {
    let pad = (k / 2) as isize;
    let (h, w) = (s.height as isize, s.width as isize);
    for c in 0..s.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = cols.row((c * k + ki) * k + kj);
                for i in 0..h {
                    let si = i + ki as isize - pad;
                    if si < 0 || si >= h {
                        continue;
                    }
                    for j in 0..w {
                        let sj = j + kj as isize - pad;
                        if sj < 0 || sj >= w {
                            continue;
                        }
                        img[c * s.height * s.width + (si * w + sj) as usize] += row[(i * w + j) as usize];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    fn random(rng: &mut Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.normal())
    }

    /// Central-difference check of `f` at `x` against the engine's gradient.
    fn check(x: &Matrix, f: impl Fn(&mut Graph, NodeId) -> NodeId, tol: f64) {
        let mut g = Graph::new();
        let leaf = g.param(x.clone());
        let out = f(&mut g, leaf);
        let grads = g.backward(out).unwrap();
        let analytic = grads.get(leaf).unwrap();
        assert_eq!(analytic.shape(), x.shape());
        let eval = |m: &Matrix| {
            let mut g = Graph::new();
            let leaf = g.constant(m.clone());
            let out = f(&mut g, leaf);
            g.scalar(out)
        };
        let h = 1e-5;
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
            let a = analytic.data()[k];
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1.0);
            assert!(err < tol, "entry {k}: analytic {a} vs fd {fd}");
        }
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let m = g.param(Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64));
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(m).unwrap(), &Matrix::filled(3, 4, 1.0));
    }

    #[test]
    fn half_squared_norm_gives_identity() {
        let mut rng = Rng::new(5);
        let x = random(&mut rng, 3, 3);
        let mut g = Graph::new();
        let m = g.param(x.clone());
        let sq = g.mul(m, m).unwrap();
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        let grads = g.backward(half).unwrap();
        assert!(grads.get(m).unwrap().max_abs_diff(&x).unwrap() < 1e-15);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut g = Graph::new();
        let m = g.param(Matrix::zeros(2, 2));
        assert!(matches!(g.backward(m), Err(Error::NotScalar((2, 2)))));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let a = g.param(Matrix::filled(2, 3, 1.0));
        let b = g.param(Matrix::filled(4, 1, 1.0));
        let s = g.sum(a);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap(), &Matrix::zeros(4, 1));
    }

    #[test]
    fn detached_branch_blocks_gradient() {
        let mut g = Graph::new();
        let a = g.param(Matrix::filled(2, 2, 3.0));
        let d = g.detach(a);
        let p = g.mul(a, d).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        // d(a*const)/da = const, not 2a
        assert_eq!(grads.get(a).unwrap(), &Matrix::filled(2, 2, 3.0));
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = Rng::new(17);
        let w = random(&mut rng, 5, 4);
        let b = random(&mut rng, 1, 4);
        let other = random(&mut rng, 6, 5);
        let x = random(&mut rng, 6, 5);

        check(&x, |g, l| {
            let wn = g.constant(w.clone());
            let bn = g.constant(b.clone());
            let y = g.matmul(l, wn).unwrap();
            let y = g.add_row(y, bn).unwrap();
            let y = g.relu(y);
            let y = g.mul(y, y).unwrap();
            g.sum(y)
        }, 1e-6);
        check(&x, |g, l| {
            let o = g.constant(other.clone());
            let y = g.matmul_t(l, o).unwrap();
            let t = g.transpose(y);
            let a = g.abs(t);
            let s = g.sub(t, a).unwrap();
            let q = g.mul(s, t).unwrap();
            g.mean(q)
        }, 1e-6);
        for axis in [Axis::Rows, Axis::Cols] {
            check(&x, |g, l| {
                let o = g.constant(other.clone());
                let n = g.l2_normalize(l, axis, 1e-12).unwrap();
                let p = g.mul(n, o).unwrap();
                g.sum(p)
            }, 1e-6);
        }
        check(&x, |g, l| {
            let o = g.constant(other.clone());
            let n = g.batch_norm(l, 1e-5).unwrap();
            let p = g.mul(n, o).unwrap();
            let p = g.mul(p, n).unwrap();
            g.sum(p)
        }, 1e-6);
        let mask: Vec<bool> = (0..30).map(|k| k % 4 != 1).collect();
        check(&x, |g, l| {
            let y = g.row_log_sum_exp(l, Some(mask.clone())).unwrap();
            let z = g.row_log_sum_exp(l, None).unwrap();
            let c = g.concat_cols(y, z).unwrap();
            let c = g.mul(c, c).unwrap();
            let r = g.row_sum(c);
            g.sum(r)
        }, 1e-6);
        check(&x, |g, l| g.softmax_cross_entropy(l, &[0, 4, 2, 2, 1, 3]).unwrap(), 1e-6);
    }

    #[test]
    fn conv_and_pooling_gradients_match_finite_differences() {
        let mut rng = Rng::new(23);
        let shape = ImageShape { channels: 2, height: 4, width: 4 };
        let x = random(&mut rng, 2, shape.len());
        let w = random(&mut rng, 3, 2 * 9);
        let b = random(&mut rng, 1, 3);
        let out_shape = ImageShape { channels: 3, height: 4, width: 4 };
        let pooled = ImageShape { channels: 3, height: 2, width: 2 };
        let probe = random(&mut rng, 2, 3);
        let head = |g: &mut Graph, xn: NodeId, wn: NodeId, bn: NodeId| {
            let y = g.conv2d(xn, wn, bn, shape, 3).unwrap();
            let y = g.avg_pool2(y, out_shape).unwrap();
            let y = g.global_avg_pool(y, pooled).unwrap();
            let p = g.constant(probe.clone());
            let y = g.mul(y, y).unwrap();
            let y = g.mul(y, p).unwrap();
            g.sum(y)
        };
        check(&x, |g, l| {
            let wn = g.constant(w.clone());
            let bn = g.constant(b.clone());
            head(g, l, wn, bn)
        }, 1e-6);
        check(&w, |g, l| {
            let xn = g.constant(x.clone());
            let bn = g.constant(b.clone());
            head(g, xn, l, bn)
        }, 1e-6);
        check(&b, |g, l| {
            let xn = g.constant(x.clone());
            let wn = g.constant(w.clone());
            head(g, xn, wn, l)
        }, 1e-6);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = Rng::new(29);
        let shape = ImageShape { channels: 2, height: 3, width: 5 };
        let x = random(&mut rng, 1, shape.len());
        let w = random(&mut rng, 2, 18);
        let b = Matrix::from_rows(&[[0.5, -0.25]]).unwrap();
        let mut g = Graph::new();
        let (xn, wn, bn) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xn, wn, bn, shape, 3).unwrap();
        let yv = g.value(y);
        for o in 0..2 {
            for i in 0..3isize {
                for j in 0..5isize {
                    let mut acc = b.get(0, o);
                    for c in 0..2 {
                        for ki in 0..3isize {
                            for kj in 0..3isize {
                                let (si, sj) = (i + ki - 1, j + kj - 1);
                                if (0..3).contains(&si) && (0..5).contains(&sj) {
                                    acc += w.get(o, (c * 3 + ki as usize) * 3 + kj as usize)
                                        * x.get(0, c * 15 + (si * 5 + sj) as usize);
                                }
                            }
                        }
                    }
                    let got = yv.get(0, o * 15 + (i * 5 + j) as usize);
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}
