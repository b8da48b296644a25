//! Reverse-mode differentiation over a fixed set of tensor operations.
//!
//! A [`Tape`] is an append-only arena of nodes. Every operation pushes one
//! node and returns its [`Var`] handle, so node indices are already a
//! topological order and `backward` is a single reverse sweep.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::math;
use super::tensor::{linear_forward, matmul_into, Tensor};
use super::log_softmax_rows;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    /// `x * w^T (+ bias)`
    Linear {
        x: Var,
        w: Var,
        bias: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    /// Softmax cross-entropy against per-row target distributions.
    CrossEntropy {
        logits: Var,
        targets: Vec<f64>,
        probs: Vec<f64>,
    },
    Kl {
        p: Var,
        q: Var,
        temperature: f64,
        p_log: Vec<f64>,
        q_log: Vec<f64>,
        row_kl: Vec<f64>,
    },
    RowNormMean {
        x: Var,
        norms: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    RotationAggregate {
        x: Var,
        classes: usize,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records a computation and propagates gradients backwards through it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// Adds a leaf. `requires_grad = false` makes it a constant (detached).
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` root with respect to `v`, shaped like
    /// `v`. `None` when `v` does not require gradients or is unreachable.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = &self.nodes[v.0].value;
        if !t.is_matrix() {
            return Err(Error::dim(op, format!("expected a matrix, got {:?}", t.shape())));
        }
        Ok((t.rows(), t.cols()))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::MatMul(a, b)))
    }

    /// Affine map `x * w^T + bias` with `w` stored as `out x in`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (r, k) = self.matrix(x, "linear")?;
        let (c, k2) = self.matrix(w, "linear")?;
        if k != k2 {
            return Err(Error::dim("linear", format!("input width {} vs weight width {}", k, k2)));
        }
        if let Some(b) = bias {
            if self.value(b).len() != c {
                return Err(Error::dim("linear", "bias length"));
            }
        }
        let out = linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            r,
            k,
            c,
        );
        let mut deps = vec![x, w];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::matrix(r, c, out)?, rg, Op::Linear { x, w, bias }))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * s).collect()).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix(logits, "cross_entropy")?;
        if labels.len() != r {
            return Err(Error::dim("cross_entropy", format!("{} labels for {} rows", labels.len(), r)));
        }
        let mut targets = vec![0.0; r * c];
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Label { label: y, classes: c });
            }
            targets[i * c + y] = 1.0;
        }
        self.cross_entropy_soft_unchecked(logits, targets, r, c)
    }

    /// Mean over rows of `-sum_c target_c * log softmax(logits)_c` with
    /// per-row probability vectors as targets.
    pub fn cross_entropy_soft(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let (r, c) = self.matrix(logits, "cross_entropy_soft")?;
        if targets.shape() != [r, c] {
            return Err(Error::dim("cross_entropy_soft", format!("targets {:?}", targets.shape())));
        }
        self.cross_entropy_soft_unchecked(logits, targets.data().to_vec(), r, c)
    }

    fn cross_entropy_soft_unchecked(&mut self, logits: Var, targets: Vec<f64>, r: usize, c: usize) -> Result<Var> {
        let logp = log_softmax_rows(self.value(logits).data(), c);
        let mut loss = 0.0;
        for (lp, t) in logp.iter().zip(&targets) {
            if *t != 0.0 {
                loss -= t * lp;
            }
        }
        let loss = if r == 0 { 0.0 } else { loss / r as f64 };
        let probs = logp.into_iter().map(math::exp).collect();
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), rg, Op::CrossEntropy { logits, targets, probs }))
    }

    /// Mean over rows of `KL(softmax(p / T) || softmax(q / T))`.
    pub fn kl_div(&mut self, p: Var, q: Var, temperature: f64) -> Result<Var> {
        self.same_shape(p, q, "kl_div")?;
        let (r, c) = self.matrix(p, "kl_div")?;
        if !(temperature > 0.0) {
            return Err(Error::Argument(format!("temperature must be positive, got {}", temperature)));
        }
        let scaled = |t: &Tensor| -> Vec<f64> { t.data().iter().map(|v| v / temperature).collect() };
        let lp = log_softmax_rows(&scaled(self.value(p)), c);
        let lq = log_softmax_rows(&scaled(self.value(q)), c);
        let mut row_kl = vec![0.0; r];
        for i in 0..r {
            let mut s = 0.0;
            for j in i * c..(i + 1) * c {
                s += math::exp(lp[j]) * (lp[j] - lq[j]);
            }
            row_kl[i] = s;
        }
        let loss = if r == 0 { 0.0 } else { row_kl.iter().sum::<f64>() / r as f64 };
        let rg = self.rg(&[p, q]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::Kl {
                p,
                q,
                temperature,
                p_log: lp,
                q_log: lq,
                row_kl,
            },
        ))
    }

    /// Mean over rows of the Euclidean row norm.
    pub fn row_norm_mean(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix(x, "row_norm_mean")?;
        let norms: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(c.max(1))
            .map(|row| math::sqrt(row.iter().map(|v| v * v).sum()))
            .collect();
        let loss = if r == 0 { 0.0 } else { norms.iter().sum::<f64>() / r as f64 };
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(loss), rg, Op::RowNormMean { x, norms }))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, _) = self.matrix(x, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::dim("gather_rows", format!("row {} of {}", bad, r)));
        }
        let out = self.value(x).select_rows(idx);
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::GatherRows(x, idx.to_vec())))
    }

    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix(x, "gather_cols")?;
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::dim("gather_cols", format!("column {} of {}", bad, c)));
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            let row = v.row(i);
            data.extend(idx.iter().map(|&j| row[j]));
        }
        let out = Tensor::matrix(r, idx.len(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::GatherCols(x, idx.to_vec())))
    }

    /// Averages rotation-augmented logits back onto base classes.
    ///
    /// `x` is `4B x 4C` with rows `4i..4i+3` holding the four rotations of
    /// sample `i` and column `4c + j` the score of class `c` under rotation
    /// `j`. Output is `B x C` with `out[i][c] = 1/4 sum_j x[4i+j][4c+j]`.
    pub fn rotation_aggregate(&mut self, x: Var, classes: usize) -> Result<Var> {
        let (r, c) = self.matrix(x, "rotation_aggregate")?;
        if r % 4 != 0 || c != 4 * classes {
            return Err(Error::Protocol(format!(
                "rotation grouping needs 4B x 4C logits, got {} x {} for {} classes",
                r, c, classes
            )));
        }
        let b = r / 4;
        let v = self.value(x);
        let mut data = vec![0.0; b * classes];
        for i in 0..b {
            for k in 0..classes {
                let mut s = 0.0;
                for j in 0..4 {
                    s += v.get(4 * i + j, 4 * k + j);
                }
                data[i * classes + k] = 0.25 * s;
            }
        }
        let out = Tensor::matrix(b, classes, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::RotationAggregate { x, classes }))
    }

    /// `sum_i w_i * v_i` over scalar nodes. Zero-weight terms contribute
    /// nothing to the value or the gradients.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::dim("weighted_sum", format!("term shape {:?}", t.shape())));
            }
            if w != 0.0 {
                total += w * t.item();
            }
        }
        let deps: Vec<Var> = terms.iter().filter(|t| t.1 != 0.0).map(|t| t.0).collect();
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::scalar(total), rg, Op::WeightedSum(terms.to_vec())))
    }

    /// Back-propagates from the scalar `root`, replacing gradients of any
    /// previous call.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::dim("backward", "root must be a scalar"));
        }
        let n = root.0 + 1;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![1.0]);
        for idx in (0..n).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // Ops borrow node values immutably while grads are written, so the
        // op is temporarily moved out of the node.
        let op = core::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, k) = (self.value(*a).rows(), self.value(*a).cols());
                let c = self.value(*b).cols();
                if self.requires_grad(*a) {
                    // dA = G * B^T
                    let bt = self.value(*b).transpose();
                    let mut da = vec![0.0; r * k];
                    matmul_into(g, bt.data(), &mut da, r, c, k);
                    self.accumulate(*a, |s| add_into(s, &da));
                }
                if self.requires_grad(*b) {
                    // dB = A^T * G
                    let at = self.value(*a).transpose();
                    let mut db = vec![0.0; k * c];
                    matmul_into(at.data(), g, &mut db, k, r, c);
                    self.accumulate(*b, |s| add_into(s, &db));
                }
            }
            Op::Linear { x, w, bias } => {
                let (r, k) = (self.value(*x).rows(), self.value(*x).cols());
                let c = self.value(*w).rows();
                if self.requires_grad(*x) {
                    // dX = G * W
                    let mut dx = vec![0.0; r * k];
                    matmul_into(g, self.value(*w).data(), &mut dx, r, c, k);
                    self.accumulate(*x, |s| add_into(s, &dx));
                }
                if self.requires_grad(*w) {
                    // dW = G^T * X
                    let gt = Tensor::matrix(r, c, g.to_vec()).expect("grad shape").transpose();
                    let mut dw = vec![0.0; c * k];
                    matmul_into(gt.data(), self.value(*x).data(), &mut dw, c, r, k);
                    self.accumulate(*w, |s| add_into(s, &dw));
                }
                if let Some(b) = bias {
                    let mut db = vec![0.0; c];
                    for row in g.chunks_exact(c) {
                        add_into(&mut db, row);
                    }
                    self.accumulate(*b, |s| add_into(s, &db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, |s| add_into(s, g));
                self.accumulate(*b, |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, |s| add_into(s, g));
                self.accumulate(*b, |s| {
                    for (d, v) in s.iter_mut().zip(g) {
                        *d -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                self.accumulate(*a, |s| add_into(s, &da));
                self.accumulate(*b, |s| add_into(s, &db));
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.accumulate(*a, |s| {
                    for (d, v) in s.iter_mut().zip(g) {
                        *d += k * v;
                    }
                });
            }
            Op::Relu(a) => {
                let mask: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(*a, |s| add_into(s, &mask));
            }
            Op::Sum(a) => {
                let g0 = g[0];
                self.accumulate(*a, |s| s.iter_mut().for_each(|d| *d += g0));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (r, c) = (self.value(*logits).rows(), self.value(*logits).cols());
                let scale = g[0] / r as f64;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let mass: f64 = targets[row.clone()].iter().sum();
                    for j in row {
                        d[j] = scale * (probs[j] * mass - targets[j]);
                    }
                }
                self.accumulate(*logits, |s| add_into(s, &d));
            }
            Op::Kl {
                p,
                q,
                temperature,
                p_log,
                q_log,
                row_kl,
            } => {
                let (r, c) = (self.value(*p).rows(), self.value(*p).cols());
                let scale = g[0] / (r as f64 * temperature);
                if self.requires_grad(*p) {
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        for j in i * c..(i + 1) * c {
                            d[j] = scale * math::exp(p_log[j]) * (p_log[j] - q_log[j] - row_kl[i]);
                        }
                    }
                    self.accumulate(*p, |s| add_into(s, &d));
                }
                if self.requires_grad(*q) {
                    let d: Vec<f64> = q_log
                        .iter()
                        .zip(p_log)
                        .map(|(&lq, &lp)| scale * (math::exp(lq) - math::exp(lp)))
                        .collect();
                    self.accumulate(*q, |s| add_into(s, &d));
                }
            }
            Op::RowNormMean { x, norms } => {
                let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                let scale = g[0] / r as f64;
                let xv = self.value(*x).data();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    if norms[i] > 0.0 {
                        for j in i * c..(i + 1) * c {
                            d[j] = scale * xv[j] / norms[i];
                        }
                    }
                }
                self.accumulate(*x, |s| add_into(s, &d));
            }
            Op::GatherRows(x, idx) => {
                let c = self.value(*x).cols();
                self.accumulate(*x, |s| {
                    for (out_r, &src) in idx.iter().enumerate() {
                        add_into(&mut s[src * c..(src + 1) * c], &g[out_r * c..(out_r + 1) * c]);
                    }
                });
            }
            Op::GatherCols(x, idx) => {
                let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                let w = idx.len();
                self.accumulate(*x, |s| {
                    for i in 0..r {
                        for (k, &j) in idx.iter().enumerate() {
                            s[i * c + j] += g[i * w + k];
                        }
                    }
                });
            }
            Op::RotationAggregate { x, classes } => {
                let cols = self.value(*x).cols();
                let b = self.value(*x).rows() / 4;
                let classes = *classes;
                self.accumulate(*x, |s| {
                    for i in 0..b {
                        for k in 0..classes {
                            let gv = 0.25 * g[i * classes + k];
                            for j in 0..4 {
                                s[(4 * i + j) * cols + 4 * k + j] += gv;
                            }
                        }
                    }
                });
            }
            Op::WeightedSum(terms) => {
                let g0 = g[0];
                for &(v, w) in terms {
                    if w != 0.0 {
                        self.accumulate(v, |s| s[0] += w * g0);
                    }
                }
            }
        }
        self.nodes[idx].op = op;
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
