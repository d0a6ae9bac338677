//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation eagerly (values are computed when the
//! node is created) and [`Graph::backward`] walks the tape in reverse. Nodes
//! created from inputs that do not require gradients are skipped during the
//! backward sweep, so frozen parameters and teacher activations cost nothing.

use crate::scalar::Scalar;
use crate::tensor::{mse, Matrix};

/// Handle to a node in a [`Graph`].
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
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    /// Adds a constant; the gradient passes through unchanged.
    AddConst(Var),
    MulConst(Var, Matrix<T>),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    RowMse {
        x: Var,
        target: Matrix<T>,
        pairs: Vec<(usize, usize, T)>,
    },
    LinComb(Vec<(Var, T)>),
    SoftmaxXent {
        logits: Var,
        class: usize,
    },
    BceLogits {
        logits: Var,
        targets: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let half = T::of(0.5);
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * k * x * x)
}

fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (T::one() + (-z.abs()).exp()).ln()
}

fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, m: Matrix<T>) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn leaf(&mut self, m: Matrix<T>, requires_grad: bool) -> Var {
        self.push(m, Op::Leaf, requires_grad)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let m = self.value(v).clone();
        self.push(m, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let m = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(m, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let m = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(m, Op::MatMulT(a, b), rg)
    }

    /// Adds the `1×m` row `bias` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1);
        assert_eq!(b.cols(), self.value(x).cols());
        let mut m = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..m.rows() {
            for (o, &bv) in m.row_mut(r).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(m, Op::AddBias(x, bias), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut m = self.value(a).clone();
        m.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(m, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let m = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(m, Op::Scale(a, s), rg)
    }

    pub fn add_const(&mut self, a: Var, c: &Matrix<T>) -> Var {
        let mut m = self.value(a).clone();
        m.add_assign(c);
        let rg = self.rg(a);
        self.push(m, Op::AddConst(a), rg)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Matrix<T>) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), c.shape());
        let data = x.data().iter().zip(c.data()).map(|(&p, &q)| p * q).collect();
        let m = Matrix::from_vec(x.rows(), x.cols(), data);
        let rg = self.rg(a);
        self.push(m, Op::MulConst(a, c), rg)
    }

    /// Rows of `table` at `indices` (embedding lookup, row selection).
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = self.value(table);
        let mut m = Matrix::zeros(indices.len(), t.cols());
        for (r, &i) in indices.iter().enumerate() {
            m.row_mut(r).copy_from_slice(t.row(i));
        }
        let rg = self.rg(table);
        self.push(m, Op::Gather(table, indices.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let v = self.value(p);
                m.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
                off += v.cols();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(m, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let mut m = Matrix::zeros(x.rows(), len);
        for r in 0..x.rows() {
            m.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(m, Op::SliceCols(a, start), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut m = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            softmax_row(x.row(r), m.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(m, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise layer normalization with learned `1×m` gain and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let dn = T::of(d as f64);
        let mut xhat = Matrix::zeros(n, d);
        let mut out = Matrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, g[c] * h + b[c]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let m = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(m, Op::Gelu(a), rg)
    }

    /// `Σ w · MSE(x[i], target[j])` over `(i, j, w)` triples, as a `1×1` node.
    pub fn row_mse(&mut self, x: Var, target: Matrix<T>, pairs: Vec<(usize, usize, T)>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.cols(), target.cols(), "row_mse width mismatch");
        let v = pairs
            .iter()
            .fold(T::zero(), |acc, &(i, j, w)| acc + w * mse(xv.row(i), target.row(j)));
        let rg = self.rg(x);
        self.push(Matrix::scalar(v), Op::RowMse { x, target, pairs }, rg)
    }

    /// `Σ c · s` over `1×1` nodes.
    pub fn lin_comb(&mut self, terms: &[(Var, T)]) -> Var {
        let v = terms
            .iter()
            .fold(T::zero(), |acc, &(s, c)| acc + c * self.value(s).item());
        let rg = terms.iter().any(|&(s, _)| self.rg(s));
        self.push(Matrix::scalar(v), Op::LinComb(terms.to_vec()), rg)
    }

    /// Softmax cross-entropy of a `1×C` logit row against one class.
    pub fn softmax_xent(&mut self, logits: Var, class: usize) -> Var {
        let z = self.value(logits).data();
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        let v = lse - z[class];
        let rg = self.rg(logits);
        self.push(Matrix::scalar(v), Op::SoftmaxXent { logits, class }, rg)
    }

    /// Binary cross-entropy with logits, summed over classes.
    pub fn bce_logits(&mut self, logits: Var, targets: Vec<T>) -> Var {
        let z = self.value(logits).data();
        assert_eq!(z.len(), targets.len());
        let v = z
            .iter()
            .zip(&targets)
            .fold(T::zero(), |acc, (&zi, &yi)| acc + softplus(zi) - yi * zi);
        let rg = self.rg(logits);
        self.push(Matrix::scalar(v), Op::BceLogits { logits, targets }, rg)
    }

    /// Reverse sweep from a `1×1` node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    self.accumulate(grads, a, g.matmul_t(self.value(b)));
                }
                if self.rg(b) {
                    self.accumulate(grads, b, self.value(a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    self.accumulate(grads, a, g.matmul(self.value(b)));
                }
                if self.rg(b) {
                    self.accumulate(grads, b, g.t_matmul(self.value(a)));
                }
            }
            Op::AddBias(x, bias) => {
                let (x, bias) = (*x, *bias);
                if self.rg(bias) {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, bias, gb);
                }
                self.accumulate(grads, x, g.clone());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::MulConst(a, c) => {
                let data = g.data().iter().zip(c.data()).map(|(&p, &q)| p * q).collect();
                self.accumulate(grads, *a, Matrix::from_vec(g.rows(), g.cols(), data));
            }
            Op::Gather(table, indices) => {
                let t = self.value(*table);
                let mut gt = Matrix::zeros(t.rows(), t.cols());
                for (r, &i) in indices.iter().enumerate() {
                    for (o, &v) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    if self.rg(p) {
                        let data = g.data()[off * cols..(off + rows) * cols].to_vec();
                        self.accumulate(grads, p, Matrix::from_vec(rows, cols, data));
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    if self.rg(p) {
                        let mut gp = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    off += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.value(*a).shape();
                let mut ga = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let d = yr.iter().zip(gr).fold(T::zero(), |acc, (&p, &q)| acc + p * q);
                    for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - d);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, d) = xhat.shape();
                let gam = self.value(*gamma).data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut gg = Matrix::zeros(1, d);
                    let mut gbeta = Matrix::zeros(1, d);
                    for r in 0..n {
                        for c in 0..d {
                            let gv = g.get(r, c);
                            gg.data_mut()[c] += gv * xhat.get(r, c);
                            gbeta.data_mut()[c] += gv;
                        }
                    }
                    self.accumulate(grads, *gamma, gg);
                    self.accumulate(grads, *beta, gbeta);
                }
                if self.rg(*x) {
                    let dn = T::of(d as f64);
                    let mut gx = Matrix::zeros(n, d);
                    for (r, &is) in inv_std.iter().enumerate().take(n) {
                        let dxhat: Vec<T> = (0..d).map(|c| g.get(r, c) * gam[c]).collect();
                        let sum_dxhat: T = dxhat.iter().copied().sum();
                        let sum_dxhat_xhat: T = (0..d).fold(T::zero(), |acc, c| acc + dxhat[c] * xhat.get(r, c));
                        for (c, &dx) in dxhat.iter().enumerate() {
                            let v = is / dn * (dn * dx - sum_dxhat - xhat.get(r, c) * sum_dxhat_xhat);
                            gx.set(r, c, v);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| gv * gelu_grad(xv))
                    .collect();
                self.accumulate(grads, *a, Matrix::from_vec(x.rows(), x.cols(), data));
            }
            Op::RowMse { x, target, pairs } => {
                let xv = self.value(*x);
                let upstream = g.item();
                let d = T::of(xv.cols() as f64);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for &(i, j, w) in pairs {
                    let coef = upstream * w * T::of(2.0) / d;
                    let t = target.row(j);
                    let xr = xv.row(i).to_vec();
                    for (c, o) in gx.row_mut(i).iter_mut().enumerate() {
                        *o += coef * (xr[c] - t[c]);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LinComb(terms) => {
                let upstream = g.item();
                for &(s, c) in terms {
                    self.accumulate(grads, s, Matrix::scalar(upstream * c));
                }
            }
            Op::SoftmaxXent { logits, class } => {
                let z = self.value(*logits);
                let mut p = Matrix::zeros(z.rows(), z.cols());
                softmax_row(z.data(), p.data_mut());
                p.data_mut()[*class] -= T::one();
                let upstream = g.item();
                self.accumulate(grads, *logits, p.map(|v| v * upstream));
            }
            Op::BceLogits { logits, targets } => {
                let z = self.value(*logits);
                let upstream = g.item();
                let data = z
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&zi, &yi)| upstream * (sigmoid(zi) - yi))
                    .collect();
                self.accumulate(grads, *logits, Matrix::from_vec(z.rows(), z.cols(), data));
            }
        }
    }
}
