//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed, never copied; each parameter appears as a single leaf however
//! often it is used, so its gradient accumulates in one place.

use std::borrow::Cow;

use super::matrix::Matrix;
use crate::scalar::Scalar;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.044_715;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Gather(Var, Vec<u32>),
    ColSlice(Var, usize),
    ConcatCols(Vec<Var>),
    MulConst(Var, Matrix<T>),
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Matrix<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    params: Vec<Option<Var>>,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(n_params: usize) -> Self {
        Tape {
            nodes: Vec::new(),
            params: vec![None; n_params],
        }
    }

    fn push(&mut self, value: Cow<'p, Matrix<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf for parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: usize, value: &'p Matrix<T>) -> Var {
        if let Some(v) = self.params[id] {
            return v;
        }
        let v = self.push(Cow::Borrowed(value), Op::Leaf, true);
        self.params[id] = Some(v);
        v
    }

    /// Leaf that takes no gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let g = self.grad_of(&[a, b]);
        self.push(Cow::Owned(v), Op::MatMul(a, b), g)
    }

    /// `a * b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_bt(self.value(b));
        let g = self.grad_of(&[a, b]);
        self.push(Cow::Owned(v), Op::MatMulBt(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let g = self.grad_of(&[a, b]);
        self.push(Cow::Owned(v), Op::Add(a, b), g)
    }

    /// Broadcast the single row of `row` over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let b = self.value(row);
        assert_eq!(b.rows(), 1, "add_row expects a row vector");
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            for (x, &y) in v.row_mut(r).iter_mut().zip(b.row(0)) {
                *x = *x + y;
            }
        }
        let g = self.grad_of(&[a, row]);
        self.push(Cow::Owned(v), Op::AddRow(a, row), g)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let mut v = self.value(a).clone();
        v.scale(s);
        let g = self.grad_of(&[a]);
        self.push(Cow::Owned(v), Op::Scale(a, s), g)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
        let c = T::lit(GELU_C);
        let half = T::lit(0.5);
        let v = self
            .value(a)
            .map(|x| half * x * (T::one() + (k * (x + c * x * x * x)).tanh()));
        let g = self.grad_of(&[a]);
        self.push(Cow::Owned(v), Op::Gelu(a), g)
    }

    /// Row-wise layer normalisation with learned `gamma` and `beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let n = T::from_usize(cols).expect("width fits");
        let mut xhat = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let s = T::one() / (var + T::lit(LN_EPS)).sqrt();
            for (h, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *h = (v - mean) * s;
            }
            rstd.push(s);
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, &gv), &bv) in out.row_mut(r).iter_mut().zip(g.row(0)).zip(b.row(0)) {
                *o = *o * gv + bv;
            }
        }
        let needs = self.grad_of(&[x, gamma, beta]);
        self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        )
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let live = if causal { (r + 1).min(row.len()) } else { row.len() };
            let max = row[..live].iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for x in &mut row[..live] {
                *x = (*x - max).exp();
                sum = sum + *x;
            }
            for x in &mut row[..live] {
                *x = *x / sum;
            }
            for x in &mut row[live..] {
                *x = T::zero();
            }
        }
        let g = self.grad_of(&[a]);
        self.push(Cow::Owned(v), Op::Softmax(a), g)
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.value(table);
        let mut v = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).copy_from_slice(t.row(id as usize));
        }
        let g = self.grad_of(&[table]);
        self.push(Cow::Owned(v), Op::Gather(table, ids.to_vec()), g)
    }

    pub fn col_slice(&mut self, a: Var, start: usize, width: usize) -> Var {
        let src = self.value(a);
        let v = Matrix::from_fn(src.rows(), width, |r, c| src.get(r, start + c));
        let g = self.grad_of(&[a]);
        self.push(Cow::Owned(v), Op::ColSlice(a, start), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            for r in 0..rows {
                v.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let g = self.grad_of(parts);
        self.push(Cow::Owned(v), Op::ConcatCols(parts.to_vec()), g)
    }

    /// Element-wise product with a constant mask (used for dropout).
    pub fn mul_const(&mut self, a: Var, mask: Matrix<T>) -> Var {
        let src = self.value(a);
        assert_eq!(src.shape(), mask.shape(), "mask shape");
        let v = Matrix::from_vec(
            src.rows(),
            src.cols(),
            src.as_slice().iter().zip(mask.as_slice()).map(|(&x, &m)| x * m).collect(),
        );
        let g = self.grad_of(&[a]);
        self.push(Cow::Owned(v), Op::MulConst(a, mask), g)
    }

    /// Back-propagate from the given `(node, upstream gradient)` seeds and
    /// return the gradient of every parameter (`None` when unused).
    pub fn backward(&self, seeds: Vec<(Var, Matrix<T>)>) -> Vec<Option<Matrix<T>>> {
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads, v, g);
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        self.params
            .iter()
            .map(|p| p.and_then(|v| grads[v.0].take()))
            .collect()
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<'p, T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g.matmul_bt(self.value(b)));
                }
                if self.wants(b) {
                    accumulate(grads, b, self.value(a).matmul_at(g));
                }
            }
            &Op::MatMulBt(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g.matmul(self.value(b)));
                }
                if self.wants(b) {
                    accumulate(grads, b, g.matmul_at(self.value(a)));
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.wants(b) {
                    accumulate(grads, b, g.clone());
                }
            }
            &Op::AddRow(a, row) => {
                if self.wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.wants(row) {
                    accumulate(grads, row, col_sums(g));
                }
            }
            &Op::Scale(a, s) => {
                let mut d = g.clone();
                d.scale(s);
                accumulate(grads, a, d);
            }
            &Op::Gelu(a) => {
                let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
                let c = T::lit(GELU_C);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let x = self.value(a);
                let d = Matrix::from_vec(
                    x.rows(),
                    x.cols(),
                    x.as_slice()
                        .iter()
                        .zip(g.as_slice())
                        .map(|(&x, &gy)| {
                            let t = (k * (x + c * x * x * x)).tanh();
                            let dy = half * (T::one() + t)
                                + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x);
                            gy * dy
                        })
                        .collect(),
                );
                accumulate(grads, a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma);
                let (rows, cols) = xhat.shape();
                let n = T::from_usize(cols).expect("width fits");
                if self.wants(*x) {
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let (gy, h) = (g.row(r), xhat.row(r));
                        let dh: Vec<T> = gy.iter().zip(gam.row(0)).map(|(&a, &b)| a * b).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() / n;
                        let mean_dhh = dh.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for ((o, &d), &hv) in dx.row_mut(r).iter_mut().zip(&dh).zip(h) {
                            *o = rstd[r] * (d - mean_dh - hv * mean_dhh);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    let mut dg = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for ((o, &gy), &h) in dg.row_mut(0).iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o = *o + gy * h;
                        }
                    }
                    accumulate(grads, *gamma, dg);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, col_sums(g));
                }
            }
            &Op::Softmax(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<T>();
                    for ((o, &p), &q) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - dot);
                    }
                }
                accumulate(grads, a, d);
            }
            Op::Gather(table, ids) => {
                let t = self.value(*table);
                let mut d = Matrix::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &gv) in d.row_mut(id as usize).iter_mut().zip(g.row(r)) {
                        *o = *o + gv;
                    }
                }
                accumulate(grads, *table, d);
            }
            &Op::ColSlice(a, start) => {
                let src = self.value(a);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[start..start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let d = Matrix::from_fn(g.rows(), w, |r, c| g.get(r, off + c));
                        accumulate(grads, p, d);
                    }
                    off += w;
                }
            }
            Op::MulConst(a, mask) => {
                let d = Matrix::from_vec(
                    g.rows(),
                    g.cols(),
                    g.as_slice().iter().zip(mask.as_slice()).map(|(&x, &m)| x * m).collect(),
                );
                accumulate(grads, *a, d);
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn col_sums<T: Scalar>(g: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &x) in out.row_mut(0).iter_mut().zip(g.row(r)) {
            *o = *o + x;
        }
    }
    out
}
