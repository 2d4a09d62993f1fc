//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape built fresh for every forward pass. Model parameters
//! live outside the tape and are referenced, not copied: `Var`s below
//! `params.len()` name parameters, everything above names tape nodes.

use crate::nn::tensor::{dot, Tensor};
use crate::scalar::Scalar;

/// Handle to a value on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    DivRows(Var, Var),
    Affine(Var, T),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Powf(Var, T),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Tensor<T>,
        count: usize,
    },
    SqDist(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p [Tensor<T>],
    trainable: &'p [bool],
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], retained for parameters and
/// gradient-tracking leaves only.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    n_params: usize,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, index: usize) -> Option<&Tensor<T>> {
        debug_assert!(index < self.n_params);
        self.grads[index].as_ref()
    }

    /// Moves the parameter gradients out, `None` for untouched or frozen ones.
    pub fn into_param_grads(mut self) -> Vec<Option<Tensor<T>>> {
        self.grads.truncate(self.n_params);
        self.grads
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p [Tensor<T>], trainable: &'p [bool]) -> Self {
        assert_eq!(params.len(), trainable.len());
        Self {
            params,
            trainable,
            nodes: Vec::new(),
        }
    }

    pub fn param(&self, index: usize) -> Var {
        assert!(index < self.params.len(), "parameter index out of range");
        Var(index)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let np = self.params.len();
        if v.0 < np {
            &self.params[v.0]
        } else {
            &self.nodes[v.0 - np].value
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn needs(&self, v: Var) -> bool {
        let np = self.params.len();
        if v.0 < np {
            self.trainable[v.0]
        } else {
            self.nodes[v.0 - np].needs_grad
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.params.len() + self.nodes.len() - 1)
    }

    /// A constant: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free input whose gradient is retained by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `a (n x m) + row (1 x m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a 1 x m bias");
        assert_eq!(av.cols(), rv.cols(), "add_row width mismatch");
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (x, &b) in v.row_mut(r).iter_mut().zip(rv.data()) {
                *x = *x + b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    /// Multiplies row `i` of `a` by `s[i]`; `s` is `n x 1`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        let (av, sv) = (self.value(a), self.value(s));
        assert_eq!(sv.shape(), (av.rows(), 1), "scale_rows expects n x 1 scales");
        let mut v = av.clone();
        for r in 0..v.rows() {
            let f = sv.data()[r];
            for x in v.row_mut(r) {
                *x = *x * f;
            }
        }
        let ng = self.needs(a) || self.needs(s);
        self.push(v, Op::ScaleRows(a, s), ng)
    }

    /// Divides row `i` of `a` by `s[i]`; `s` is `n x 1`.
    pub fn div_rows(&mut self, a: Var, s: Var) -> Var {
        let (av, sv) = (self.value(a), self.value(s));
        assert_eq!(sv.shape(), (av.rows(), 1), "div_rows expects n x 1 divisors");
        let mut v = av.clone();
        for r in 0..v.rows() {
            let f = sv.data()[r];
            for x in v.row_mut(r) {
                *x = *x / f;
            }
        }
        let ng = self.needs(a) || self.needs(s);
        self.push(v, Op::DivRows(a, s), ng)
    }

    /// `a * mul + add` elementwise with constant coefficients.
    pub fn affine(&mut self, a: Var, mul: T, add: T) -> Var {
        let v = self.value(a).map(|x| x * mul + add);
        let ng = self.needs(a);
        self.push(v, Op::Affine(a, mul), ng)
    }

    pub fn scale(&mut self, a: Var, mul: T) -> Var {
        self.affine(a, mul, T::zero())
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -T::one(), T::zero())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu_forward);
        let ng = self.needs(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        let ng = self.needs(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        let ng = self.needs(a);
        self.push(v, Op::Ln(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let ng = self.needs(a);
        self.push(v, Op::Square(a), ng)
    }

    pub fn powf(&mut self, a: Var, p: T) -> Var {
        let v = self.value(a).map(|x| x.powf(p));
        let ng = self.needs(a);
        self.push(v, Op::Powf(a, p), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.sqrt());
        let ng = self.needs(a);
        self.push(v, Op::Sqrt(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert!(!t.is_empty(), "mean of empty tensor");
        let v = Tensor::scalar(t.sum() / T::of(t.len() as f64));
        let ng = self.needs(a);
        self.push(v, Op::Mean(a), ng)
    }

    /// Row sums: `n x m -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::column((0..t.rows()).map(|r| t.row(r).iter().copied().sum()).collect());
        let ng = self.needs(a);
        self.push(v, Op::SumCols(a), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r));
        }
        let ng = self.needs(a);
        self.push(v, Op::Softmax(a), ng)
    }

    /// Row-wise softmax where row `i` may only attend to columns `<= i + offset`.
    pub fn causal_softmax(&mut self, a: Var, offset: usize) -> Var {
        let mut v = self.value(a).clone();
        let cols = v.cols();
        for r in 0..v.rows() {
            let limit = (r + offset + 1).min(cols);
            let row = v.row_mut(r);
            softmax_in_place(&mut row[..limit]);
            for x in &mut row[limit..] {
                *x = T::zero();
            }
        }
        let ng = self.needs(a);
        self.push(v, Op::Softmax(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let (n, d) = xv.shape();
        assert_eq!(gv.shape(), (1, d), "layer_norm gamma shape");
        assert_eq!(bv.shape(), (1, d), "layer_norm beta shape");
        let dt = T::of(d as f64);
        let mut xhat = Tensor::zeros(n, d);
        let mut out = Tensor::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                out.set(r, c, h * gv.data()[c] + bv.data()[c]);
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Row lookup: output row `r` is `table[ids[r]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let d = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < tv.rows(), "gather index {i} out of range {}", tv.rows());
            data.extend_from_slice(tv.row(i));
        }
        let v = Tensor::from_vec(ids.len(), d, data);
        let ng = self.needs(table);
        self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        let ng = self.needs(a);
        self.push(v, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_cols(start, len);
        let ng = self.needs(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows width mismatch");
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
            }
            off += t.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Mean token cross-entropy of `logits (n x V)` against `targets`;
    /// `None` targets (padding) are excluded from the mean.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "cross_entropy length mismatch");
        let mut probs = lv.clone();
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let row = probs.row_mut(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z = z + *x;
            }
            for x in row.iter_mut() {
                *x = *x / z;
            }
            if let Some(t) = *t {
                assert!(t < row.len(), "target id out of vocabulary");
                // log p = logit - max - ln z
                total = total - (lv.get(r, t) - max - z.ln());
                count += 1;
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::of(count as f64)
        };
        let ng = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            ng,
        )
    }

    /// Pairwise squared Euclidean distances: `a (n x d)`, `b (m x d)` -> `n x m`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "sq_dist width mismatch");
        let mut out = Tensor::zeros(av.rows(), bv.rows());
        for i in 0..av.rows() {
            for j in 0..bv.rows() {
                let d: T = av
                    .row(i)
                    .iter()
                    .zip(bv.row(j))
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum();
                out.set(i, j, d);
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::SqDist(a, b), ng)
    }

    /// Backpropagates from the scalar `out`.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        assert_eq!(self.value(out).shape(), (1, 1), "backward from non-scalar");
        let np = self.params.len();
        let total = np + self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..total).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(T::one()));

        for k in (0..self.nodes.len()).rev() {
            let id = np + k;
            let node = &self.nodes[k];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Gradients {
            grads,
            n_params: np,
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*row) {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, &x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *acc = *acc + x;
                        }
                    }
                    self.accumulate(grads, *row, gb);
                }
            }
            Op::ScaleRows(a, s) => {
                let (av, sv) = (self.value(*a), self.value(*s));
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let f = sv.data()[r];
                        for x in ga.row_mut(r) {
                            *x = *x * f;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*s) {
                    let gs = (0..g.rows()).map(|r| dot(g.row(r), av.row(r))).collect();
                    self.accumulate(grads, *s, Tensor::column(gs));
                }
            }
            Op::DivRows(a, s) => {
                let (av, sv) = (self.value(*a), self.value(*s));
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let f = sv.data()[r];
                        for x in ga.row_mut(r) {
                            *x = *x / f;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*s) {
                    let gs = (0..g.rows())
                        .map(|r| {
                            let f = sv.data()[r];
                            -dot(g.row(r), av.row(r)) / (f * f)
                        })
                        .collect();
                    self.accumulate(grads, *s, Tensor::column(gs));
                }
            }
            Op::Affine(a, mul) => {
                let m = *mul;
                self.accumulate(grads, *a, g.map(|x| x * m));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(av, |gx, x| if x > T::zero() { gx } else { T::zero() }),
                );
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(av, |gx, x| gx * gelu_derivative(x)));
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, g.zip_map(y, |gx, s| gx * s * (T::one() - s)));
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, g.zip_map(y, |gx, e| gx * e));
            }
            Op::Ln(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(av, |gx, x| gx / x));
            }
            Op::Square(a) => {
                let av = self.value(*a);
                let two = T::of(2.0);
                self.accumulate(grads, *a, g.zip_map(av, |gx, x| gx * two * x));
            }
            Op::Powf(a, p) => {
                let av = self.value(*a);
                let p = *p;
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(av, |gx, x| gx * p * x.powf(p - T::one())),
                );
            }
            Op::Sqrt(a) => {
                let half = T::of(0.5);
                self.accumulate(grads, *a, g.zip_map(y, |gx, s| gx * half / s));
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                let n = T::of((r * c) as f64);
                self.accumulate(grads, *a, Tensor::filled(r, c, g.item() / n));
            }
            Op::SumCols(a) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    let gi = g.data()[i];
                    for x in ga.row_mut(i) {
                        *x = gi;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let mut ga = g.clone();
                for r in 0..ga.rows() {
                    let yr = y.row(r);
                    let inner = dot(g.row(r), yr);
                    for (o, &s) in ga.row_mut(r).iter_mut().zip(yr) {
                        *o = s * (*o - inner);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma);
                let (n, d) = xhat.shape();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut gg = Tensor::zeros(1, d);
                    let mut gb = Tensor::zeros(1, d);
                    for r in 0..n {
                        for c in 0..d {
                            let gy = g.get(r, c);
                            gg.data_mut()[c] = gg.data()[c] + gy * xhat.get(r, c);
                            gb.data_mut()[c] = gb.data()[c] + gy;
                        }
                    }
                    self.accumulate(grads, *gamma, gg);
                    self.accumulate(grads, *beta, gb);
                }
                if self.needs(*x) {
                    let dt = T::of(d as f64);
                    let mut gx = Tensor::zeros(n, d);
                    for r in 0..n {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for c in 0..d {
                            let dh = g.get(r, c) * gv.data()[c];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * xhat.get(r, c);
                        }
                        mean_dh = mean_dh / dt;
                        mean_dh_h = mean_dh_h / dt;
                        for c in 0..d {
                            let dh = g.get(r, c) * gv.data()[c];
                            gx.set(
                                r,
                                c,
                                rstd[r] * (dh - mean_dh - xhat.get(r, c) * mean_dh_h),
                            );
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Gather { table, ids } => {
                if self.needs(*table) {
                    let tv = self.value(*table);
                    let mut gt = Tensor::zeros(tv.rows(), tv.cols());
                    for (r, &i) in ids.iter().enumerate() {
                        for (acc, &x) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *acc = *acc + x;
                        }
                    }
                    self.accumulate(grads, *table, gt);
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..g.rows() {
                    ga.row_mut(start + i).copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) {
                        self.accumulate(grads, p, g.slice_rows(off, rows));
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.needs(p) {
                        self.accumulate(grads, p, g.slice_cols(off, cols));
                    }
                    off += cols;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let scale = g.item() / T::of(*count as f64);
                let mut gl = probs.clone();
                for (r, t) in targets.iter().enumerate() {
                    match t {
                        Some(t) => {
                            for x in gl.row_mut(r) {
                                *x = *x * scale;
                            }
                            let cur = gl.get(r, *t);
                            gl.set(r, *t, cur - scale);
                        }
                        None => {
                            for x in gl.row_mut(r) {
                                *x = T::zero();
                            }
                        }
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
            Op::SqDist(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let two = T::of(2.0);
                let d = av.cols();
                let mut ga = Tensor::zeros(av.rows(), d);
                let mut gb = Tensor::zeros(bv.rows(), d);
                for i in 0..av.rows() {
                    for j in 0..bv.rows() {
                        let gij = g.get(i, j) * two;
                        for c in 0..d {
                            let diff = av.get(i, c) - bv.get(j, c);
                            ga.set(i, c, ga.get(i, c) + gij * diff);
                            gb.set(j, c, gb.get(j, c) - gij * diff);
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z = z + *x;
    }
    for x in row.iter_mut() {
        *x = *x / z;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

fn gelu_forward<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * k * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}
