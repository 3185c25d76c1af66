//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] records every operation eagerly: each method computes the
//! forward value immediately and appends a node. [`Graph::backward`] walks the
//! tape in reverse and accumulates exact gradients for every node that
//! requires them. Node ids are indices, so the tape order is already a
//! topological order and all reductions run in a fixed sequential order,
//! making runs bit-reproducible.
//!
//! The op set is exactly what the scene-flow pipeline needs: linear maps,
//! matrix products, row softmax, per-channel softmax/max/sum over fixed-size
//! neighbor groups, gather/concat plumbing, layer/batch norm, and the
//! pointwise pieces of the robust loss.

use crate::matrix::{matmul, matmul_nt, matmul_tn, Matrix, Scalar};
use std::rc::Rc;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `y = x * w^T + b` with `x: n x in`, `w: out x in`, `b: 1 x out`.
    Linear { x: VarId, w: VarId, b: VarId },
    Matmul { a: VarId, b: VarId },
    /// `c = a * b^T`.
    MatmulNt { a: VarId, b: VarId },
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    /// `y = x + row` broadcasting a `1 x c` row over all rows of `x`.
    AddRow { x: VarId, row: VarId },
    MulRow { x: VarId, row: VarId },
    Scale { x: VarId, c: f64 },
    AddScalar { x: VarId, c: f64 },
    Relu { x: VarId },
    Abs { x: VarId },
    /// `y = x^p` element-wise; requires `x > 0` wherever gradients are taken.
    Powf { x: VarId, p: f64 },
    SoftmaxRows { x: VarId },
    /// Softmax over blocks of `group` consecutive rows, independently per column.
    GroupSoftmax { x: VarId, group: usize },
    /// Channel-wise max over blocks of `group` consecutive rows.
    GroupMax { x: VarId, group: usize },
    GroupSum { x: VarId, group: usize },
    GatherRows { x: VarId, idx: Rc<Vec<usize>> },
    ConcatCols { a: VarId, b: VarId },
    /// `n x c -> n x 1` row sums.
    RowSum { x: VarId },
    /// Full reduction to `1 x 1`.
    SumAll { x: VarId },
    LayerNorm { x: VarId, gamma: VarId, beta: VarId, eps: f64 },
    BatchNorm { x: VarId, gamma: VarId, beta: VarId, eps: f64 },
}

#[derive(Debug, Clone)]
enum Aux<S> {
    None,
    /// GroupMax: source row index per (block, column), flattened.
    Argmax(Vec<usize>),
    /// LayerNorm: per-row inverse std plus the normalized values.
    RowNorm { inv: Vec<S>, xhat: Matrix<S> },
    /// BatchNorm: per-column batch statistics plus the normalized values.
    ColNorm {
        mean: Vec<S>,
        var: Vec<S>,
        inv: Vec<S>,
        xhat: Matrix<S>,
    },
}

struct Node<S> {
    op: Op,
    value: Matrix<S>,
    requires_grad: bool,
    aux: Aux<S>,
}

/// Gradients of one backward pass, indexed by [`VarId`].
pub struct Gradients<S> {
    grads: Vec<Option<Matrix<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: VarId) -> Option<&Matrix<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: VarId) -> Option<Matrix<S>> {
        self.grads[v.0].take()
    }
}

/// The tape. One forward pass per graph; build, call `backward`, drop.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: VarId) -> &Matrix<S> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: VarId) -> S {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m.get(0, 0)
    }

    fn push(&mut self, op: Op, value: Matrix<S>, requires_grad: bool, aux: Aux<S>) -> VarId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            aux,
        });
        VarId(self.nodes.len() - 1)
    }

    fn rg(&self, v: VarId) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient (inputs, frozen buffers).
    pub fn constant(&mut self, value: Matrix<S>) -> VarId {
        self.push(Op::Leaf, value, false, Aux::None)
    }

    /// Differentiable leaf (parameters, or inputs being gradient-checked).
    pub fn var(&mut self, value: Matrix<S>) -> VarId {
        self.push(Op::Leaf, value, true, Aux::None)
    }

    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> VarId {
        let (n, cin) = self.value(x).shape();
        let (cout, win) = self.value(w).shape();
        assert_eq!(cin, win, "linear: input width {cin} vs weight fan-in {win}");
        assert_eq!(self.value(b).shape(), (1, cout), "linear: bias shape");
        let mut out = matmul_nt(self.value(x), self.value(w));
        for r in 0..n {
            let bias = self.nodes[b.0].value.row(0).to_vec();
            for (o, bv) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += *bv;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Op::Linear { x, w, b }, out, rg, Aux::None)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let out = matmul(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Matmul { a, b }, out, rg, Aux::None)
    }

    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> VarId {
        let out = matmul_nt(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatmulNt { a, b }, out, rg, Aux::None)
    }

    fn zip_elementwise(&mut self, a: VarId, b: VarId, f: impl Fn(S, S) -> S, op: Op) -> VarId {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "elementwise shape mismatch"
        );
        let out = Matrix::from_vec(
            self.value(a).rows(),
            self.value(a).cols(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(op, out, rg, Aux::None)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        self.zip_elementwise(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        self.zip_elementwise(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        self.zip_elementwise(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn add_row(&mut self, x: VarId, row: VarId) -> VarId {
        let (n, c) = self.value(x).shape();
        assert_eq!(self.value(row).shape(), (1, c), "add_row width mismatch");
        let mut out = self.value(x).clone();
        for r in 0..n {
            for (o, v) in out.row_mut(r).iter_mut().zip(self.nodes[row.0].value.row(0)) {
                *o += *v;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(Op::AddRow { x, row }, out, rg, Aux::None)
    }

    pub fn mul_row(&mut self, x: VarId, row: VarId) -> VarId {
        let (n, c) = self.value(x).shape();
        assert_eq!(self.value(row).shape(), (1, c), "mul_row width mismatch");
        let mut out = self.value(x).clone();
        for r in 0..n {
            for (o, v) in out.row_mut(r).iter_mut().zip(self.nodes[row.0].value.row(0)) {
                *o = *o * *v;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(Op::MulRow { x, row }, out, rg, Aux::None)
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        let k = S::from_f64(c);
        let out = self.value(x).map(|v| v * k);
        let rg = self.rg(x);
        self.push(Op::Scale { x, c }, out, rg, Aux::None)
    }

    pub fn add_scalar(&mut self, x: VarId, c: f64) -> VarId {
        let k = S::from_f64(c);
        let out = self.value(x).map(|v| v + k);
        let rg = self.rg(x);
        self.push(Op::AddScalar { x, c }, out, rg, Aux::None)
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let out = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        let rg = self.rg(x);
        self.push(Op::Relu { x }, out, rg, Aux::None)
    }

    pub fn abs(&mut self, x: VarId) -> VarId {
        let out = self.value(x).map(|v| v.abs());
        let rg = self.rg(x);
        self.push(Op::Abs { x }, out, rg, Aux::None)
    }

    pub fn powf(&mut self, x: VarId, p: f64) -> VarId {
        let pe = S::from_f64(p);
        let out = self.value(x).map(|v| v.powf(pe));
        let rg = self.rg(x);
        self.push(Op::Powf { x, p }, out, rg, Aux::None)
    }

    /// Row softmax, stabilized by subtracting each row's max before exponentiation.
    pub fn softmax_rows(&mut self, x: VarId) -> VarId {
        let (n, c) = self.value(x).shape();
        assert!(c > 0, "softmax over empty rows");
        let mut out = Matrix::zeros(n, c);
        for r in 0..n {
            softmax_slice(self.nodes[x.0].value.row(r), out.row_mut(r));
        }
        let rg = self.rg(x);
        self.push(Op::SoftmaxRows { x }, out, rg, Aux::None)
    }

    /// Per-column softmax over consecutive row blocks of size `group`.
    pub fn group_softmax(&mut self, x: VarId, group: usize) -> VarId {
        let (n, c) = self.value(x).shape();
        assert!(group > 0 && n % group == 0, "group_softmax block mismatch");
        let blocks = n / group;
        let mut out = Matrix::zeros(n, c);
        for b in 0..blocks {
            for col in 0..c {
                let mut max = S::neg_infinity();
                for r in 0..group {
                    max = max.max(self.nodes[x.0].value.get(b * group + r, col));
                }
                let mut sum = S::zero();
                for r in 0..group {
                    let e = (self.nodes[x.0].value.get(b * group + r, col) - max).exp();
                    out.set(b * group + r, col, e);
                    sum += e;
                }
                for r in 0..group {
                    let v = out.get(b * group + r, col) / sum;
                    out.set(b * group + r, col, v);
                }
            }
        }
        let rg = self.rg(x);
        self.push(Op::GroupSoftmax { x, group }, out, rg, Aux::None)
    }

    /// Channel-wise max over consecutive row blocks of size `group`.
    /// Ties resolve to the earliest row, which also fixes the subgradient.
    pub fn group_max(&mut self, x: VarId, group: usize) -> VarId {
        let (n, c) = self.value(x).shape();
        assert!(group > 0 && n % group == 0, "group_max block mismatch");
        let blocks = n / group;
        let mut out = Matrix::zeros(blocks, c);
        let mut argmax = vec![0usize; blocks * c];
        for b in 0..blocks {
            for col in 0..c {
                let mut best = self.nodes[x.0].value.get(b * group, col);
                let mut best_row = b * group;
                for r in 1..group {
                    let v = self.nodes[x.0].value.get(b * group + r, col);
                    if v > best {
                        best = v;
                        best_row = b * group + r;
                    }
                }
                out.set(b, col, best);
                argmax[b * c + col] = best_row;
            }
        }
        let rg = self.rg(x);
        self.push(Op::GroupMax { x, group }, out, rg, Aux::Argmax(argmax))
    }

    pub fn group_sum(&mut self, x: VarId, group: usize) -> VarId {
        let (n, c) = self.value(x).shape();
        assert!(group > 0 && n % group == 0, "group_sum block mismatch");
        let blocks = n / group;
        let mut out = Matrix::zeros(blocks, c);
        for b in 0..blocks {
            for r in 0..group {
                let row = self.nodes[x.0].value.row(b * group + r).to_vec();
                for (o, v) in out.row_mut(b).iter_mut().zip(&row) {
                    *o += *v;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Op::GroupSum { x, group }, out, rg, Aux::None)
    }

    pub fn gather_rows(&mut self, x: VarId, idx: Vec<usize>) -> VarId {
        let rows = self.value(x).rows();
        assert!(idx.iter().all(|&i| i < rows), "gather_rows index out of range");
        let out = self.value(x).select_rows(&idx);
        let rg = self.rg(x);
        self.push(
            Op::GatherRows {
                x,
                idx: Rc::new(idx),
            },
            out,
            rg,
            Aux::None,
        )
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> VarId {
        let (n, ca) = self.value(a).shape();
        let (nb, cb) = self.value(b).shape();
        assert_eq!(n, nb, "concat_cols row mismatch");
        let mut out = Matrix::zeros(n, ca + cb);
        for r in 0..n {
            out.row_mut(r)[..ca].copy_from_slice(self.nodes[a.0].value.row(r));
            out.row_mut(r)[ca..].copy_from_slice(self.nodes[b.0].value.row(r));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::ConcatCols { a, b }, out, rg, Aux::None)
    }

    pub fn row_sum(&mut self, x: VarId) -> VarId {
        let (n, _) = self.value(x).shape();
        let mut out = Matrix::zeros(n, 1);
        for r in 0..n {
            out.set(r, 0, self.nodes[x.0].value.row(r).iter().copied().sum());
        }
        let rg = self.rg(x);
        self.push(Op::RowSum { x }, out, rg, Aux::None)
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let total: S = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(
            Op::SumAll { x },
            Matrix::from_vec(1, 1, vec![total]),
            rg,
            Aux::None,
        )
    }

    /// Per-row normalization: `y = gamma * (x - mean) / sqrt(var + eps) + beta`
    /// with mean/var over columns (biased variance).
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> VarId {
        let (n, c) = self.value(x).shape();
        assert_eq!(self.value(gamma).shape(), (1, c), "layer_norm gamma shape");
        assert_eq!(self.value(beta).shape(), (1, c), "layer_norm beta shape");
        let epss = S::from_f64(eps);
        let cn = S::from_f64(c as f64);
        let mut xhat = Matrix::zeros(n, c);
        let mut inv = vec![S::zero(); n];
        let mut out = Matrix::zeros(n, c);
        for r in 0..n {
            let row = self.nodes[x.0].value.row(r);
            let mean: S = row.iter().copied().sum::<S>() / cn;
            let var: S = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / cn;
            let istd = (var + epss).sqrt().recip();
            inv[r] = istd;
            for col in 0..c {
                let xh = (row[col] - mean) * istd;
                xhat.set(r, col, xh);
                let g = self.nodes[gamma.0].value.get(0, col);
                let bt = self.nodes[beta.0].value.get(0, col);
                out.set(r, col, g * xh + bt);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Op::LayerNorm { x, gamma, beta, eps },
            out,
            rg,
            Aux::RowNorm { inv, xhat },
        )
    }

    /// Training-mode batch normalization over rows, per column (biased variance).
    /// The computed batch statistics stay on the node; fetch them with
    /// [`Graph::bn_batch_stats`] to update running averages.
    pub fn batch_norm_train(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> VarId {
        let (n, c) = self.value(x).shape();
        assert!(n > 0, "batch_norm over empty batch");
        assert_eq!(self.value(gamma).shape(), (1, c), "batch_norm gamma shape");
        assert_eq!(self.value(beta).shape(), (1, c), "batch_norm beta shape");
        let epss = S::from_f64(eps);
        let nn = S::from_f64(n as f64);
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for r in 0..n {
            for (m, &v) in mean.iter_mut().zip(self.nodes[x.0].value.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m = *m / nn;
        }
        for r in 0..n {
            for col in 0..c {
                let d = self.nodes[x.0].value.get(r, col) - mean[col];
                var[col] += d * d;
            }
        }
        for v in &mut var {
            *v = *v / nn;
        }
        let inv: Vec<S> = var.iter().map(|&v| (v + epss).sqrt().recip()).collect();
        let mut xhat = Matrix::zeros(n, c);
        let mut out = Matrix::zeros(n, c);
        for r in 0..n {
            for col in 0..c {
                let xh = (self.nodes[x.0].value.get(r, col) - mean[col]) * inv[col];
                xhat.set(r, col, xh);
                let g = self.nodes[gamma.0].value.get(0, col);
                let bt = self.nodes[beta.0].value.get(0, col);
                out.set(r, col, g * xh + bt);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Op::BatchNorm { x, gamma, beta, eps },
            out,
            rg,
            Aux::ColNorm { mean, var, inv, xhat },
        )
    }

    /// Inference-mode batch normalization against fixed running statistics,
    /// expressed through ordinary ops so gradients still reach gamma/beta.
    pub fn batch_norm_eval(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running_mean: VarId,
        running_var: VarId,
        eps: f64,
    ) -> VarId {
        let var_eps = self.add_scalar(running_var, eps);
        let inv_std = self.powf(var_eps, -0.5);
        let scale = self.mul(gamma, inv_std);
        let mean_scaled = self.mul(scale, running_mean);
        let shift = self.sub(beta, mean_scaled);
        let scaled = self.mul_row(x, scale);
        self.add_row(scaled, shift)
    }

    /// Batch statistics (mean, biased variance) of a `batch_norm_train` node.
    pub fn bn_batch_stats(&self, v: VarId) -> Option<(Matrix<S>, Matrix<S>)> {
        match &self.nodes[v.0].aux {
            Aux::ColNorm { mean, var, .. } => Some((
                Matrix::from_vec(1, mean.len(), mean.clone()),
                Matrix::from_vec(1, var.len(), var.clone()),
            )),
            _ => None,
        }
    }

    fn add_grad(&self, grads: &mut [Option<Matrix<S>>], v: VarId, delta: Matrix<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.acc(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse pass from a scalar node. Returns gradients for every node
    /// reachable from `loss` that requires gradients.
    pub fn backward(&self, loss: VarId) -> Gradients<S> {
        assert_eq!(
            self.nodes[loss.0].value.shape(),
            (1, 1),
            "backward target must be 1x1"
        );
        let mut grads: Vec<Option<Matrix<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![S::one()]));

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gout);
                    continue;
                }
                Op::Linear { x, w, b } => {
                    if self.rg(*x) {
                        self.add_grad(&mut grads, *x, matmul(&gout, self.value(*w)));
                    }
                    if self.rg(*w) {
                        self.add_grad(&mut grads, *w, matmul_tn(&gout, self.value(*x)));
                    }
                    if self.rg(*b) {
                        self.add_grad(&mut grads, *b, col_sums(&gout));
                    }
                }
                Op::Matmul { a, b } => {
                    if self.rg(*a) {
                        self.add_grad(&mut grads, *a, matmul_nt(&gout, self.value(*b)));
                    }
                    if self.rg(*b) {
                        self.add_grad(&mut grads, *b, matmul_tn(self.value(*a), &gout));
                    }
                }
                Op::MatmulNt { a, b } => {
                    if self.rg(*a) {
                        self.add_grad(&mut grads, *a, matmul(&gout, self.value(*b)));
                    }
                    if self.rg(*b) {
                        self.add_grad(&mut grads, *b, matmul_tn(&gout, self.value(*a)));
                    }
                }
                Op::Add { a, b } => {
                    self.add_grad(&mut grads, *a, gout.clone());
                    self.add_grad(&mut grads, *b, gout);
                }
                Op::Sub { a, b } => {
                    self.add_grad(&mut grads, *a, gout.clone());
                    self.add_grad(&mut grads, *b, gout.map(|v| -v));
                }
                Op::Mul { a, b } => {
                    if self.rg(*a) {
                        let mut d = gout.clone();
                        for (g, v) in d.data_mut().iter_mut().zip(self.value(*b).data()) {
                            *g = *g * *v;
                        }
                        self.add_grad(&mut grads, *a, d);
                    }
                    if self.rg(*b) {
                        let mut d = gout;
                        for (g, v) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                            *g = *g * *v;
                        }
                        self.add_grad(&mut grads, *b, d);
                    }
                }
                Op::AddRow { x, row } => {
                    if self.rg(*row) {
                        self.add_grad(&mut grads, *row, col_sums(&gout));
                    }
                    self.add_grad(&mut grads, *x, gout);
                }
                Op::MulRow { x, row } => {
                    if self.rg(*row) {
                        let mut prod = gout.clone();
                        for (g, v) in prod.data_mut().iter_mut().zip(self.value(*x).data()) {
                            *g = *g * *v;
                        }
                        self.add_grad(&mut grads, *row, col_sums(&prod));
                    }
                    if self.rg(*x) {
                        let (n, c) = gout.shape();
                        let mut d = gout;
                        for r in 0..n {
                            for (g, v) in d.row_mut(r).iter_mut().zip(self.value(*row).row(0)) {
                                *g = *g * *v;
                            }
                        }
                        let _ = (n, c);
                        self.add_grad(&mut grads, *x, d);
                    }
                }
                Op::Scale { x, c } => {
                    let k = S::from_f64(*c);
                    self.add_grad(&mut grads, *x, gout.map(|v| v * k));
                }
                Op::AddScalar { x, .. } => {
                    self.add_grad(&mut grads, *x, gout);
                }
                Op::Relu { x } => {
                    let mut d = gout;
                    for (g, v) in d.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if *v <= S::zero() {
                            *g = S::zero();
                        }
                    }
                    self.add_grad(&mut grads, *x, d);
                }
                Op::Abs { x } => {
                    let mut d = gout;
                    for (g, v) in d.data_mut().iter_mut().zip(self.value(*x).data()) {
                        *g = *g * sign(*v);
                    }
                    self.add_grad(&mut grads, *x, d);
                }
                Op::Powf { x, p } => {
                    let pe = S::from_f64(*p);
                    let mut d = gout;
                    for (g, v) in d.data_mut().iter_mut().zip(self.value(*x).data()) {
                        *g = *g * pe * v.powf(pe - S::one());
                    }
                    self.add_grad(&mut grads, *x, d);
                }
                Op::SoftmaxRows { x } => {
                    let s = &node.value;
                    let (n, c) = s.shape();
                    let mut d = Matrix::zeros(n, c);
                    for r in 0..n {
                        let mut dot = S::zero();
                        for col in 0..c {
                            dot += gout.get(r, col) * s.get(r, col);
                        }
                        for col in 0..c {
                            d.set(r, col, s.get(r, col) * (gout.get(r, col) - dot));
                        }
                    }
                    self.add_grad(&mut grads, *x, d);
                }
                Op::GroupSoftmax { x, group } => {
                    let s = &node.value;
                    let (n, c) = s.shape();
                    let blocks = n / group;
                    let mut d = Matrix::zeros(n, c);
                    for b in 0..blocks {
                        for col in 0..c {
                            let mut dot = S::zero();
                            for r in 0..*group {
                                dot += gout.get(b * group + r, col) * s.get(b * group + r, col);
                            }
                            for r in 0..*group {
                                let sv = s.get(b * group + r, col);
                                d.set(b * group + r, col, sv * (gout.get(b * group + r, col) - dot));
                            }
                        }
                    }
                    self.add_grad(&mut grads, *x, d);
                }
                Op::GroupMax { x, .. } => {
                    let Aux::Argmax(argmax) = &node.aux else { unreachable!() };
                    let (blocks, c) = node.value.shape();
                    let mut d = Matrix::zeros(self.value(*x).rows(), c);
                    for b in 0..blocks {
                        for col in 0..c {
                            let src = argmax[b * c + col];
                            let v = d.get(src, col) + gout.get(b, col);
                            d.set(src, col, v);
                        }
                    }
                    self.add_grad(&mut grads, *x, d);
                }
                Op::GroupSum { x, group } => {
                    let (blocks, c) = node.value.shape();
                    let mut d = Matrix::zeros(blocks * group, c);
                    for b in 0..blocks {
                        for r in 0..*group {
                            d.row_mut(b * group + r).copy_from_slice(gout.row(b));
                        }
                    }
                    self.add_grad(&mut grads, *x, d);
                }
                Op::GatherRows { x, idx } => {
                    let mut d = Matrix::zeros(self.value(*x).rows(), gout.cols());
                    for (r, &src) in idx.iter().enumerate() {
                        for col in 0..gout.cols() {
                            let v = d.get(src, col) + gout.get(r, col);
                            d.set(src, col, v);
                        }
                    }
                    self.add_grad(&mut grads, *x, d);
                }
                Op::ConcatCols { a, b } => {
                    let ca = self.value(*a).cols();
                    let (n, _) = gout.shape();
                    if self.rg(*a) {
                        let mut da = Matrix::zeros(n, ca);
                        for r in 0..n {
                            da.row_mut(r).copy_from_slice(&gout.row(r)[..ca]);
                        }
                        self.add_grad(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let cb = self.value(*b).cols();
                        let mut db = Matrix::zeros(n, cb);
                        for r in 0..n {
                            db.row_mut(r).copy_from_slice(&gout.row(r)[ca..]);
                        }
                        self.add_grad(&mut grads, *b, db);
                    }
                }
                Op::RowSum { x } => {
                    let (n, c) = self.value(*x).shape();
                    let mut d = Matrix::zeros(n, c);
                    for r in 0..n {
                        let g = gout.get(r, 0);
                        for col in 0..c {
                            d.set(r, col, g);
                        }
                    }
                    self.add_grad(&mut grads, *x, d);
                }
                Op::SumAll { x } => {
                    let g = gout.get(0, 0);
                    let (n, c) = self.value(*x).shape();
                    self.add_grad(&mut grads, *x, Matrix::from_fn(n, c, |_, _| g));
                }
                Op::LayerNorm { x, gamma, beta, .. } => {
                    let Aux::RowNorm { inv, xhat } = &node.aux else { unreachable!() };
                    let (n, c) = xhat.shape();
                    let cn = S::from_f64(c as f64);
                    if self.rg(*gamma) {
                        let mut dg = Matrix::zeros(1, c);
                        for r in 0..n {
                            for col in 0..c {
                                let v = dg.get(0, col) + gout.get(r, col) * xhat.get(r, col);
                                dg.set(0, col, v);
                            }
                        }
                        self.add_grad(&mut grads, *gamma, dg);
                    }
                    if self.rg(*beta) {
                        self.add_grad(&mut grads, *beta, col_sums(&gout));
                    }
                    if self.rg(*x) {
                        let gm = self.value(*gamma);
                        let mut d = Matrix::zeros(n, c);
                        for r in 0..n {
                            let mut sum_dxh = S::zero();
                            let mut sum_dxh_xh = S::zero();
                            for col in 0..c {
                                let dxh = gout.get(r, col) * gm.get(0, col);
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xhat.get(r, col);
                            }
                            let m1 = sum_dxh / cn;
                            let m2 = sum_dxh_xh / cn;
                            for col in 0..c {
                                let dxh = gout.get(r, col) * gm.get(0, col);
                                d.set(r, col, inv[r] * (dxh - m1 - xhat.get(r, col) * m2));
                            }
                        }
                        self.add_grad(&mut grads, *x, d);
                    }
                }
                Op::BatchNorm { x, gamma, beta, .. } => {
                    let Aux::ColNorm { inv, xhat, .. } = &node.aux else { unreachable!() };
                    let (n, c) = xhat.shape();
                    let nn = S::from_f64(n as f64);
                    if self.rg(*gamma) {
                        let mut dg = Matrix::zeros(1, c);
                        for r in 0..n {
                            for col in 0..c {
                                let v = dg.get(0, col) + gout.get(r, col) * xhat.get(r, col);
                                dg.set(0, col, v);
                            }
                        }
                        self.add_grad(&mut grads, *gamma, dg);
                    }
                    if self.rg(*beta) {
                        self.add_grad(&mut grads, *beta, col_sums(&gout));
                    }
                    if self.rg(*x) {
                        let gm = self.value(*gamma);
                        let mut sum_dxh = vec![S::zero(); c];
                        let mut sum_dxh_xh = vec![S::zero(); c];
                        for r in 0..n {
                            for col in 0..c {
                                let dxh = gout.get(r, col) * gm.get(0, col);
                                sum_dxh[col] += dxh;
                                sum_dxh_xh[col] += dxh * xhat.get(r, col);
                            }
                        }
                        let mut d = Matrix::zeros(n, c);
                        for r in 0..n {
                            for col in 0..c {
                                let dxh = gout.get(r, col) * gm.get(0, col);
                                let m1 = sum_dxh[col] / nn;
                                let m2 = sum_dxh_xh[col] / nn;
                                d.set(r, col, inv[col] * (dxh - m1 - xhat.get(r, col) * m2));
                            }
                        }
                        self.add_grad(&mut grads, *x, d);
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn sign<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

fn col_sums<S: Scalar>(m: &Matrix<S>) -> Matrix<S> {
    let (n, c) = m.shape();
    let mut out = Matrix::zeros(1, c);
    for r in 0..n {
        for (o, v) in out.row_mut(0).iter_mut().zip(m.row(r)) {
            *o += *v;
        }
    }
    out
}

/// Stable softmax of one slice into another.
pub fn softmax_slice<S: Scalar>(logits: &[S], out: &mut [S]) {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = (l - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn randn(rng: &mut Rng, n: usize, c: usize) -> Matrix<f64> {
        Matrix::from_fn(n, c, |_, _| rng.normal())
    }

    /// Central-difference gradient of `f` w.r.t. one leaf, for testing the tape.
    fn fd_grad(
        build: impl Fn(&Matrix<f64>) -> f64,
        at: &Matrix<f64>,
        h: f64,
    ) -> Matrix<f64> {
        let mut g = Matrix::zeros(at.rows(), at.cols());
        for i in 0..at.len() {
            let mut plus = at.clone();
            plus.data_mut()[i] += h;
            let mut minus = at.clone();
            minus.data_mut()[i] -= h;
            g.data_mut()[i] = (build(&plus) - build(&minus)) / (2.0 * h);
        }
        g
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        let mut g = Graph::new();
        let p = g.var(Matrix::row_vector(&[1.0, -2.0, 3.0]));
        let sq = g.mul(p, p);
        let sum = g.sum_all(sq);
        let half = g.scale(sum, 0.5);
        let grads = g.backward(half);
        assert_eq!(grads.get(p).unwrap(), g.value(p));
    }

    #[test]
    fn constant_loss_has_no_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let p = g.var(Matrix::row_vector(&[1.0, 2.0]));
        let c = g.constant(Matrix::from_vec(1, 1, vec![5.0]));
        let grads = g.backward(c);
        assert!(grads.get(p).is_none());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_fd() {
        let mut rng = Rng::new(9);
        let x = randn(&mut rng, 4, 5);
        let weights = randn(&mut rng, 4, 5);
        let f = |m: &Matrix<f64>| {
            let mut g = Graph::new();
            let xv = g.var(m.clone());
            let s = g.softmax_rows(xv);
            let w = g.constant(weights.clone());
            let prod = g.mul(s, w);
            let out = g.sum_all(prod);
            g.scalar(out)
        };
        let mut g = Graph::new();
        let xv = g.var(x.clone());
        let s = g.softmax_rows(xv);
        for r in 0..4 {
            let sum: f64 = g.value(s).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let w = g.constant(weights.clone());
        let prod = g.mul(s, w);
        let out = g.sum_all(prod);
        let grads = g.backward(out);
        let fd = fd_grad(f, &x, 1e-5);
        assert!(grads.get(xv).unwrap().max_abs_diff(&fd) < 1e-8);
    }

    #[test]
    fn group_ops_match_fd() {
        let mut rng = Rng::new(21);
        let x = randn(&mut rng, 6, 3); // two blocks of 3 rows
        let weights = randn(&mut rng, 2, 3);
        for op in ["softmax", "max", "sum"] {
            let weights_sm = randn(&mut rng, 6, 3);
            let run = |m: &Matrix<f64>| -> (f64, Graph<f64>, VarId) {
                let mut g = Graph::new();
                let xv = g.var(m.clone());
                let (out, w) = match op {
                    "softmax" => (g.group_softmax(xv, 3), g.constant(weights_sm.clone())),
                    "max" => (g.group_max(xv, 3), g.constant(weights.clone())),
                    _ => (g.group_sum(xv, 3), g.constant(weights.clone())),
                };
                let prod = g.mul(out, w);
                let s = g.sum_all(prod);
                (g.scalar(s), g, xv)
            };
            let (_, g, xv) = run(&x);
            let last = VarId(g.len() - 1);
            let grads = g.backward(last);
            let fd = fd_grad(|m| run(m).0, &x, 1e-5);
            assert!(
                grads.get(xv).unwrap().max_abs_diff(&fd) < 1e-7,
                "op {op} gradient mismatch"
            );
        }
    }

    #[test]
    fn linear_and_norms_match_fd() {
        let mut rng = Rng::new(33);
        let x = randn(&mut rng, 5, 4);
        let w = randn(&mut rng, 3, 4);
        let b = randn(&mut rng, 1, 3);
        let gm = randn(&mut rng, 1, 3).map(|v| 1.0 + 0.1 * v);
        let bt = randn(&mut rng, 1, 3);
        let mix = randn(&mut rng, 5, 3);

        let run = |wm: &Matrix<f64>, norm: &str| -> f64 {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.var(wm.clone());
            let bv = g.constant(b.clone());
            let gv = g.constant(gm.clone());
            let btv = g.constant(bt.clone());
            let y = g.linear(xv, wv, bv);
            let z = match norm {
                "layer" => g.layer_norm(y, gv, btv, 1e-5),
                _ => g.batch_norm_train(y, gv, btv, 1e-5),
            };
            let w2 = g.constant(mix.clone());
            let p = g.mul(z, w2);
            let s = g.sum_all(p);
            g.scalar(s)
        };
        for norm in ["layer", "batch"] {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.var(w.clone());
            let bv = g.constant(b.clone());
            let gv = g.constant(gm.clone());
            let btv = g.constant(bt.clone());
            let y = g.linear(xv, wv, bv);
            let z = match norm {
                "layer" => g.layer_norm(y, gv, btv, 1e-5),
                _ => g.batch_norm_train(y, gv, btv, 1e-5),
            };
            let w2 = g.constant(mix.clone());
            let p = g.mul(z, w2);
            let s = g.sum_all(p);
            let grads = g.backward(s);
            let fd = fd_grad(|m| run(m, norm), &w, 1e-5);
            let diff = grads.get(wv).unwrap().max_abs_diff(&fd);
            assert!(diff < 1e-7, "{norm} norm grad diff {diff}");
        }
    }

    #[test]
    fn shared_leaf_accumulates_gradient() {
        // y = sum(w * w applied through two separate paths); d/dw = 2w + 2w paths
        let mut g = Graph::new();
        let w = g.var(Matrix::row_vector(&[2.0, -1.0]));
        let a = g.mul(w, w);
        let b = g.mul(w, w);
        let t = g.add(a, b);
        let s = g.sum_all(t);
        let grads = g.backward(s);
        // d/dw (2 w^2) = 4w
        assert_eq!(
            grads.get(w).unwrap(),
            &Matrix::row_vector(&[8.0, -4.0])
        );
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let gamma = g.var(Matrix::row_vector(&[1.0, 1.0]));
        let beta = g.var(Matrix::row_vector(&[0.0, 0.0]));
        let rm = g.constant(Matrix::row_vector(&[2.0, 3.0]));
        let rv = g.constant(Matrix::row_vector(&[1.0, 1.0]));
        let y = g.batch_norm_eval(x, gamma, beta, rm, rv, 0.0);
        let v = g.value(y);
        assert!((v.get(0, 0) - -1.0).abs() < 1e-12);
        assert!((v.get(1, 0) - 1.0).abs() < 1e-12);
    }
}
