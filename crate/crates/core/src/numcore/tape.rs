//! Reverse-mode differentiation over the small, fixed set of operations used
//! by the sequence model. Every value on the tape is a 2-D tensor; scalars are
//! `1 × 1`.

use super::ctc::ctc_nll;
use super::tensor::{log_sum_exp, Tensor};
use crate::error::Result;
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// matrix plus a broadcast `1 × n` row
    AddRow(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    /// `out[r] = in[r - k]`, zero outside the range
    Shift(Var, isize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    LogSoftmax(Var),
    Softmax(Var),
    Gather(Var, Vec<usize>),
    ConcatRows(Var, Var),
    /// `Σ w ⊙ x` with constant `w`
    WeightedSum(Var, Tensor<T>),
    /// CTC negative log-likelihood; stores d(loss)/d(log_probs)
    Ctc(Var, Tensor<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one root with respect to every tape value.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let value = if value.shape().len() == 2 {
            value
        } else {
            let (r, c) = (value.rows(), value.cols());
            Tensor::matrix(r, c, value.into_data()).expect("reshape keeps length")
        };
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shapes");
        let mut out = x.clone();
        out.add_scaled(T::one(), y);
        self.push(out, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.len(), x.cols(), "broadcast row width");
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o = *o + b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn shift(&mut self, a: Var, k: isize) -> Var {
        let x = self.value(a);
        let (rows, cols) = (x.rows(), x.cols());
        let mut out = Tensor::zeros(vec![rows, cols]);
        for r in 0..rows {
            let src = r as isize - k;
            if src >= 0 && (src as usize) < rows {
                out.row_mut(r).copy_from_slice(x.row(src as usize));
            }
        }
        self.push(out, Op::Shift(a, k))
    }

    /// Row-wise layer normalization followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let n = T::count(cols);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = Tensor::zeros(vec![rows, cols]);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for (h, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let (g, b) = (self.value(gain), self.value(bias));
        assert_eq!(g.len(), cols, "layer-norm gain width");
        assert_eq!(b.len(), cols, "layer-norm bias width");
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, &gv), &bv) in out.row_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gv + bv;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows() {
            let lse = log_sum_exp(x.row(r));
            for o in out.row_mut(r) {
                *o = *o - lse;
            }
        }
        self.push(out, Op::LogSoftmax(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows() {
            let max = x.row(r).iter().copied().fold(T::neg_infinity(), T::max);
            let row = out.row_mut(r);
            for o in row.iter_mut() {
                *o = (*o - max).exp();
            }
            let total: T = row.iter().copied().sum();
            for o in row.iter_mut() {
                *o = *o / total;
            }
        }
        self.push(out, Op::Softmax(a))
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Var {
        let t = self.value(table);
        let cols = t.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::matrix(rows.len(), cols, data).expect("gather shape");
        self.push(out, Op::Gather(table, rows.to_vec()))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols(), y.cols(), "concat widths");
        let mut data = x.data().to_vec();
        data.extend_from_slice(y.data());
        let out = Tensor::matrix(x.rows() + y.rows(), x.cols(), data).expect("concat shape");
        self.push(out, Op::ConcatRows(a, b))
    }

    pub fn weighted_sum(&mut self, a: Var, weights: Tensor<T>) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), weights.len(), "weighted sum size");
        let s = x
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |acc, (&v, &w)| acc + v * w);
        self.push(Tensor::scalar(s), Op::WeightedSum(a, weights))
    }

    /// CTC negative log-likelihood of `targets` under the log-probabilities `lp`.
    pub fn ctc(&mut self, lp: Var, targets: &[usize], blank: usize) -> Result<Var> {
        let (loss, grad) = ctc_nll(self.value(lp), targets, blank)?;
        Ok(self.push(Tensor::scalar(loss), Op::Ctc(lp, grad)))
    }

    /// Back-propagates from a `1 × 1` root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor::zeros(self.value(*row).shape().to_vec());
                    for r in 0..g.rows() {
                        for (o, &v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o = *o + v;
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *row, gr);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, g.map(|v| v * s));
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    for (o, &y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                        *o = *o * (T::one() - y * y);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Shift(a, k) => {
                    let rows = g.rows();
                    let mut ga = Tensor::zeros(g.shape().to_vec());
                    for r in 0..rows {
                        let src = r as isize - k;
                        if src >= 0 && (src as usize) < rows {
                            ga.row_mut(src as usize).copy_from_slice(g.row(r));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let cols = g.cols();
                    let n = T::count(cols);
                    let mut gx = Tensor::zeros(g.shape().to_vec());
                    let mut ggain = Tensor::zeros(gv.shape().to_vec());
                    let mut gbias = Tensor::zeros(gv.shape().to_vec());
                    for r in 0..g.rows() {
                        let (grow, hrow) = (g.row(r), xhat.row(r));
                        let mut dh = vec![T::zero(); cols];
                        for c in 0..cols {
                            dh[c] = grow[c] * gv.data()[c];
                            ggain.data_mut()[c] = ggain.data()[c] + grow[c] * hrow[c];
                            gbias.data_mut()[c] = gbias.data()[c] + grow[c];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() / n;
                        let mean_dh_h =
                            dh.iter().zip(hrow).map(|(&d, &h)| d * h).sum::<T>() / n;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (dh[c] - mean_dh - hrow[c] * mean_dh_h);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, ggain);
                    accumulate(&mut grads, *bias, gbias);
                }
                Op::LogSoftmax(a) => {
                    let mut ga = g.clone();
                    for r in 0..g.rows() {
                        let total: T = g.row(r).iter().copied().sum();
                        for (o, &y) in ga.row_mut(r).iter_mut().zip(node.value.row(r)) {
                            *o = *o - y.exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let mut ga = g.clone();
                    for r in 0..g.rows() {
                        let y = node.value.row(r);
                        let dotp = g.row(r).iter().zip(y).fold(T::zero(), |s, (&u, &v)| s + u * v);
                        for (o, &yv) in ga.row_mut(r).iter_mut().zip(y) {
                            *o = yv * (*o - dotp);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather(table, rows) => {
                    let mut gt = Tensor::zeros(self.value(*table).shape().to_vec());
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, &v) in gt.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o = *o + v;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::ConcatRows(a, b) => {
                    let split = self.value(*a).len();
                    let cols = g.cols();
                    let data = g.into_data();
                    let ga = Tensor::matrix(split / cols, cols, data[..split].to_vec())
                        .expect("concat split");
                    let gb = Tensor::matrix((data.len() - split) / cols, cols, data[split..].to_vec())
                        .expect("concat split");
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::WeightedSum(a, w) => {
                    let s = g.item();
                    accumulate(&mut grads, *a, w.map(|v| v * s));
                }
                Op::Ctc(a, dlp) => {
                    let s = g.item();
                    accumulate(&mut grads, *a, dlp.map(|v| v * s));
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_scaled(T::one(), &g),
        slot @ None => *slot = Some(g),
    }
}
