//! Minimal reverse-mode tape over [`Matrix`] values.
//!
//! Only the handful of operations the transformer and the flow network need
//! are supported. Leaves may borrow their value so parameters are never
//! copied onto the tape.

use std::borrow::Cow;

use crate::tensor::{dot, log_sum_exp, softmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Gather(Var, Vec<usize>),
    Rope { x: Var, positions: Vec<usize>, head_dim: usize, base: f64 },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    MaskedSoftmax(Var),
    Silu(Var),
    SliceCols(Var, usize),
    HStack(Vec<Var>),
    VStack(Vec<Var>),
    SumSquares(Var),
    CrossEntropy { logits: Var, targets: Vec<(usize, usize, f64)> },
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

pub struct Grads(Vec<Option<Matrix>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.0[v.0].take()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf borrowing its value.
    pub fn param(&mut self, value: &'a Matrix) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(value), op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_ref(&mut self, value: &'a Matrix) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(value), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Matrix {
        let node = self.nodes.swap_remove(v.0);
        node.value.into_owned()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(out, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Matrix::from_vec(va.rows(), va.cols(), data);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(va.rows(), va.cols(), data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Adds a `1 × n` bias to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let mut out = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!((1, out.cols()), b.shape(), "add_row bias shape");
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += x;
            }
        }
        self.push(out, Op::AddRow(a, bias), &[a, bias])
    }

    /// Row `i` of `a` multiplied by `w[i]`, with `w` an `n × 1` column.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Var {
        let mut out = self.value(a).clone();
        let wv = self.value(w);
        assert_eq!((out.rows(), 1), wv.shape(), "scale_rows weight shape");
        for r in 0..out.rows() {
            let s = wv.data()[r];
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        self.push(out, Op::ScaleRows(a, w), &[a, w])
    }

    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Var {
        let out = self.value(table).select_rows(rows);
        self.push(out, Op::Gather(table, rows.to_vec()), &[table])
    }

    /// Rotary embedding on interleaved pairs within each head.
    pub fn rope(&mut self, x: Var, positions: &[usize], head_dim: usize, base: f64) -> Var {
        let out = rope_apply(self.value(x), positions, head_dim, base, false);
        self.push(out, Op::Rope { x, positions: positions.to_vec(), head_dim, base }, &[x])
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let g = self.value(gain);
        let n = xv.cols();
        let mut out = Matrix::zeros(xv.rows(), n);
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let inv = 1.0 / (dot(row, row) / n as f64 + eps).sqrt();
            for ((o, &xi), &gi) in out.row_mut(r).iter_mut().zip(row).zip(g.data()) {
                *o = xi * inv * gi;
            }
            inv_rms.push(inv);
        }
        self.push(out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain])
    }

    /// Row softmax where `allowed[r * cols + c] == false` entries get zero
    /// probability. Every row needs at least one allowed entry.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        assert_eq!(allowed.len(), xv.len(), "mask size");
        let mut out = Matrix::zeros(xv.rows(), cols);
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let ok = &allowed[r * cols..(r + 1) * cols];
            let max = row.iter().zip(ok).filter(|(_, &a)| a).map(|(&v, _)| v).fold(f64::NEG_INFINITY, f64::max);
            let o = out.row_mut(r);
            let mut sum = 0.0;
            for c in 0..cols {
                if ok[c] {
                    let e = (row[c] - max).exp();
                    o[c] = e;
                    sum += e;
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::MaskedSoftmax(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_cols(start, len);
        self.push(out, Op::SliceCols(x, start), &[x])
    }

    pub fn hstack(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::hstack(&mats);
        self.push(out, Op::HStack(parts.to_vec()), parts)
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::vstack(&mats);
        self.push(out, Op::VStack(parts.to_vec()), parts)
    }

    /// `Σ x²` as a `1 × 1` value.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let out = Matrix::from_vec(1, 1, vec![self.value(x).frobenius_sq()]);
        self.push(out, Op::SumSquares(x), &[x])
    }

    /// `Σ w · (−log softmax(logits[row])[target])` over `(row, target, w)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize, f64)]) -> Var {
        let lv = self.value(logits);
        let mut total = 0.0;
        for &(r, t, w) in targets {
            let row = lv.row(r);
            total += w * (log_sum_exp(row) - row[t]);
        }
        let out = Matrix::from_vec(1, 1, vec![total]);
        self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec() }, &[logits])
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<'a>, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, d: Matrix| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.matmul_t(self.value(*b)));
                }
                if self.wants(*b) {
                    acc(*b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                // C = A Bᵀ: dA = G B, dB = Gᵀ A
                if self.wants(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if self.wants(*b) {
                    acc(*b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    acc(*a, Matrix::from_vec(g.rows(), g.cols(), d));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    acc(*b, Matrix::from_vec(g.rows(), g.cols(), d));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                if self.wants(*bias) {
                    let mut d = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in d.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(*bias, d);
                }
            }
            Op::ScaleRows(a, w) => {
                let wv = self.value(*w);
                if self.wants(*a) {
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        let s = wv.data()[r];
                        for x in d.row_mut(r) {
                            *x *= s;
                        }
                    }
                    acc(*a, d);
                }
                if self.wants(*w) {
                    let va = self.value(*a);
                    let d = (0..g.rows()).map(|r| dot(g.row(r), va.row(r))).collect();
                    acc(*w, Matrix::from_vec(g.rows(), 1, d));
                }
            }
            Op::Gather(table, rows) => {
                let tv = self.value(*table);
                let mut d = Matrix::zeros(tv.rows(), tv.cols());
                for (i, &r) in rows.iter().enumerate() {
                    for (o, x) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                acc(*table, d);
            }
            Op::Rope { x, positions, head_dim, base } => {
                acc(*x, rope_apply(g, positions, *head_dim, *base, true));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let n = xv.cols() as f64;
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                let mut dg = Matrix::zeros(1, xv.cols());
                for r in 0..xv.rows() {
                    let inv = inv_rms[r];
                    let xr = xv.row(r);
                    let gr = g.row(r);
                    let mut proj = 0.0;
                    for c in 0..xr.len() {
                        let xhat = xr[c] * inv;
                        dg.data_mut()[c] += gr[c] * xhat;
                        proj += gr[c] * gv.data()[c] * xhat;
                    }
                    proj /= n;
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        let xhat = xr[c] * inv;
                        *o = inv * (gr[c] * gv.data()[c] - xhat * proj);
                    }
                }
                acc(*x, dx);
                acc(*gain, dg);
            }
            Op::MaskedSoftmax(x) => {
                let p = &node.value;
                let mut d = Matrix::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let pr = p.row(r);
                    let gr = g.row(r);
                    let s = dot(pr, gr);
                    for ((o, &pi), &gi) in d.row_mut(r).iter_mut().zip(pr).zip(gr) {
                        *o = pi * (gi - s);
                    }
                }
                acc(*x, d);
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gi)| {
                        let s = sigmoid(v);
                        gi * (s + v * s * (1.0 - s))
                    })
                    .collect();
                acc(*x, Matrix::from_vec(xv.rows(), xv.cols(), d));
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let mut d = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*x, d);
            }
            Op::HStack(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        acc(p, g.slice_cols(start, w));
                    }
                    start += w;
                }
            }
            Op::VStack(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.wants(p) {
                        let rows: Vec<usize> = (start..start + h).collect();
                        acc(p, g.select_rows(&rows));
                    }
                    start += h;
                }
            }
            Op::SumSquares(x) => {
                let s = 2.0 * g.data()[0];
                acc(*x, self.value(*x).map(|v| v * s));
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = self.value(*logits);
                let s = g.data()[0];
                let mut d = Matrix::zeros(lv.rows(), lv.cols());
                for &(r, t, w) in targets {
                    let p = softmax(lv.row(r));
                    let dr = d.row_mut(r);
                    for (o, pi) in dr.iter_mut().zip(p) {
                        *o += s * w * pi;
                    }
                    dr[t] -= s * w;
                }
                acc(*logits, d);
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Rotates interleaved pairs `(2i, 2i+1)` of every head by `pos · base^(−2i/head_dim)`.
/// `inverse` rotates by the negated angle, which is also the adjoint.
pub(crate) fn rope_apply(x: &Matrix, positions: &[usize], head_dim: usize, base: f64, inverse: bool) -> Matrix {
    assert_eq!(positions.len(), x.rows(), "one position per row");
    let mut out = x.clone();
    let half = head_dim / 2;
    let inv_freq: Vec<f64> = (0..half).map(|i| base.powf(-((2 * i) as f64) / head_dim as f64)).collect();
    for (r, &pos) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for (i, f) in inv_freq.iter().enumerate() {
            let angle = pos as f64 * f;
            let (sin, cos) = angle.sin_cos();
            let sin = if inverse { -sin } else { sin };
            for head in row.chunks_exact_mut(head_dim) {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * cos - b * sin;
                head[2 * i + 1] = a * sin + b * cos;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences on every entry of every leaf in `leaves`.
    fn check(leaves: &[Matrix], f: impl Fn(&mut Tape<'_>, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|m| tape.param(m)).collect();
        let loss = f(&mut tape, &vars);
        let grads = tape.backward(loss);
        let eps = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vars[li]).cloned().unwrap_or_else(|| Matrix::zeros(leaf.rows(), leaf.cols()));
            for k in 0..leaf.len() {
                let eval = |delta: f64| {
                    let mut ls = leaves.to_vec();
                    ls[li].data_mut()[k] += delta;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = ls.iter().map(|m| t.constant(m.clone())).collect();
                    let out = f(&mut t, &vs);
                    t.value(out).data()[0]
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.data()[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-5, "leaf {li} entry {k}: analytic {a} numeric {numeric}");
            }
        }
    }

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::uniform(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn grad_matmul_chain() {
        check(&[rand_mat(3, 4, 1), rand_mat(4, 2, 2), rand_mat(5, 2, 3)], |t, v| {
            let ab = t.matmul(v[0], v[1]);
            let abc = t.matmul_t(ab, v[2]);
            t.sum_squares(abc)
        });
    }

    #[test]
    fn grad_norm_softmax_silu() {
        let allowed = vec![true, false, true, true, true, true, false, true, true, true, true, false];
        check(&[rand_mat(3, 4, 4), rand_mat(1, 4, 5), rand_mat(3, 4, 6)], move |t, v| {
            let n = t.rms_norm(v[0], v[1], 1e-6);
            let s = t.silu(n);
            let m = t.mul(s, v[2]);
            let p = t.masked_softmax(m, &allowed);
            let w = t.add(p, v[2]);
            t.sum_squares(w)
        });
    }

    #[test]
    fn grad_structural_ops() {
        check(&[rand_mat(4, 6, 7), rand_mat(1, 3, 8), rand_mat(2, 1, 9)], |t, v| {
            let g = t.gather(v[0], &[3, 1, 3]);
            let r = t.rope(g, &[0, 5, 9], 2, 10000.0);
            let a = t.slice_cols(r, 1, 3);
            let b = t.add_row(a, v[1]);
            let top = t.slice_cols(b, 0, 2);
            let x = t.vstack(&[top, top]);
            let y = t.hstack(&[x, x]);
            let z = t.slice_cols(y, 1, 1);
            let z2 = t.vstack(&[z, z]);
            let rows = t.slice_cols(z2, 0, 1);
            let top2 = t.gather(rows, &[0, 5]);
            let s = t.scale_rows(top2, v[2]);
            let s = t.scale(s, 0.7);
            let q = t.sub(s, top2);
            t.sum_squares(q)
        });
    }

    #[test]
    fn grad_cross_entropy() {
        check(&[rand_mat(3, 5, 10)], |t, v| t.cross_entropy(v[0], &[(0, 2, 1.5), (2, 4, 0.5), (0, 0, 1.0)]));
    }

    #[test]
    fn rope_inverse_round_trips() {
        let x = rand_mat(3, 8, 11);
        let fwd = rope_apply(&x, &[0, 4, 17], 4, 10000.0, false);
        let back = rope_apply(&fwd, &[0, 4, 17], 4, 10000.0, true);
        for (a, b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
