use std::borrow::Cow;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
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
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softplus(Var),
    Gather(Var, Vec<usize>),
    SoftmaxRows(Var, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    Row(Var, usize),
    Mean(Vec<Var>),
    Sum(Var),
    Mask(Var, Vec<T>),
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// A define-by-run tape. Nodes are appended in evaluation order, so the
/// node index is already a topological order and backward is a single
/// reverse sweep.
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    /// An owned leaf.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    /// A borrowed leaf; used to bind model parameters without copying.
    pub fn leaf_ref(&mut self, value: &'a Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul(self.val(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul_bt(self.val(b))?;
        Ok(self.derived(out, Op::MatMulBt(a, b), &[a, b]))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.derived(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`n` bias to every row of an `m × n` matrix. This is the
    /// only broadcasting the tape supports.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(bias));
        if ta.shape().len() != 2 || tb.len() != ta.cols() {
            return Err(mismatch("add_bias", ta, tb));
        }
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, &b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.derived(out, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let ta = self.val(a);
        let data = ta.data().iter().map(|&x| x * factor).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.derived(out, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let data = ta.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.derived(out, Op::Relu(a), &[a])
    }

    /// Elementwise `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let data = ta.data().iter().map(|&x| softplus(x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.derived(out, Op::Softplus(a), &[a])
    }

    /// Selects rows of a 2-D `table` by index.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.val(table);
        if t.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather",
                left: t.shape().to_vec(),
                right: vec![ids.len()],
            });
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "gather table",
                    index: id,
                    size: rows,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), cols], data)?;
        Ok(self.derived(out, Op::Gather(table, ids.to_vec()), &[table]))
    }

    /// Row-wise softmax of `a / scale`, stabilised by subtracting the row max.
    pub fn softmax_rows(&mut self, a: Var, scale: T) -> Result<Var> {
        let ta = self.val(a);
        if ta.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "softmax_rows",
                left: ta.shape().to_vec(),
                right: vec![],
            });
        }
        let out = softmax_rows(ta, scale);
        Ok(self.derived(out, Op::SoftmaxRows(a, scale), &[a]))
    }

    /// Layer normalisation over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (tx, tg, tb) = (self.val(x), self.val(gamma), self.val(beta));
        let n = tx.cols();
        if tg.len() != n || tb.len() != n {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let count = T::of(n as f64);
        let mut xhat = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(n) {
            let mean = row.iter().copied().sum::<T>() / count;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.derived(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.val(parts[0]);
        let rows = first.rows();
        for &p in &parts[1..] {
            let tp = self.val(p);
            if tp.shape().len() != 2 || tp.rows() != rows {
                return Err(mismatch("concat_cols", first, tp));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.val(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.val(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.derived(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Row `r` of a 2-D tensor as a `1 × n` tensor.
    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let ta = self.val(a);
        if r >= ta.rows() {
            return Err(Error::IndexOutOfRange {
                what: "row",
                index: r,
                size: ta.rows(),
            });
        }
        let out = Tensor::new(vec![1, ta.cols()], ta.row(r).to_vec())?;
        Ok(self.derived(out, Op::Row(a, r), &[a]))
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.val(parts[0]).clone();
        let mut acc = first;
        for &p in &parts[1..] {
            let tp = self.val(p);
            if tp.shape() != acc.shape() {
                return Err(mismatch("mean", &acc, tp));
            }
            acc.add_assign(tp)?;
        }
        acc.scale_in_place(T::one() / T::of(parts.len() as f64));
        Ok(self.derived(acc, Op::Mean(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.val(a).data().iter().copied().sum::<T>();
        self.derived(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// Multiplies by a fixed elementwise mask (dropout).
    pub fn mask(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        let ta = self.val(a);
        if mask.len() != ta.len() {
            return Err(Error::ShapeMismatch {
                op: "mask",
                left: ta.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let data = ta.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.derived(out, Op::Mask(a, mask), &[a]))
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients are accumulated in
    /// decreasing node order, so repeated calls are bit-identical.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.val(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lt.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let ga = g.matmul_bt(self.val(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.needs(*b) {
                    let gb = self.val(*a).matmul_at(g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::MatMulBt(a, b) => {
                if self.needs(*a) {
                    let ga = g.matmul(self.val(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.needs(*b) {
                    let gb = g.matmul_at(self.val(*a))?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                let mut neg = g.clone();
                neg.scale_in_place(-T::one());
                self.accumulate(grads, *b, neg)?;
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let ga = zip(g, tb, |x, y| x * y);
                let gb = zip(g, ta, |x, y| x * y);
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.needs(*bias) {
                    let n = g.cols();
                    let mut gb = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (acc, &x) in gb.iter_mut().zip(row) {
                            *acc += x;
                        }
                    }
                    let shape = self.val(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, gb)?)?;
                }
            }
            Op::Scale(a, factor) => {
                let mut ga = g.clone();
                ga.scale_in_place(*factor);
                self.accumulate(grads, *a, ga)?;
            }
            Op::Relu(a) => {
                let ga = zip(g, self.val(*a), |x, y| if y > T::zero() { x } else { T::zero() });
                self.accumulate(grads, *a, ga)?;
            }
            Op::Softplus(a) => {
                let ga = zip(g, self.val(*a), |x, y| x * sigmoid(y));
                self.accumulate(grads, *a, ga)?;
            }
            Op::Gather(table, ids) => {
                if self.needs(*table) {
                    let shape = self.val(*table).shape().to_vec();
                    let cols = shape[1];
                    let mut gt = Tensor::zeros(&shape);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt.data_mut()[id * cols..(id + 1) * cols];
                        for (d, &x) in dst.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *table, gt)?;
                }
            }
            Op::SoftmaxRows(a, scale) => {
                let n = out.cols();
                let inv_scale = T::one() / *scale;
                let mut ga = Vec::with_capacity(out.len());
                for (y, gy) in out.data().chunks(n).zip(g.data().chunks(n)) {
                    let dot: T = y.iter().zip(gy).map(|(&p, &q)| p * q).sum();
                    for (&p, &q) in y.iter().zip(gy) {
                        ga.push(p * (q - dot) * inv_scale);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), ga)?)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let tg = self.val(*gamma);
                if self.needs(*beta) || self.needs(*gamma) {
                    let mut gg = vec![T::zero(); n];
                    let mut gbeta = vec![T::zero(); n];
                    for (gy, xh) in g.data().chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gy[j] * xh[j];
                            gbeta[j] += gy[j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new(tg.shape().to_vec(), gg)?)?;
                    let bshape = self.val(*beta).shape().to_vec();
                    self.accumulate(grads, *beta, Tensor::new(bshape, gbeta)?)?;
                }
                if self.needs(*x) {
                    let count = T::of(n as f64);
                    let mut gx = Vec::with_capacity(out.len());
                    for ((gy, xh), &inv) in g.data().chunks(n).zip(xhat.chunks(n)).zip(inv_std) {
                        let gxh: Vec<T> = gy.iter().zip(tg.data()).map(|(&a, &b)| a * b).collect();
                        let s1: T = gxh.iter().copied().sum();
                        let s2: T = gxh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            gx.push(inv / count * (count * gxh[j] - s1 - xh[j] * s2));
                        }
                    }
                    let shape = self.val(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::new(shape, gx)?)?;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let tp = self.val(p);
                    let w = tp.cols();
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(tp.len());
                        for row in g.data().chunks(total) {
                            gp.extend_from_slice(&row[offset..offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(tp.shape().to_vec(), gp)?)?;
                    }
                    offset += w;
                }
            }
            Op::Row(a, r) => {
                if self.needs(*a) {
                    let ta = self.val(*a);
                    let mut ga = Tensor::zeros(ta.shape());
                    let c = ta.cols();
                    ga.data_mut()[r * c..(r + 1) * c].copy_from_slice(g.data());
                    self.accumulate(grads, *a, ga)?;
                }
            }
            Op::Mean(parts) => {
                let mut share = g.clone();
                share.scale_in_place(T::one() / T::of(parts.len() as f64));
                for &p in parts {
                    self.accumulate(grads, p, share.clone())?;
                }
            }
            Op::Sum(a) => {
                let shape = self.val(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::filled(&shape, g.item()))?;
            }
            Op::Mask(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(&x, &m)| x * m).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), data)?)?;
            }
        }
        Ok(())
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(b.shape().to_vec(), data).expect("shapes checked on forward")
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_rows<T: Scalar>(a: &Tensor<T>, scale: T) -> Tensor<T> {
    let n = a.cols();
    let mut data = Vec::with_capacity(a.len());
    for row in a.data().chunks(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = data.len();
        let mut total = T::zero();
        for &x in row {
            let e = ((x - max) / scale).exp();
            total += e;
            data.push(e);
        }
        for e in &mut data[start..] {
            *e = *e / total;
        }
    }
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}
