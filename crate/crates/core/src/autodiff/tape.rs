use std::fmt;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{logistic, Scalar};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation whose forward value is computed by the
/// caller. Used for surrogate gradients that are not the derivative of the
/// recorded forward.
pub trait CustomOp<F: Scalar>: Send {
    fn name(&self) -> &str;

    /// Returns one gradient buffer per input (`None` when the input receives
    /// no gradient). `upstream` has the length of `output`.
    fn backward(&self, inputs: &[&Tensor<F>], output: &Tensor<F>, upstream: &[F]) -> Vec<Option<Vec<F>>>;
}

enum Op<F: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, F),
    AddConst(usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Silu(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    /// Max or max-abs; gradient goes to `index` times `sign`.
    Pick {
        input: usize,
        index: usize,
        sign: F,
    },
    AddRow(usize, usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    SliceRows {
        input: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    CausalSoftmax(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp<F>>,
    },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Operation recorder and reverse sweep.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> fmt::Debug for Tape<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

fn elementwise_shapes<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<bool> {
    if a.shape() == b.shape() {
        Ok(false)
    } else if b.len() == 1 {
        Ok(true)
    } else {
        Err(Error::ShapeMismatch { left: a.shape().to_vec(), right: b.shape().to_vec() })
    }
}

/// `a[m x k] * b[k x n]`
pub(crate) fn matmul_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m x k] * b[n x k]^T`
fn matmul_a_bt<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            out[i * n + j] = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `a[k x m]^T * b[k x n]`
fn matmul_at_b<F: Scalar>(a: &[F], b: &[F], k: usize, m: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == F::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw<F: Scalar>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn dims2<F: Scalar>(t: &Tensor<F>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::ShapeMismatch { left: s.to_vec(), right: vec![0, 0] }),
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) seed with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let scalar_b = elementwise_shapes(ta, tb)?;
        let data = if scalar_b {
            let bv = tb.data()[0];
            ta.data().iter().map(|&x| f(x, bv)).collect()
        } else {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let value = self.nodes[a.0].value.map(f);
        let rg = self.rg(a.0);
        self.push(value, op, rg)
    }

    /// `a + b`; `b` may be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: F) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a.0, c))
    }

    /// Addition of a constant.
    pub fn add_const(&mut self, a: Var, c: F) -> Var {
        self.unary(a, |x| x + c, Op::AddConst(a.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, F::exp, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, F::ln, Op::Log(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, logistic, Op::Sigmoid(a.0))
    }

    /// `x * sigmoid(x)`
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * logistic(x), Op::Silu(a.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mismatch = || Error::MatmulMismatch { left: ta.shape().to_vec(), right: tb.shape().to_vec() };
        let (m, k) = dims2(ta).map_err(|_| mismatch())?;
        let (k2, n) = dims2(tb).map_err(|_| mismatch())?;
        if k != k2 {
            return Err(mismatch());
        }
        let value = Tensor::matrix(m, n, matmul_raw(ta.data(), tb.data(), m, k, n))?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::MatMul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (r, c) = dims2(ta)?;
        let value = Tensor::matrix(c, r, transpose_raw(ta.data(), r, c))?;
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::Transpose(a.0), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.is_empty() {
            return Err(Error::EmptyTensor);
        }
        let s: F = ta.data().iter().copied().sum();
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a.0), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.is_empty() {
            return Err(Error::EmptyTensor);
        }
        let s: F = ta.data().iter().copied().sum::<F>() / F::from_usize(ta.len()).unwrap();
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a.0), rg))
    }

    fn pick(&mut self, a: Var, key: impl Fn(F) -> F, abs: bool) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.is_empty() {
            return Err(Error::EmptyTensor);
        }
        // first occurrence wins on ties
        let mut index = 0;
        for (i, &v) in ta.data().iter().enumerate() {
            if key(v) > key(ta.data()[index]) {
                index = i;
            }
        }
        let raw = ta.data()[index];
        let (value, sign) = if abs && raw < F::zero() { (-raw, -F::one()) } else { (raw, F::one()) };
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::scalar(value), Op::Pick { input: a.0, index, sign }, rg))
    }

    pub fn max(&mut self, a: Var) -> Result<Var> {
        self.pick(a, |v| v, false)
    }

    /// Maximum absolute value.
    pub fn amax(&mut self, a: Var) -> Result<Var> {
        self.pick(a, F::abs, true)
    }

    /// Adds a row vector `[n]` to every row of `a[m x n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let (m, n) = dims2(ta)?;
        if tr.len() != n {
            return Err(Error::ShapeMismatch { left: ta.shape().to_vec(), right: tr.shape().to_vec() });
        }
        let mut data = ta.data().to_vec();
        for r in 0..m {
            for (o, &b) in data[r * n..(r + 1) * n].iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        let rg = self.rg(a.0) || self.rg(row.0);
        Ok(self.push(value, Op::AddRow(a.0, row.0), rg))
    }

    /// Gathers rows of `table[v x d]` into `[ids.len() x d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = &self.nodes[table.0].value;
        let (v, d) = dims2(tt)?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::IndexOutOfRange { index: id, classes: v });
            }
            data.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::matrix(ids.len(), d, data)?;
        let rg = self.rg(table.0);
        Ok(self.push(value, Op::Embedding { table: table.0, ids: ids.to_vec() }, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (m, n) = dims2(ta)?;
        if start + len > m {
            return Err(Error::ShapeMismatch { left: ta.shape().to_vec(), right: vec![start + len, n] });
        }
        let value = Tensor::matrix(len, n, ta.data()[start * n..(start + len) * n].to_vec())?;
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::SliceRows { input: a.0, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyTensor)?;
        let (_, n) = dims2(&self.nodes[first.0].value)?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let tp = &self.nodes[p.0].value;
            let (m, c) = dims2(tp)?;
            if c != n {
                return Err(Error::ShapeMismatch { left: vec![rows, n], right: tp.shape().to_vec() });
            }
            rows += m;
            data.extend_from_slice(tp.data());
        }
        let value = Tensor::matrix(rows, n, data)?;
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(value, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), rg))
    }

    /// Row-wise softmax where row `i` only sees columns `j <= i + offset`;
    /// hidden entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var, offset: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (m, n) = dims2(ta)?;
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let visible = (i + offset + 1).min(n);
            let row = &ta.data()[i * n..i * n + visible];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let o = &mut out[i * n..i * n + visible];
            let mut total = F::zero();
            for (oj, &x) in o.iter_mut().zip(row) {
                *oj = (x - mx).exp();
                total += *oj;
            }
            for oj in o.iter_mut() {
                *oj /= total;
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        let rg = self.rg(a.0);
        // hidden entries are zero, so the backward rule needs no mask
        Ok(self.push(value, Op::CausalSoftmax(a.0), rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[batch x classes]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        let (m, n) = dims2(tl)?;
        if targets.len() != m {
            return Err(Error::ShapeMismatch { left: tl.shape().to_vec(), right: vec![targets.len()] });
        }
        if m == 0 {
            return Err(Error::EmptyTensor);
        }
        let mut probs = vec![F::zero(); m * n];
        let mut total = F::zero();
        for (i, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(Error::IndexOutOfRange { index: t, classes: n });
            }
            let row = &tl.data()[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let z: F = row.iter().map(|&x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            total += lse - row[t];
            for (p, &x) in probs[i * n..(i + 1) * n].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let loss = total / F::from_usize(m).unwrap();
        let rg = self.rg(logits.0);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits: logits.0, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// Records a node whose forward `value` was computed by the caller and
    /// whose backward is delegated to `op`.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<F>, op: Box<dyn CustomOp<F>>) -> Var {
        let rg = inputs.iter().any(|v| self.rg(v.0));
        self.push(value, Op::Custom { inputs: inputs.iter().map(|v| v.0).collect(), op }, rg)
    }

    /// Reverse sweep from a scalar `loss`. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let seed = &self.nodes[loss.0].value;
        if seed.len() != 1 {
            return Err(Error::NonScalarSeed(seed.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        self.grads = (0..n).map(|_| None).collect();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            self.grads[i] = Some(Tensor::new(self.nodes[i].value.shape().to_vec(), g)?);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let val = |j: usize| nodes[j].value.data();
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [F])| {
            if !nodes[j].requires_grad {
                return;
            }
            let buf = grads[j].get_or_insert_with(|| vec![F::zero(); nodes[j].value.len()]);
            f(buf);
        };
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -F::one() } else { F::one() };
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                let scalar_b = nodes[*b].value.len() == 1 && nodes[*a].value.len() != 1;
                acc(*b, &mut |gb| {
                    if scalar_b {
                        gb[0] += sign * g.iter().copied().sum::<F>();
                    } else {
                        gb.iter_mut().zip(g).for_each(|(x, &y)| *x += sign * y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let scalar_b = bv.len() == 1 && av.len() != 1;
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] * bv[if scalar_b { 0 } else { k }];
                    }
                });
                acc(*b, &mut |gb| {
                    if scalar_b {
                        gb[0] += g.iter().zip(av).map(|(&x, &y)| x * y).sum::<F>();
                    } else {
                        gb.iter_mut().zip(g.iter().zip(av)).for_each(|(o, (&x, &y))| *o += x * y);
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let scalar_b = bv.len() == 1 && av.len() != 1;
                let bi = |k: usize| bv[if scalar_b { 0 } else { k }];
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] / bi(k);
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..g.len() {
                        let d = -g[k] * av[k] / (bi(k) * bi(k));
                        gb[if scalar_b { 0 } else { k }] += d;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *c)),
            Op::AddConst(a) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y)),
            Op::Neg(a) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x -= y)),
            Op::Exp(a) => acc(*a, &mut |ga| {
                for k in 0..ga.len() {
                    ga[k] += g[k] * out[k];
                }
            }),
            Op::Log(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] / av[k];
                    }
                })
            }
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for k in 0..ga.len() {
                    ga[k] += g[k] * out[k] * (F::one() - out[k]);
                }
            }),
            Op::Silu(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        let s = logistic(av[k]);
                        ga[k] += g[k] * (s + av[k] * s * (F::one() - s));
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                acc(*a, &mut |ga| {
                    let d = matmul_a_bt(g, tb.data(), m, n, k);
                    ga.iter_mut().zip(d).for_each(|(x, y)| *x += y);
                });
                acc(*b, &mut |gb| {
                    let d = matmul_at_b(ta.data(), g, m, k, n);
                    gb.iter_mut().zip(d).for_each(|(x, y)| *x += y);
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                acc(*a, &mut |ga| {
                    let d = transpose_raw(g, c, r);
                    ga.iter_mut().zip(d).for_each(|(x, y)| *x += y);
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = F::from_usize(nodes[*a].value.len()).unwrap();
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Pick { input, index, sign } => acc(*input, &mut |ga| ga[*index] += g[0] * *sign),
            Op::AddRow(a, row) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                let n = nodes[*row].value.len();
                acc(*row, &mut |gr| {
                    for chunk in g.chunks(n) {
                        gr.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = nodes[*table].value.shape()[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::SliceRows { input, start } => {
                let n = nodes[*input].value.shape()[1];
                acc(*input, &mut |ga| {
                    ga[start * n..start * n + g.len()].iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    acc(p, &mut |gp| gp.iter_mut().zip(&g[off..off + len]).for_each(|(x, &y)| *x += y));
                    off += len;
                }
            }
            Op::CausalSoftmax(a) => {
                let n = nodes[i].value.shape()[1];
                acc(*a, &mut |ga| {
                    for (r, (yr, gr)) in out.chunks(n).zip(g.chunks(n)).enumerate() {
                        let dot: F = yr.iter().zip(gr).map(|(&y, &gg)| y * gg).sum();
                        for j in 0..n {
                            ga[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let n = nodes[*logits].value.shape()[1];
                let scale = g[0] / F::from_usize(targets.len()).unwrap();
                acc(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..n {
                            gl[r * n + j] += probs[r * n + j] * scale;
                        }
                        gl[r * n + t] -= scale;
                    }
                });
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<F>> = inputs.iter().map(|&j| &nodes[j].value).collect();
                let parts = op.backward(&ins, &nodes[i].value, g);
                for (&j, part) in inputs.iter().zip(parts) {
                    if let Some(part) = part {
                        acc(j, &mut |gj| gj.iter_mut().zip(&part).for_each(|(x, &y)| *x += y));
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn add_and_shape_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1.0, 2.0]), false);
        let b = tape.leaf(t(&[3.0, 4.0]), false);
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
        let d = tape.leaf(t(&[1.0, 2.0, 3.0]), false);
        let err = tape.add(a, d).unwrap_err();
        assert_eq!(err, Error::ShapeMismatch { left: vec![2], right: vec![3] });
        assert!(err.to_string().contains("[2]") && err.to_string().contains("[3]"));
    }

    #[test]
    fn sigmoid_value_and_slope_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0), true);
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), 0.5);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 0.25);
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(), false);
        let m = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap(), false);
        let c = tape.leaf(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap(), false);
        let p = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(p).data(), &[11.0]);
        assert!(matches!(tape.matmul(r, r), Err(Error::MatmulMismatch { .. })));
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[-7.5, 3.0]), false);
        let am = tape.amax(a).unwrap();
        assert_eq!(tape.value(am).item(), 7.5);
        let b = tape.leaf(t(&[1.0, 2.0, 3.0]), false);
        let mean = tape.mean(b).unwrap();
        assert_eq!(tape.value(mean).item(), 2.0);
        let e = tape.leaf(Tensor::from_vec(vec![]), false);
        assert_eq!(tape.sum(e), Err(Error::EmptyTensor));
        assert_eq!(tape.max(e), Err(Error::EmptyTensor));
    }

    #[test]
    fn max_backward_uses_first_tie() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1.0, 3.0, 3.0]), true);
        let m = tape.max(a).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn amax_backward_carries_sign() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[-7.5, 3.0, 7.5]), true);
        let m = tape.amax(a).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[-1.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_vocab() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::matrix(2, 4, vec![0.3; 8]).unwrap(), false);
        let loss = tape.softmax_cross_entropy(l, &[0, 3]).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-15);
        assert!((tape.value(loss).item() - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_with_huge_margin_vanishes() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::matrix(1, 3, vec![0.0, 800.0, 0.0]).unwrap(), false);
        let loss = tape.softmax_cross_entropy(l, &[1]).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        assert_eq!(tape.softmax_cross_entropy(l, &[3]), Err(Error::IndexOutOfRange { index: 3, classes: 3 }));
    }

    #[test]
    fn backward_rejects_non_scalar_seed() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1.0, 2.0]), true);
        assert_eq!(tape.backward(a), Err(Error::NonScalarSeed(vec![2])));
    }

    #[test]
    fn square_and_accumulation() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 6.0);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 2.0);
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1.0, 2.0, 3.0]), true);
        let s = tape.leaf(Tensor::scalar(2.0), true);
        let p = tape.mul(a, s).unwrap();
        let l = tape.sum(p).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(s).unwrap().item(), 6.0);
        assert_eq!(tape.grad(a).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn causal_softmax_rows_are_stochastic_and_masked() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(3, 3, vec![0.1, 5.0, -2.0, 0.4, 0.3, 9.0, 1.0, 2.0, 3.0]).unwrap(), false);
        let p = tape.causal_softmax(a, 0).unwrap();
        let v = tape.value(p);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row(1)[2], 0.0);
        for r in 0..3 {
            assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nodes_without_grad_are_skipped() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1.0, 2.0]), false);
        let b = tape.leaf(t(&[1.0, 2.0]), true);
        let c = tape.mul(a, b).unwrap();
        let l = tape.sum(c).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(a).is_none());
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 2.0]);
    }
}
