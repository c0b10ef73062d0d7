//! Reverse-mode differentiation over a recorded trace of matrix operations.
//!
//! Every value on the tape is a 2-D matrix (1-D tensors count as one row).
//! Operations append a node; [`Tape::backward`] walks the nodes in reverse
//! and accumulates vector-Jacobian products.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const NO_ARG: usize = usize::MAX;

#[derive(Clone, Debug)]
enum Op<T> {
    Constant,
    Param(usize),
    /// `x · wᵀ + b`
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Dropout { x: Var, mask: Vec<T> },
    Gather { x: Var, rows: Vec<usize> },
    /// `[x_u ‖ x_v] · wᵀ + b` for each pair, without materializing the concatenation.
    PairLinear { x: Var, w: Var, b: Var, pairs: Vec<(usize, usize)> },
    Concat(Var, Var),
    /// Per output element, the input row that won the max (or `NO_ARG`).
    SegmentMax { x: Var, argmax: Vec<usize> },
    SegmentMean { x: Var, groups: Vec<Vec<usize>> },
    Add(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Bce { p: Var, labels: Vec<T>, clamped: Vec<bool>, eps: T },
    LinComb(Vec<(Var, T)>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn as_matrix<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    Tensor::matrix(t.rows(), t.cols(), t.data().to_vec())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// A scalar node's value.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let m = as_matrix(&t);
        self.push(m, Op::Constant)
    }

    /// A trainable leaf tagged with its parameter index.
    pub fn param(&mut self, id: usize, t: &Tensor<T>) -> Var {
        self.push(as_matrix(t), Op::Param(id))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, k, out) = (xv.rows(), xv.cols(), wv.rows());
        assert_eq!(wv.cols(), k, "linear: input width {k} vs weight {:?}", wv.shape());
        assert_eq!(bv.len(), out, "linear: bias length");
        let mut y = Vec::with_capacity(n * out);
        for _ in 0..n {
            y.extend_from_slice(bv.data());
        }
        T::gemm(
            n,
            k,
            out,
            T::one(),
            xv.data(),
            (k, 1),
            wv.data(),
            (1, k),
            T::one(),
            &mut y,
            (out, 1),
        );
        self.push(Tensor::matrix(n, out, y), Op::Linear { x, w, b })
    }

    /// Equivalent to `linear(concat(gather(x, us), gather(x, vs)), w, b)`:
    /// both halves of `w` are applied once per row of `x`, then summed per pair.
    pub fn pair_linear(&mut self, x: Var, w: Var, b: Var, pairs: Vec<(usize, usize)>) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, k, out) = (xv.rows(), xv.cols(), wv.rows());
        assert_eq!(wv.cols(), 2 * k, "pair_linear: weight {:?} for {k}-D rows", wv.shape());
        assert_eq!(bv.len(), out, "pair_linear: bias length");
        let (left, right) = project_halves(xv.data(), n, k, wv.data(), out);
        let mut y = Vec::with_capacity(pairs.len() * out);
        for &(u, v) in &pairs {
            let (pu, qv) = (&left[u * out..(u + 1) * out], &right[v * out..(v + 1) * out]);
            y.extend(pu.iter().zip(qv).zip(bv.data()).map(|((&a, &c), &d)| a + c + d));
        }
        self.push(Tensor::matrix(pairs.len(), out, y), Op::PairLinear { x, w, b, pairs })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(T::zero())).collect();
        let t = Tensor::matrix(xv.rows(), xv.cols(), data);
        self.push(t, Op::Relu(x))
    }

    /// Multiplies by a precomputed (already rescaled) mask.
    pub fn dropout(&mut self, x: Var, mask: Vec<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(mask.len(), xv.len());
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::matrix(xv.rows(), xv.cols(), data);
        self.push(t, Op::Dropout { x, mask })
    }

    pub fn gather(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            data.extend_from_slice(xv.row(r));
        }
        let t = Tensor::matrix(rows.len(), c, data);
        self.push(t, Op::Gather { x, rows })
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows(), "concat: row mismatch");
        let (ca, cb) = (av.cols(), bv.cols());
        let mut data = Vec::with_capacity(av.rows() * (ca + cb));
        for r in 0..av.rows() {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let t = Tensor::matrix(av.rows(), ca + cb, data);
        self.push(t, Op::Concat(a, b))
    }

    /// Elementwise max of the rows of `x` grouped by `segment[r]`; segments
    /// without rows are zero.
    pub fn segment_max(&mut self, x: Var, segment: &[usize], segments: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(segment.len(), xv.rows());
        let c = xv.cols();
        let mut out = vec![T::zero(); segments * c];
        let mut argmax = vec![NO_ARG; segments * c];
        for (r, &s) in segment.iter().enumerate() {
            let row = xv.row(r);
            for j in 0..c {
                let k = s * c + j;
                if argmax[k] == NO_ARG || row[j] > out[k] {
                    out[k] = row[j];
                    argmax[k] = r;
                }
            }
        }
        let t = Tensor::matrix(segments, c, out);
        self.push(t, Op::SegmentMax { x, argmax })
    }

    /// Row means over each group of row indices.
    pub fn segment_mean(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = vec![T::zero(); groups.len() * c];
        for (g, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let dst = &mut out[g * c..(g + 1) * c];
            for &r in rows {
                for (d, &v) in dst.iter_mut().zip(xv.row(r)) {
                    *d += v;
                }
            }
            let inv = T::one() / T::lit(rows.len() as f64);
            for d in dst {
                *d *= inv;
            }
        }
        let t = Tensor::matrix(groups.len(), c, out);
        self.push(t, Op::SegmentMean { x, groups })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len());
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::matrix(av.rows(), av.cols(), data);
        self.push(t, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * factor).collect();
        let t = Tensor::matrix(av.rows(), av.cols(), data);
        self.push(t, Op::Scale(a, factor))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&z| sigmoid(z)).collect();
        let t = Tensor::matrix(xv.rows(), xv.cols(), data);
        self.push(t, Op::Sigmoid(x))
    }

    /// Mean binary cross-entropy of probabilities `p` against `labels`,
    /// with `p` clamped to `[eps, 1 - eps]`. Empty input gives 0.
    pub fn bce(&mut self, p: Var, labels: Vec<T>, eps: T) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != labels.len() {
            return Err(Error::contract(format!(
                "bce: {} predictions vs {} labels",
                pv.len(),
                labels.len()
            )));
        }
        let (loss, clamped) = bce_terms(pv.data(), &labels, eps);
        Ok(self.push(
            Tensor::matrix(1, 1, vec![loss]),
            Op::Bce {
                p,
                labels,
                clamped,
                eps,
            },
        ))
    }

    /// `Σ coef · term` over scalar nodes.
    pub fn lin_comb(&mut self, terms: Vec<(Var, T)>) -> Var {
        let mut total = T::zero();
        for &(v, c) in &terms {
            total += c * self.scalar(v);
        }
        self.push(Tensor::matrix(1, 1, vec![total]), Op::LinComb(terms))
    }

    /// Hash of every branch decision the trace took (rectifier masks,
    /// max-aggregation winners, clamp hits). Two traces with equal
    /// signatures lie in the same smooth piece of the loss.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(_) => {
                    for v in node.value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::SegmentMax { argmax, .. } => argmax.hash(&mut h),
                Op::Bce { clamped, .. } => clamped.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::contract("backward: the loss is not on this trace"))?;
        if node.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be a scalar, found shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::matrix(1, 1, vec![T::one()]));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, delta: Tensor<T>| {
            let slot = &mut grads[v.0];
            match slot {
                Some(existing) => existing.add_assign(&delta),
                None => {
                    let shape = self.nodes[v.0].value.shape().to_vec();
                    *slot = Some(Tensor::from_vec(shape, delta.into_data()));
                }
            }
        };
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, k, out) = (xv.rows(), xv.cols(), wv.rows());
                let gd = g.data();
                let mut dx = vec![T::zero(); n * k];
                T::gemm(n, out, k, T::one(), gd, (out, 1), wv.data(), (k, 1), T::zero(), &mut dx, (k, 1));
                let mut dw = vec![T::zero(); out * k];
                T::gemm(out, n, k, T::one(), gd, (1, out), xv.data(), (k, 1), T::zero(), &mut dw, (k, 1));
                let mut db = vec![T::zero(); out];
                for r in 0..n {
                    for (d, &v) in db.iter_mut().zip(&gd[r * out..(r + 1) * out]) {
                        *d += v;
                    }
                }
                acc(*x, Tensor::matrix(n, k, dx));
                acc(*w, Tensor::matrix(out, k, dw));
                acc(*b, Tensor::matrix(1, out, db));
            }
            Op::PairLinear { x, w, b, pairs } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, k, out) = (xv.rows(), xv.cols(), wv.rows());
                let mut dl = vec![T::zero(); n * out];
                let mut dr = vec![T::zero(); n * out];
                let mut db = vec![T::zero(); out];
                for (e, &(u, v)) in pairs.iter().enumerate() {
                    let ge = g.row(e);
                    for j in 0..out {
                        dl[u * out + j] += ge[j];
                        dr[v * out + j] += ge[j];
                        db[j] += ge[j];
                    }
                }
                let wd = wv.data();
                let mut dx = vec![T::zero(); n * k];
                let mut dw = vec![T::zero(); out * 2 * k];
                if k > 0 {
                    for (half, d) in [(0, &dl), (k, &dr)] {
                        T::gemm(n, out, k, T::one(), d, (out, 1), &wd[half..], (2 * k, 1), T::one(), &mut dx, (k, 1));
                        T::gemm(out, n, k, T::one(), d, (1, out), xv.data(), (k, 1), T::zero(), &mut dw[half..], (2 * k, 1));
                    }
                }
                acc(*x, Tensor::matrix(n, k, dx));
                acc(*w, Tensor::matrix(out, 2 * k, dw));
                acc(*b, Tensor::matrix(1, out, db));
            }
            Op::Relu(x) => {
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                acc(*x, Tensor::matrix(y.rows(), y.cols(), data));
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(&d, &m)| d * m).collect();
                acc(*x, Tensor::matrix(g.rows(), g.cols(), data));
            }
            Op::Gather { x, rows } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![T::zero(); xv.rows() * c];
                for (r, &src) in rows.iter().enumerate() {
                    for (d, &v) in dx[src * c..(src + 1) * c].iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                acc(*x, Tensor::matrix(xv.rows(), c, dx));
            }
            Op::Concat(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let n = g.rows();
                let mut da = Vec::with_capacity(n * ca);
                let mut db = Vec::with_capacity(n * cb);
                for r in 0..n {
                    let row = g.row(r);
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                acc(*a, Tensor::matrix(n, ca, da));
                acc(*b, Tensor::matrix(n, cb, db));
            }
            Op::SegmentMax { x, argmax } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![T::zero(); xv.rows() * c];
                for (k, &r) in argmax.iter().enumerate() {
                    if r != NO_ARG {
                        dx[r * c + k % c] += g.data()[k];
                    }
                }
                acc(*x, Tensor::matrix(xv.rows(), c, dx));
            }
            Op::SegmentMean { x, groups } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![T::zero(); xv.rows() * c];
                for (gi, rows) in groups.iter().enumerate() {
                    if rows.is_empty() {
                        continue;
                    }
                    let inv = T::one() / T::lit(rows.len() as f64);
                    let grow = g.row(gi);
                    for &r in rows {
                        for (d, &v) in dx[r * c..(r + 1) * c].iter_mut().zip(grow) {
                            *d += v * inv;
                        }
                    }
                }
                acc(*x, Tensor::matrix(xv.rows(), c, dx));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Scale(a, f) => {
                let mut d = g.clone();
                d.scale(*f);
                acc(*a, d);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&d, &s)| d * s * (T::one() - s))
                    .collect();
                acc(*x, Tensor::matrix(y.rows(), y.cols(), data));
            }
            Op::Bce {
                p,
                labels,
                clamped,
                eps,
            } => {
                let pv = self.value(*p);
                let n = labels.len();
                if n == 0 {
                    return;
                }
                let scale = g.data()[0] / T::lit(n as f64);
                let data = pv
                    .data()
                    .iter()
                    .zip(labels)
                    .zip(clamped)
                    .map(|((&q, &y), &c)| {
                        if c {
                            T::zero()
                        } else {
                            let q = q.max(*eps).min(T::one() - *eps);
                            scale * ((T::one() - y) / (T::one() - q) - y / q)
                        }
                    })
                    .collect();
                acc(*p, Tensor::matrix(pv.rows(), pv.cols(), data));
            }
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    acc(v, Tensor::matrix(1, 1, vec![g.data()[0] * c]));
                }
            }
        }
    }

    /// Parameter ids of every `param` leaf, in tape order.
    fn param_nodes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => Some((i, id)),
            _ => None,
        })
    }
}

/// `x · w[:, ..k]ᵀ` and `x · w[:, k..]ᵀ` for an `out × 2k` weight.
fn project_halves<T: Scalar>(x: &[T], n: usize, k: usize, w: &[T], out: usize) -> (Vec<T>, Vec<T>) {
    let mut left = vec![T::zero(); n * out];
    let mut right = vec![T::zero(); n * out];
    if k > 0 {
        T::gemm(n, k, out, T::one(), x, (k, 1), w, (1, 2 * k), T::zero(), &mut left, (out, 1));
        T::gemm(n, k, out, T::one(), x, (k, 1), &w[k..], (1, 2 * k), T::zero(), &mut right, (out, 1));
    }
    (left, right)
}

pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Mean clamped BCE plus which predictions hit the clamp.
pub(crate) fn bce_terms<T: Scalar>(p: &[T], labels: &[T], eps: T) -> (T, Vec<bool>) {
    if p.is_empty() {
        return (T::zero(), Vec::new());
    }
    let mut total = T::zero();
    let mut clamped = Vec::with_capacity(p.len());
    for (&q, &y) in p.iter().zip(labels) {
        clamped.push(q < eps || q > T::one() - eps);
        let q = q.max(eps).min(T::one() - eps);
        total -= y * q.ln() + (T::one() - y) * (T::one() - q).ln();
    }
    (total / T::lit(p.len() as f64), clamped)
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Sums gradients per parameter id into `out`, which must hold one
    /// tensor per parameter with the parameter's shape.
    pub fn accumulate_params(&self, tape: &Tape<T>, out: &mut [Tensor<T>]) {
        for (node, id) in tape.param_nodes() {
            if let Some(g) = &self.grads[node] {
                let dst = &mut out[id];
                for (d, &v) in dst.data_mut().iter_mut().zip(g.data()) {
                    *d += v;
                }
            }
        }
    }
}
