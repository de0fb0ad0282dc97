//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes; calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that requires one.
//! The operation set is exactly what the pose network needs: broadcasting
//! arithmetic, (batched) matrix products, axis permutation, softmax, layer
//! normalization, GELU, 2-D convolution and max pooling, reductions, and the
//! mean-squared error.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    broadcast_shape, broadcast_strides, for_each_offset, gemm_acc, gemm_nt_acc, gemm_tn_acc, numel,
    Tensor,
};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, rstd: Vec<S> },
    Gelu(Var),
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Mean(Var, usize),
    Concat(Vec<Var>, usize),
    Select(Var, usize, usize),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu<S: Scalar>(x: S) -> S {
    let k = S::lit(GELU_K);
    let c = S::lit(GELU_C);
    let half = S::lit(0.5);
    half * x * (S::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let k = S::lit(GELU_K);
    let c = S::lit(GELU_C);
    let half = S::lit(0.5);
    let u = k * (x + c * x * x * x);
    let th = u.tanh();
    let du = k * (S::one() + S::lit(3.0) * c * x * x);
    half * (S::one() + th) + half * x * (S::one() - th * th) * du
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

    fn push(&mut self, value: Tensor<S>, op: Op<S>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Winning input offsets of every max-pool node, in graph order. Two
    /// evaluations with equal patterns lie on the same smooth piece.
    pub fn pool_pattern(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::MaxPool2 { argmax, .. } => Some(argmax.as_slice()),
                _ => None,
            })
            .flatten()
            .copied()
            .collect()
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() == tb.shape() {
            return ta.zip_map(tb, f);
        }
        let out_shape = broadcast_shape(ta.shape(), tb.shape())?;
        let sa = broadcast_strides(ta.shape(), &out_shape);
        let sb = broadcast_strides(tb.shape(), &out_shape);
        let (da, db) = (ta.data(), tb.data());
        let mut oa = Vec::with_capacity(numel(&out_shape));
        for_each_offset(&out_shape, &sa, |o| oa.push(o));
        let mut out = Vec::with_capacity(oa.len());
        let mut i = 0;
        for_each_offset(&out_shape, &sb, |o| {
            out.push(f(da[oa[i]], db[o]));
            i += 1;
        });
        Tensor::from_vec(&out_shape, out)
    }

    /// Broadcasting `a + b`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.broadcast_binary(a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    /// Broadcasting `a - b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.broadcast_binary(a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Broadcasting `a * b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.broadcast_binary(a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    /// `[..., M, K] x [K, N] -> [..., M, N]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ta, tw) = (self.value(a), self.value(w));
        if ta.rank() < 1 || tw.rank() != 2 || ta.shape()[ta.rank() - 1] != tw.shape()[0] {
            return Err(Error::shape(format!("matmul {:?} x {:?}", ta.shape(), tw.shape())));
        }
        let k = tw.shape()[0];
        let n = tw.shape()[1];
        let rows = ta.len() / k;
        let mut out = vec![S::zero(); rows * n];
        gemm_acc(ta.data(), tw.data(), &mut out, rows, k, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let v = Tensor::from_vec(&shape, out)?;
        Ok(self.push(v, Op::MatMul(a, w), &[a, w]))
    }

    /// Matrix product applied to every leading index: `[..., M, K] x [..., K, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ra = ta.rank();
        if ra < 2
            || tb.rank() != ra
            || ta.shape()[..ra - 2] != tb.shape()[..ra - 2]
            || ta.shape()[ra - 1] != tb.shape()[ra - 2]
        {
            return Err(Error::shape(format!("bmm {:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.shape()[ra - 2], ta.shape()[ra - 1], tb.shape()[ra - 1]);
        let batch = numel(&ta.shape()[..ra - 2]);
        let mut out = vec![S::zero(); batch * m * n];
        for i in 0..batch {
            gemm_acc(
                &ta.data()[i * m * k..(i + 1) * m * k],
                &tb.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = ta.shape().to_vec();
        shape[ra - 1] = n;
        let v = Tensor::from_vec(&shape, out)?;
        Ok(self.push(v, Op::Bmm(a, b), &[a, b]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let mut seen = vec![false; t.rank()];
        if axes.len() != t.rank() || axes.iter().any(|&x| x >= seen.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::shape(format!("bad permutation {axes:?} for {:?}", t.shape())));
        }
        let v = t.permute(axes);
        Ok(self.push(v, Op::Permute(a, axes.to_vec()), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = *t.shape().last().expect("softmax needs rank >= 1");
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let mut z = S::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let v = Tensor::from_vec(t.shape(), out).expect("same shape");
        self.push(v, Op::Softmax(a), &[a])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().ok_or_else(|| Error::shape("layer_norm on scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(format!(
                "layer_norm affine {:?}/{:?} vs feature dim {d}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let dn = S::from_usize_lossy(d);
        let rows = t.len() / d;
        let mut xhat = Vec::with_capacity(t.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(d) {
            let mean = row.iter().fold(S::zero(), |a, &v| a + v) / dn;
            let var = row.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) / dn;
            let r = S::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let v = Tensor::from_vec(t.shape(), out)?;
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a), &[a])
    }

    /// Stride-1 "same" convolution: `x [N, Cin, H, W]`, `w [Cout, Cin, K, K]`, `b [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.rank() != 4 || tw.rank() != 4 || tw.shape()[1] != tx.shape()[1] || tw.shape()[2] != tw.shape()[3] {
            return Err(Error::shape(format!("conv2d input {:?} weight {:?}", tx.shape(), tw.shape())));
        }
        let (n, ci, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (co, k) = (tw.shape()[0], tw.shape()[2]);
        if k % 2 == 0 || tb.shape() != [co] {
            return Err(Error::shape(format!("conv2d kernel {k} / bias {:?}", tb.shape())));
        }
        let pad = k / 2;
        let (xd, wdt, bd) = (tx.data(), tw.data(), tb.data());
        let mut out = vec![S::zero(); n * co * h * wd];
        for s in 0..n {
            for o in 0..co {
                let plane = &mut out[(s * co + o) * h * wd..(s * co + o + 1) * h * wd];
                plane.iter_mut().for_each(|v| *v = bd[o]);
                for c in 0..ci {
                    let xin = &xd[(s * ci + c) * h * wd..(s * ci + c + 1) * h * wd];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = wdt[((o * ci + c) * k + ky) * k + kx];
                            conv_tap(xin, plane, h, wd, ky, kx, pad, |p, xv| *p += wv * xv);
                        }
                    }
                }
            }
        }
        let v = Tensor::from_vec(&[n, co, h, wd], out)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, pad }, &[x, w, b]))
    }

    /// 2x2 max pooling with stride 2; trailing odd rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 4 || t.shape()[2] < 2 || t.shape()[3] < 2 {
            return Err(Error::shape(format!("max_pool2 input {:?}", t.shape())));
        }
        let (n, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let d = t.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * w + 2 * xx + dx;
                        if d[i] > d[best] {
                            best = i;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let v = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(v, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::shape(format!("mean axis {axis} of {:?}", t.shape())));
        }
        let outer = numel(&t.shape()[..axis]);
        let len = t.shape()[axis];
        let inner = numel(&t.shape()[axis + 1..]);
        let inv = S::one() / S::from_usize_lossy(len);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &t.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let v = Tensor::from_vec(&shape, out)?;
        Ok(self.push(v, Op::Mean(a, axis), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::Empty("concat".into()))?).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {axis} of {first:?}")));
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::shape(format!("concat {s:?} with {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let v = Tensor::from_vec(&shape, out)?;
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Picks `index` along `axis`, removing that axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() || index >= t.shape()[axis] {
            return Err(Error::shape(format!("select {index} on axis {axis} of {:?}", t.shape())));
        }
        let outer = numel(&t.shape()[..axis]);
        let len = t.shape()[axis];
        let inner = numel(&t.shape()[axis + 1..]);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * len + index) * inner;
            out.extend_from_slice(&t.data()[base..base + inner]);
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let v = Tensor::from_vec(&shape, out)?;
        Ok(self.push(v, Op::Select(a, axis, index), &[a]))
    }

    /// Mean of squared differences over all elements; returns a scalar node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!("mse {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let n = S::from_usize_lossy(ta.len());
        let s = ta.data().iter().zip(tb.data()).fold(S::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), &[a, b]))
    }

    /// Gradients of the scalar `root` with respect to every node that requires one.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(format!("backward from non-scalar {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), S::one()));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_reduced(*a, g, grads, |x| x);
                self.acc_reduced(*b, g, grads, |x| x);
            }
            Op::Sub(a, b) => {
                self.acc_reduced(*a, g, grads, |x| x);
                self.acc_reduced(*b, g, grads, |x| -x);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let prod = self.broadcast_product(g, *b);
                    self.acc_reduced(*a, &prod, grads, |x| x);
                }
                if self.needs(*b) {
                    let prod = self.broadcast_product(g, *a);
                    self.acc_reduced(*b, &prod, grads, |x| x);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, self.value(*a).shape(), |dst| {
                    for (d, &v) in dst.iter_mut().zip(g.data()) {
                        *d += v * c;
                    }
                });
            }
            Op::MatMul(a, w) => {
                let (ta, tw) = (self.value(*a), self.value(*w));
                let (k, n) = (tw.shape()[0], tw.shape()[1]);
                let rows = ta.len() / k;
                if self.needs(*a) {
                    accumulate(grads, *a, ta.shape(), |dst| gemm_nt_acc(g.data(), tw.data(), dst, rows, k, n));
                }
                if self.needs(*w) {
                    accumulate(grads, *w, tw.shape(), |dst| gemm_tn_acc(ta.data(), g.data(), dst, rows, k, n));
                }
            }
            Op::Bmm(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let r = ta.rank();
                let (m, k, n) = (ta.shape()[r - 2], ta.shape()[r - 1], tb.shape()[r - 1]);
                let batch = numel(&ta.shape()[..r - 2]);
                if self.needs(*a) {
                    accumulate(grads, *a, ta.shape(), |dst| {
                        for i in 0..batch {
                            gemm_nt_acc(
                                &g.data()[i * m * n..(i + 1) * m * n],
                                &tb.data()[i * k * n..(i + 1) * k * n],
                                &mut dst[i * m * k..(i + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
                if self.needs(*b) {
                    accumulate(grads, *b, tb.shape(), |dst| {
                        for i in 0..batch {
                            gemm_tn_acc(
                                &ta.data()[i * m * k..(i + 1) * m * k],
                                &g.data()[i * m * n..(i + 1) * m * n],
                                &mut dst[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let back = g.permute(&inverse);
                accumulate(grads, *a, back.shape(), |dst| add_into(dst, back.data()));
            }
            Op::Reshape(a) => {
                accumulate(grads, *a, self.value(*a).shape(), |dst| add_into(dst, g.data()));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let n = *y.shape().last().unwrap();
                accumulate(grads, *a, y.shape(), |dst| {
                    for ((yr, gr), dr) in y.data().chunks(n).zip(g.data().chunks(n)).zip(dst.chunks_mut(n)) {
                        let dot = yr.iter().zip(gr).fold(S::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, &[d], |dst| {
                        for (gr, hr) in g.data().chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                dst[j] += gr[j] * hr[j];
                            }
                        }
                    });
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, &[d], |dst| {
                        for gr in g.data().chunks(d) {
                            add_into(dst, gr);
                        }
                    });
                }
                if self.needs(*x) {
                    let dn = S::from_usize_lossy(d);
                    accumulate(grads, *x, g.shape(), |dst| {
                        for (((gr, hr), dr), &r) in g.data().chunks(d).zip(xhat.chunks(d)).zip(dst.chunks_mut(d)).zip(rstd) {
                            let mut sum_dh = S::zero();
                            let mut sum_dh_h = S::zero();
                            for j in 0..d {
                                let dh = gr[j] * gam[j];
                                sum_dh += dh;
                                sum_dh_h += dh * hr[j];
                            }
                            for j in 0..d {
                                let dh = gr[j] * gam[j];
                                dr[j] += r / dn * (dn * dh - sum_dh - hr[j] * sum_dh_h);
                            }
                        }
                    });
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                accumulate(grads, *a, x.shape(), |dst| {
                    for ((d, &xv), &gv) in dst.iter_mut().zip(x.data()).zip(g.data()) {
                        *d += gv * gelu_grad(xv);
                    }
                });
            }
            Op::Conv2d { x, w, b, pad } => self.conv2d_backward(*x, *w, *b, *pad, g, grads),
            Op::MaxPool2 { x, argmax } => {
                accumulate(grads, *x, self.value(*x).shape(), |dst| {
                    for (&i, &gv) in argmax.iter().zip(g.data()) {
                        dst[i] += gv;
                    }
                });
            }
            Op::Mean(a, axis) => {
                let t = self.value(*a);
                let outer = numel(&t.shape()[..*axis]);
                let len = t.shape()[*axis];
                let inner = numel(&t.shape()[*axis + 1..]);
                let inv = S::one() / S::from_usize_lossy(len);
                accumulate(grads, *a, t.shape(), |dst| {
                    for o in 0..outer {
                        let src = &g.data()[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            for (d, &v) in dst[(o * len + l) * inner..(o * len + l + 1) * inner].iter_mut().zip(src) {
                                *d += v * inv;
                            }
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let shape = g.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[*axis + 1..]);
                let total = shape[*axis] * inner;
                let mut start = 0;
                for p in parts {
                    let ps = self.value(*p).shape().to_vec();
                    let chunk = ps[*axis] * inner;
                    if self.needs(*p) {
                        accumulate(grads, *p, &ps, |dst| {
                            for o in 0..outer {
                                let src = &g.data()[o * total + start..o * total + start + chunk];
                                add_into(&mut dst[o * chunk..(o + 1) * chunk], src);
                            }
                        });
                    }
                    start += chunk;
                }
            }
            Op::Select(a, axis, index) => {
                let t = self.value(*a);
                let outer = numel(&t.shape()[..*axis]);
                let len = t.shape()[*axis];
                let inner = numel(&t.shape()[*axis + 1..]);
                accumulate(grads, *a, t.shape(), |dst| {
                    for o in 0..outer {
                        let base = (o * len + index) * inner;
                        add_into(&mut dst[base..base + inner], &g.data()[o * inner..(o + 1) * inner]);
                    }
                });
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let scale = S::lit(2.0) * g.item() / S::from_usize_lossy(ta.len());
                if self.needs(*a) {
                    accumulate(grads, *a, ta.shape(), |dst| {
                        for ((d, &x), &y) in dst.iter_mut().zip(ta.data()).zip(tb.data()) {
                            *d += scale * (x - y);
                        }
                    });
                }
                if self.needs(*b) {
                    accumulate(grads, *b, tb.shape(), |dst| {
                        for ((d, &x), &y) in dst.iter_mut().zip(ta.data()).zip(tb.data()) {
                            *d -= scale * (x - y);
                        }
                    });
                }
            }
        }
    }

    /// `g * other`, with `other` broadcast to `g`'s shape.
    fn broadcast_product(&self, g: &Tensor<S>, other: Var) -> Tensor<S> {
        let o = self.value(other);
        if o.shape() == g.shape() {
            return g.zip_map(o, |x, y| x * y).expect("same shape");
        }
        let st = broadcast_strides(o.shape(), g.shape());
        let mut out = Vec::with_capacity(g.len());
        let mut i = 0;
        for_each_offset(g.shape(), &st, |off| {
            out.push(g.data()[i] * o.data()[off]);
            i += 1;
        });
        Tensor::from_vec(g.shape(), out).expect("same shape")
    }

    /// Accumulates `g` into `target`, summing over broadcast axes.
    fn acc_reduced(&self, target: Var, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>], f: impl Fn(S) -> S) {
        if !self.needs(target) {
            return;
        }
        let shape = self.value(target).shape().to_vec();
        if shape == g.shape() {
            accumulate(grads, target, &shape, |dst| {
                for (d, &v) in dst.iter_mut().zip(g.data()) {
                    *d += f(v);
                }
            });
            return;
        }
        let st = broadcast_strides(&shape, g.shape());
        accumulate(grads, target, &shape, |dst| {
            let mut i = 0;
            for_each_offset(g.shape(), &st, |off| {
                dst[off] += f(g.data()[i]);
                i += 1;
            });
        });
    }

    fn conv2d_backward(&self, x: Var, w: Var, b: Var, pad: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, ci, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (co, k) = (tw.shape()[0], tw.shape()[2]);
        let plane = h * wd;
        if self.needs(b) {
            accumulate(grads, b, &[co], |dst| {
                for s in 0..n {
                    for o in 0..co {
                        let gp = &g.data()[(s * co + o) * plane..(s * co + o + 1) * plane];
                        dst[o] += gp.iter().fold(S::zero(), |a, &v| a + v);
                    }
                }
            });
        }
        if self.needs(w) {
            accumulate(grads, w, tw.shape(), |dst| {
                for s in 0..n {
                    for o in 0..co {
                        let gp = &g.data()[(s * co + o) * plane..(s * co + o + 1) * plane];
                        for c in 0..ci {
                            let xin = &tx.data()[(s * ci + c) * plane..(s * ci + c + 1) * plane];
                            for ky in 0..k {
                                for kx in 0..k {
                                    let mut acc = S::zero();
                                    conv_tap_read(xin, gp, h, wd, ky, kx, pad, |gv, xv| acc += gv * xv);
                                    dst[((o * ci + c) * k + ky) * k + kx] += acc;
                                }
                            }
                        }
                    }
                }
            });
        }
        if self.needs(x) {
            accumulate(grads, x, tx.shape(), |dst| {
                for s in 0..n {
                    for o in 0..co {
                        let gp = &g.data()[(s * co + o) * plane..(s * co + o + 1) * plane];
                        for c in 0..ci {
                            let dx = &mut dst[(s * ci + c) * plane..(s * ci + c + 1) * plane];
                            for ky in 0..k {
                                for kx in 0..k {
                                    let wv = tw.data()[((o * ci + c) * k + ky) * k + kx];
                                    conv_tap_scatter(dx, gp, h, wd, ky, kx, pad, wv);
                                }
                            }
                        }
                    }
                }
            });
        }
    }
}

/// Valid output range along one axis for kernel offset `kk` with padding `pad`.
#[inline]
fn tap_range(len: usize, kk: usize, pad: usize) -> (usize, usize) {
    // input index = out + kk - pad must lie in [0, len)
    let lo = pad.saturating_sub(kk);
    let hi = (len + pad).saturating_sub(kk).min(len);
    (lo, hi.max(lo))
}

/// For each output pixel `p` whose tap `(ky, kx)` lands inside the input,
/// calls `f(&mut out[p], x[p + offset])`.
#[inline]
#[allow(clippy::too_many_arguments)]
fn conv_tap<S: Scalar>(
    x: &[S],
    out: &mut [S],
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    pad: usize,
    mut f: impl FnMut(&mut S, S),
) {
    let (y0, y1) = tap_range(h, ky, pad);
    let (x0, x1) = tap_range(w, kx, pad);
    for y in y0..y1 {
        let iy = y + ky - pad;
        let orow = &mut out[y * w..(y + 1) * w];
        let irow = &x[iy * w..(iy + 1) * w];
        for xx in x0..x1 {
            f(&mut orow[xx], irow[xx + kx - pad]);
        }
    }
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn conv_tap_read<S: Scalar>(
    x: &[S],
    gout: &[S],
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    pad: usize,
    mut f: impl FnMut(S, S),
) {
    let (y0, y1) = tap_range(h, ky, pad);
    let (x0, x1) = tap_range(w, kx, pad);
    for y in y0..y1 {
        let iy = y + ky - pad;
        for xx in x0..x1 {
            f(gout[y * w + xx], x[iy * w + xx + kx - pad]);
        }
    }
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn conv_tap_scatter<S: Scalar>(dx: &mut [S], gout: &[S], h: usize, w: usize, ky: usize, kx: usize, pad: usize, wv: S) {
    let (y0, y1) = tap_range(h, ky, pad);
    let (x0, x1) = tap_range(w, kx, pad);
    for y in y0..y1 {
        let iy = y + ky - pad;
        for xx in x0..x1 {
            dx[iy * w + xx + kx - pad] += wv * gout[y * w + xx];
        }
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, shape: &[usize], f: impl FnOnce(&mut [S])) {
    let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
    f(slot.data_mut());
}
