//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Every operation appends a node to a [`Graph`]; [`Graph::backward`] walks
//! the tape in reverse and accumulates gradients for every node that
//! transitively depends on a leaf created with `requires_grad = true`.
//! Attention is exposed as two fused ops, `attn_probs` and `attn_apply`, so
//! probability maps are first-class nodes that losses can differentiate
//! through.

use std::rc::Rc;

use crate::tensor::{gemm, Layout, Tensor};

/// Index sentinel for [`Graph::gather`]: the output element is zero.
pub const GATHER_ZERO: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Gather(Var, Rc<[u32]>),
    Reshape(Var),
    Concat(Vec<Var>),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    Silu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis {
        x: Var,
        axis: usize,
        inner: usize,
    },
    MaxNormRows {
        x: Var,
        argmax: Vec<usize>,
        denom: Vec<f64>,
    },
    AttnProbs {
        q: Var,
        k: Var,
        heads: usize,
        scale: f64,
    },
    AttnApply {
        p: Var,
        v: Var,
        heads: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn grad_buf<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        va.zip_map(vb, f).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// `x[..., n] + b[n]`, broadcasting `b` over every leading index.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let n = self.value(b).len();
        let vx = self.value(x);
        assert_eq!(*vx.shape().last().unwrap(), n, "add_row width mismatch");
        let vb = self.value(b).data();
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(vb) {
                *o += bb;
            }
        }
        self.push(out, Op::AddRow(x, b), &[x, b])
    }

    /// `x[..., k] · w[k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vw.shape().len(), 2, "matmul weight must be 2-D");
        let (k, n) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(*vx.shape().last().unwrap(), k, "matmul inner mismatch");
        let m = vx.len() / k;
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            vx.data(),
            Layout::rows(0, k),
            vw.data(),
            Layout::rows(0, n),
            &mut out,
            Layout::rows(0, n),
            0.0,
        );
        self.push(Tensor::from_parts(shape, out), Op::MatMul(x, w), &[x, w])
    }

    /// `out[i] = x[index[i]]` (or 0 for [`GATHER_ZERO`]) over flattened data.
    pub fn gather(&mut self, x: Var, index: Rc<[u32]>, shape: &[usize]) -> Var {
        assert_eq!(shape.iter().product::<usize>(), index.len());
        let src = self.value(x).data();
        let data = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i as usize] })
            .collect();
        self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Gather(x, index),
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self
            .value(x)
            .clone()
            .reshape(shape)
            .expect("reshape element count");
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Concatenate along the outermost axis.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let inner = self.value(xs[0]).shape()[1..].to_vec();
        let mut outer = 0;
        let mut data = Vec::new();
        for &x in xs {
            let v = self.value(x);
            assert_eq!(&v.shape()[1..], &inner[..], "concat inner mismatch");
            outer += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![outer];
        shape.extend(inner);
        self.push(
            Tensor::from_parts(shape, data),
            Op::Concat(xs.to_vec()),
            xs,
        )
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let n = *out.shape().last().unwrap();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Normalization over the last axis without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let mut out = self.value(x).clone();
        let n = *out.shape().last().unwrap();
        let mut inv_std = Vec::with_capacity(out.len() / n);
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv_std.push(s);
        }
        self.push(out, Op::LayerNorm(x, inv_std), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v / (1.0 + (-v).exp()));
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(out, Op::Mean(x), &[x])
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let v = self.value(x);
        let shape = v.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let src = v.data();
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        for o in out.iter_mut() {
            *o /= len as f64;
        }
        let mut new_shape = shape.to_vec();
        new_shape.remove(axis);
        self.push(
            Tensor::from_parts(new_shape, out),
            Op::MeanAxis {
                x,
                axis: len,
                inner,
            },
            &[x],
        )
    }

    /// Divide each last-axis row by `max(row) + eps`.
    pub fn max_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let mut out = self.value(x).clone();
        let n = *out.shape().last().unwrap();
        let mut argmax = Vec::with_capacity(out.len() / n);
        let mut denom = Vec::with_capacity(out.len() / n);
        for row in out.data_mut().chunks_mut(n) {
            let (idx, &mx) = row
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |best, cur| {
                    if *cur.1 > *best.1 {
                        cur
                    } else {
                        best
                    }
                });
            let d = mx + eps;
            for v in row.iter_mut() {
                *v /= d;
            }
            argmax.push(idx);
            denom.push(d);
        }
        self.push(
            out,
            Op::MaxNormRows {
                x,
                argmax,
                denom,
            },
            &[x],
        )
    }

    /// Multi-head scaled dot-product attention probabilities.
    ///
    /// `q: [B, Lq, D]`, `k: [B, Lk, D]` → `[B, H, Lq, Lk]`, rows softmaxed.
    pub fn attn_probs(&mut self, q: Var, k: Var, heads: usize) -> Var {
        let (vq, vk) = (self.value(q), self.value(k));
        let (b, lq, d) = dims3(vq.shape());
        let (bk, lk, dk) = dims3(vk.shape());
        assert_eq!((b, d), (bk, dk), "attention q/k mismatch");
        assert_eq!(d % heads, 0, "width not divisible by heads");
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = vec![0.0; b * heads * lq * lk];
        for bi in 0..b {
            for h in 0..heads {
                let o = (bi * heads + h) * lq * lk;
                gemm(
                    lq,
                    hd,
                    lk,
                    vq.data(),
                    Layout::rows(bi * lq * d + h * hd, d),
                    vk.data(),
                    Layout::transposed(bi * lk * d + h * hd, d),
                    &mut out,
                    Layout::rows(o, lk),
                    0.0,
                );
            }
        }
        for row in out.chunks_mut(lk.max(1)) {
            for v in row.iter_mut() {
                *v *= scale;
            }
            softmax_in_place(row);
        }
        self.push(
            Tensor::from_parts(vec![b, heads, lq, lk], out),
            Op::AttnProbs { q, k, heads, scale },
            &[q, k],
        )
    }

    /// `p: [B, H, Lq, Lk]`, `v: [B, Lk, D]` → `[B, Lq, D]` with heads
    /// occupying contiguous channel slices.
    pub fn attn_apply(&mut self, p: Var, v: Var) -> Var {
        let (vp, vv) = (self.value(p), self.value(v));
        let s = vp.shape();
        let (b, heads, lq, lk) = (s[0], s[1], s[2], s[3]);
        let (bv, lkv, d) = dims3(vv.shape());
        assert_eq!((b, lk), (bv, lkv), "attention p/v mismatch");
        let hd = d / heads;
        let mut out = vec![0.0; b * lq * d];
        for bi in 0..b {
            for h in 0..heads {
                gemm(
                    lq,
                    lk,
                    hd,
                    vp.data(),
                    Layout::rows((bi * heads + h) * lq * lk, lk),
                    vv.data(),
                    Layout::rows(bi * lk * d + h * hd, d),
                    &mut out,
                    Layout::rows(bi * lq * d + h * hd, d),
                    0.0,
                );
            }
        }
        self.push(
            Tensor::from_parts(vec![b, lq, d], out),
            Op::AttnApply { p, v, heads },
            &[p, v],
        )
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl Fn(usize) -> f64) {
        if !self.wants(v) {
            return;
        }
        let buf = grad_buf(grads, v, self.shape(v));
        for (i, slot) in buf.data_mut().iter_mut().enumerate() {
            *slot += f(i);
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |i| gd[i]);
                self.accumulate(grads, *b, |i| gd[i]);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |i| gd[i]);
                self.accumulate(grads, *b, |i| -gd[i]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |i| gd[i] * vb[i]);
                self.accumulate(grads, *b, |i| gd[i] * va[i]);
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, |i| gd[i] * s),
            Op::AddScalar(a) => self.accumulate(grads, *a, |i| gd[i]),
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, |i| gd[i]);
                if self.wants(*b) {
                    let n = self.value(*b).len();
                    let buf = grad_buf(grads, *b, self.shape(*b));
                    for row in gd.chunks(n) {
                        for (o, &r) in buf.data_mut().iter_mut().zip(row) {
                            *o += r;
                        }
                    }
                }
            }
            Op::MatMul(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (k, n) = (vw.shape()[0], vw.shape()[1]);
                let m = vx.len() / k;
                if self.wants(*x) {
                    let buf = grad_buf(grads, *x, vx.shape());
                    gemm(
                        m,
                        n,
                        k,
                        gd,
                        Layout::rows(0, n),
                        vw.data(),
                        Layout::transposed(0, n),
                        buf.data_mut(),
                        Layout::rows(0, k),
                        1.0,
                    );
                }
                if self.wants(*w) {
                    let buf = grad_buf(grads, *w, vw.shape());
                    gemm(
                        k,
                        m,
                        n,
                        vx.data(),
                        Layout::transposed(0, k),
                        gd,
                        Layout::rows(0, n),
                        buf.data_mut(),
                        Layout::rows(0, n),
                        1.0,
                    );
                }
            }
            Op::Gather(x, index) => {
                if self.wants(*x) {
                    let buf = grad_buf(grads, *x, self.shape(*x));
                    let dst = buf.data_mut();
                    for (i, &src) in index.iter().enumerate() {
                        if src != GATHER_ZERO {
                            dst[src as usize] += gd[i];
                        }
                    }
                }
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |i| gd[i]),
            Op::Concat(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    self.accumulate(grads, x, |i| gd[offset + i]);
                    offset += n;
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                softmax_backward(y, gd, n, &mut dx);
                self.accumulate(grads, *x, |i| dx[i]);
            }
            Op::LayerNorm(x, inv_std) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for (r, s) in inv_std.iter().enumerate() {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &gd[r * n..(r + 1) * n];
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[r * n + j] = s * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                self.accumulate(grads, *x, |i| dx[i]);
            }
            Op::Silu(x) => {
                let vx = self.value(*x).data();
                self.accumulate(grads, *x, |i| {
                    let sg = 1.0 / (1.0 + (-vx[i]).exp());
                    gd[i] * (sg * (1.0 + vx[i] * (1.0 - sg)))
                });
            }
            Op::Square(x) => {
                let vx = self.value(*x).data();
                self.accumulate(grads, *x, |i| 2.0 * vx[i] * gd[i]);
            }
            Op::Sum(x) => self.accumulate(grads, *x, |_| gd[0]),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.accumulate(grads, *x, |_| gd[0] / n);
            }
            Op::MeanAxis {
                x,
                axis,
                inner,
            } => {
                let (len, inner) = (*axis, *inner);
                self.accumulate(grads, *x, |i| {
                    let o = i / (len * inner);
                    let j = i % inner;
                    gd[o * inner + j] / len as f64
                });
            }
            Op::MaxNormRows {
                x,
                argmax,
                denom,
            } => {
                let vx = self.value(*x).data();
                let n = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; vx.len()];
                for (r, (&am, &d)) in argmax.iter().zip(denom).enumerate() {
                    let base = r * n;
                    let mut dot = 0.0;
                    for j in 0..n {
                        dx[base + j] = gd[base + j] / d;
                        dot += gd[base + j] * vx[base + j];
                    }
                    dx[base + am] -= dot / (d * d);
                }
                self.accumulate(grads, *x, |i| dx[i]);
            }
            Op::AttnProbs { q, k, heads, scale } => {
                let (vq, vk) = (self.value(*q), self.value(*k));
                let (b, lq, d) = dims3(vq.shape());
                let lk = vk.shape()[1];
                let hd = d / heads;
                let p = node.value.data();
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)) · scale
                let mut ds = vec![0.0; p.len()];
                softmax_backward(p, gd, lk, &mut ds);
                for v in ds.iter_mut() {
                    *v *= scale;
                }
                let want_q = self.wants(*q);
                let want_k = self.wants(*k);
                if want_q {
                    let buf = grad_buf(grads, *q, vq.shape());
                    for bi in 0..b {
                        for h in 0..*heads {
                            gemm(
                                lq,
                                lk,
                                hd,
                                &ds,
                                Layout::rows((bi * heads + h) * lq * lk, lk),
                                vk.data(),
                                Layout::rows(bi * lk * d + h * hd, d),
                                buf.data_mut(),
                                Layout::rows(bi * lq * d + h * hd, d),
                                1.0,
                            );
                        }
                    }
                }
                if want_k {
                    let buf = grad_buf(grads, *k, vk.shape());
                    for bi in 0..b {
                        for h in 0..*heads {
                            gemm(
                                lk,
                                lq,
                                hd,
                                &ds,
                                Layout::transposed((bi * heads + h) * lq * lk, lk),
                                vq.data(),
                                Layout::rows(bi * lq * d + h * hd, d),
                                buf.data_mut(),
                                Layout::rows(bi * lk * d + h * hd, d),
                                1.0,
                            );
                        }
                    }
                }
            }
            Op::AttnApply { p, v, heads } => {
                let (vp, vv) = (self.value(*p), self.value(*v));
                let s = vp.shape();
                let (b, lq, lk) = (s[0], s[2], s[3]);
                let d = vv.shape()[2];
                let hd = d / heads;
                if self.wants(*p) {
                    let buf = grad_buf(grads, *p, vp.shape());
                    for bi in 0..b {
                        for h in 0..*heads {
                            gemm(
                                lq,
                                hd,
                                lk,
                                gd,
                                Layout::rows(bi * lq * d + h * hd, d),
                                vv.data(),
                                Layout::transposed(bi * lk * d + h * hd, d),
                                buf.data_mut(),
                                Layout::rows((bi * heads + h) * lq * lk, lk),
                                1.0,
                            );
                        }
                    }
                }
                if self.wants(*v) {
                    let buf = grad_buf(grads, *v, vv.shape());
                    for bi in 0..b {
                        for h in 0..*heads {
                            gemm(
                                lk,
                                lq,
                                hd,
                                vp.data(),
                                Layout::transposed((bi * heads + h) * lq * lk, lk),
                                gd,
                                Layout::rows(bi * lq * d + h * hd, d),
                                buf.data_mut(),
                                Layout::rows(bi * lk * d + h * hd, d),
                                1.0,
                            );
                        }
                    }
                }
            }
        }
    }
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected a 3-D tensor, got {shape:?}");
    (shape[0], shape[1], shape[2])
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn softmax_backward(y: &[f64], gy: &[f64], n: usize, dx: &mut [f64]) {
    for ((yr, gr), dr) in y.chunks(n).zip(gy.chunks(n)).zip(dx.chunks_mut(n)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..n {
            dr[j] = yr[j] * (gr[j] - dot);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(loss)/d(leaf) for a graph builder.
    fn check_grad(build: impl Fn(&mut Graph, Var) -> Var, input: Tensor) {
        let mut g = Graph::new();
        let x = g.leaf(input.clone(), true);
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.get(x).unwrap().clone();
        let h = 1e-6;
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut t = input.clone();
                t.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.leaf(t, false);
                let l = build(&mut g, x);
                g.value(l).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - fd).abs() / (a.abs().max(fd.abs()).max(1e-6));
            assert!(err < 1e-5, "element {i}: analytic {a} vs fd {fd}");
        }
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn gradients_of_elementwise_and_norm_ops() {
        let w = rand(&[4, 3], 1);
        check_grad(
            move |g, x| {
                let wv = g.constant(w.clone());
                let y = g.layer_norm(x, 1e-5);
                let y = g.matmul(y, wv);
                let y = g.silu(y);
                let s = g.softmax(y);
                let sq = g.square(s);
                g.mean(sq)
            },
            rand(&[2, 4], 2),
        );
    }

    #[test]
    fn gradients_of_attention_ops() {
        let kv = rand(&[2, 5, 4], 3);
        check_grad(
            move |g, q| {
                let k = g.constant(kv.clone());
                let p = g.attn_probs(q, k, 2);
                let o = g.attn_apply(p, q);
                let sq = g.square(o);
                g.sum(sq)
            },
            rand(&[2, 5, 4], 4),
        );
        let q0 = rand(&[1, 3, 4], 5);
        check_grad(
            move |g, k| {
                let q = g.constant(q0.clone());
                let p = g.attn_probs(q, k, 1);
                let p = g.mean_axis(p, 1);
                let m = g.max_norm_rows(p, 1e-8);
                let sq = g.square(m);
                g.sum(sq)
            },
            rand(&[1, 6, 4], 6),
        );
    }

    #[test]
    fn gradients_of_structural_ops() {
        check_grad(
            |g, x| {
                let idx: Rc<[u32]> = vec![5, 0, GATHER_ZERO, 2, 2, 1].into();
                let y = g.gather(x, idx, &[2, 3]);
                let c = g.concat(&[y, y]);
                let b = g.constant(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
                let z = g.add_row(c, b);
                let z = g.mul(z, z);
                let z = g.scale(z, 0.3);
                g.sum(z)
            },
            rand(&[6], 7),
        );
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut g = Graph::new();
        let q = g.constant(rand(&[3, 4, 8], 8));
        let k = g.constant(rand(&[3, 7, 8], 9));
        let p = g.attn_probs(q, k, 4);
        for row in g.value(p).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
