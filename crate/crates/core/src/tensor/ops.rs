//! Differentiable operations: forward constructors on [`Tape`] and their
//! vector-Jacobian products.

use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::tape::{Op, Tape, Unary, Var};
use super::{numel, Element, SelectionIndex, Tensor};
use crate::error::{Error, Result};
use crate::par;

const NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Source offset for every element of `out_shape`, walking with `src_strides`.
fn strided_offsets(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n = numel(out_shape);
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::dim(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::dim(op, a, b)),
        })
        .collect()
}

fn broadcast_offsets(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let mut s = strides(inp);
    for (st, (&o, &i)) in s.iter_mut().zip(out.iter().zip(inp)) {
        if i == 1 && o != 1 {
            *st = 0;
        }
    }
    strided_offsets(out, &s)
}

/// Sums `g` (shaped `out`) down to shape `inp`.
fn reduce_to<T: Element>(g: &[T], out: &[usize], inp: &[usize]) -> Vec<T> {
    if out == inp {
        return g.to_vec();
    }
    let mut r = vec![T::zero(); numel(inp)];
    for (gi, off) in g.iter().zip(broadcast_offsets(out, inp)) {
        r[off] = r[off] + *gi;
    }
    r
}

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
}

fn unary_forward<T: Element>(kind: Unary, x: T) -> T {
    match kind {
        Unary::Sigmoid => T::one() / (T::one() + (-x).exp()),
        Unary::Gelu => {
            let u = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
            T::c(0.5) * x * (T::one() + u.tanh())
        }
        Unary::Relu6 => x.max(T::zero()).min(T::c(6.0)),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
    }
}

fn unary_derivative<T: Element>(kind: Unary, x: T, y: T) -> T {
    match kind {
        Unary::Sigmoid => y * (T::one() - y),
        Unary::Gelu => {
            let u = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
            let t = u.tanh();
            T::c(0.5) * (T::one() + t)
                + T::c(0.5) * x * (T::one() - t * t) * T::c(GELU_C) * (T::one() + T::c(3.0 * GELU_A) * x * x)
        }
        Unary::Relu6 => {
            if x > T::zero() && x < T::c(6.0) {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::Exp => y,
        Unary::Log => T::one() / x,
    }
}

fn matmul_dims(op: &'static str, a: &[usize], b: &[usize], trans_b: bool) -> Result<(usize, usize, usize, usize)> {
    let (batch, m, k, bb, bk, bn) = match (a, b) {
        ([m, k], [r, c]) => (1, *m, *k, 1, *r, *c),
        ([ba, m, k], [bb, r, c]) => (*ba, *m, *k, *bb, *r, *c),
        _ => return Err(Error::dim(op, a, b)),
    };
    let (inner, n) = if trans_b { (bn, bk) } else { (bk, bn) };
    if batch != bb || inner != k {
        return Err(Error::dim(op, a, b));
    }
    Ok((batch, m, k, n))
}

fn norm_forward<T: Element>(x: &[T], rows: usize, len: usize) -> (Vec<T>, Vec<(T, T)>) {
    let mut out = vec![T::zero(); x.len()];
    let mut stats = Vec::with_capacity(rows);
    let n = T::c(len as f64);
    for r in 0..rows {
        let row = &x[r * len..(r + 1) * len];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + T::c(NORM_EPS)).sqrt();
        for (o, &v) in out[r * len..(r + 1) * len].iter_mut().zip(row) {
            *o = (v - mean) * rstd;
        }
        stats.push((mean, rstd));
    }
    (out, stats)
}

/// Backward of a row normalization; `gscale(r)` is the affine scale feeding row `r`.
fn norm_backward<T: Element>(
    x: &[T],
    g: &[T],
    len: usize,
    stats: &[(T, T)],
    gscale: impl Fn(usize) -> T,
) -> (Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dscale = vec![T::zero(); x.len()];
    let n = T::c(len as f64);
    for (r, &(mean, rstd)) in stats.iter().enumerate() {
        let xs = &x[r * len..(r + 1) * len];
        let gs = &g[r * len..(r + 1) * len];
        let s = gscale(r);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for (&xv, &gv) in xs.iter().zip(gs) {
            let xhat = (xv - mean) * rstd;
            let dy = gv * s;
            sum_dy = sum_dy + dy;
            sum_dy_xhat = sum_dy_xhat + dy * xhat;
        }
        for i in 0..len {
            let xhat = (xs[i] - mean) * rstd;
            let dy = gs[i] * s;
            dx[r * len + i] = rstd * (dy - sum_dy / n - xhat * sum_dy_xhat / n);
            dscale[r * len + i] = gs[i] * xhat;
        }
    }
    (dx, dscale)
}

impl<T: Element> Tape<T> {
    fn binary(&mut self, a: Var, b: Var, kind: Bin) -> Result<Var> {
        let name = match kind {
            Bin::Add => "add",
            Bin::Sub => "sub",
            Bin::Mul => "mul",
        };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let f = |x: T, y: T| match kind {
            Bin::Add => x + y,
            Bin::Sub => x - y,
            Bin::Mul => x * y,
        };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let oa = broadcast_offsets(&out_shape, &sa);
            let ob = broadcast_offsets(&out_shape, &sb);
            oa.iter().zip(&ob).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        let needs = self.needs(a) || self.needs(b);
        let op = match kind {
            Bin::Add => Op::Add(a, b),
            Bin::Sub => Op::Sub(a, b),
            Bin::Mul => Op::Mul(a, b),
        };
        Ok(self.push(Tensor::from_parts(out_shape, data), op, needs))
    }

    /// Elementwise sum; singleton dimensions broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Sub)
    }

    /// Elementwise product; singleton dimensions broadcast.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::c(s);
        let v = self.value(a);
        let data = v.data().iter().map(|&x| x * s).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), data);
        let needs = self.needs(a);
        self.push(t, Op::Scale(a, s), needs)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::c(s);
        let v = self.value(a);
        let data = v.data().iter().map(|&x| x + s).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), data);
        let needs = self.needs(a);
        self.push(t, Op::AddScalar(a), needs)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| unary_forward(kind, x)).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), data);
        let needs = self.needs(a);
        self.push(t, Op::Unary(a, kind), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn relu6(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu6)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<T>() / T::c(v.len() as f64);
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if numel(shape) != v.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", v.shape(), shape));
        }
        let t = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        let needs = self.needs(a);
        Ok(self.push(t, Op::Reshape(a), needs))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", &shape, perm));
        }
        let src = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let st: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
        let v = self.value(a).data();
        let data = strided_offsets(&out_shape, &st).into_iter().map(|o| v[o]).collect();
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Permute(a, perm.to_vec()), needs))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = matmul_dims("matmul", &sa, &sb, trans_b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        par::for_each_chunk_mut(&mut out, m * n, batch * m * n * k, |bi, c| {
            let a_s = &va[bi * m * k..(bi + 1) * m * k];
            let b_s = &vb[bi * k * n..(bi + 1) * k * n];
            if trans_b {
                kernels::gemm_nt(m, k, n, a_s, b_s, c);
            } else {
                kernels::gemm_nn(m, k, n, a_s, b_s, c);
            }
        });
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, trans_b }, needs))
    }

    /// Matrix product of rank-2 operands, or batched over a shared leading axis for rank 3.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` (last two axes of `b` swapped).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// Softmax along `axis`, computed with max subtraction.
    /// Fused scaled dot-product attention over `(G, N, D)` operands:
    /// `softmax(scale·q·kᵀ)·v` per group, without materializing the scores
    /// as separate tape nodes.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        let [g, n, d] = shape[..] else {
            return Err(Error::dim("attention", &shape, &[0, 0, 0]));
        };
        if self.shape(k) != &shape[..] || self.shape(v) != &shape[..] {
            return Err(Error::dim("attention", &shape, self.shape(k)));
        }
        let scale = T::c(scale);
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let parts = par::map_indices(g, g * n * n * d * 2, |i| {
            let r = i * n * d..(i + 1) * n * d;
            let mut p = vec![T::zero(); n * n];
            let mut y = vec![T::zero(); n * d];
            kernels::attention_forward(n, d, scale, &qv[r.clone()], &kv[r.clone()], &vv[r], &mut p, &mut y);
            (p, y)
        });
        let mut probs = Vec::with_capacity(g * n * n);
        let mut out = Vec::with_capacity(g * n * d);
        for (p, y) in parts {
            probs.extend_from_slice(&p);
            out.extend_from_slice(&y);
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Attention { q, k, v, scale, probs }, needs))
    }

    /// `(G, N, N)` weights of a node produced by [`attention`](Self::attention).
    pub fn attention_weights(&self, y: Var) -> Option<Tensor<T>> {
        match &self.nodes[y.0].op {
            Op::Attention { probs, .. } => {
                let [g, n, _] = self.shape(y)[..] else { return None };
                Some(Tensor::from_parts(vec![g, n, n], probs.clone()))
            }
            _ => None,
        }
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!("softmax axis {axis} invalid for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut y = vec![T::zero(); x.len()];
        if inner == 1 {
            par::for_each_chunk_mut(&mut y, len, x.len() * 8, |o, row| {
                kernels::softmax_row(&x[o * len..(o + 1) * len], row);
            });
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mx = (0..len).map(|j| x[base + j * inner]).fold(T::neg_infinity(), T::max);
                    let mut s = T::zero();
                    for j in 0..len {
                        let e = (x[base + j * inner] - mx).exp();
                        y[base + j * inner] = e;
                        s = s + e;
                    }
                    for j in 0..len {
                        y[base + j * inner] = y[base + j * inner] / s;
                    }
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape, y), Op::Softmax(a, axis), needs))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("rank >= 1");
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("layer_norm", &shape, self.shape(gamma)));
        }
        let rows = numel(&shape) / c;
        let (mut y, stats) = norm_forward(self.value(x).data(), rows, c);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        for row in y.chunks_exact_mut(c) {
            for ((v, &g), &b) in row.iter_mut().zip(gv).zip(bv) {
                *v = *v * g + b;
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Tensor::from_parts(shape, y), Op::LayerNorm { x, gamma, beta, stats }, needs))
    }

    /// Per-sample normalization over all of `(C, H, W)` of a `(B, C, H, W)`
    /// map (one group), followed by a per-channel affine. Channel means are
    /// kept relative to each other, so a later spatial average still carries
    /// information.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [b, c, h, w] = shape[..] else {
            return Err(Error::dim("channel_norm", &shape, &[0, 0, 0, 0]));
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("channel_norm", &shape, self.shape(gamma)));
        }
        let plane = h * w;
        let (mut y, stats) = norm_forward(self.value(x).data(), b, c * plane);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        for (r, row) in y.chunks_exact_mut(plane).enumerate() {
            let (g, s) = (gv[r % c], bv[r % c]);
            row.iter_mut().for_each(|v| *v = *v * g + s);
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Tensor::from_parts(shape, y), Op::ChannelNorm { x, gamma, beta, stats }, needs))
    }

    fn conv_geom(&self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize, groups: usize) -> Result<(ConvGeom, usize, usize)> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let ([b, cin, h, wd], [cout, cin_g, kh, kw]) = (sx, sw) else {
            return Err(Error::dim("conv2d", sx, sw));
        };
        if groups == 0 || stride == 0 || cin % groups != 0 || cout % groups != 0 || cin_g * groups != *cin {
            return Err(Error::dim("conv2d", sx, sw));
        }
        if h + 2 * padding < *kh || wd + 2 * padding < *kw {
            return Err(Error::dim("conv2d", sx, sw));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [*cout] {
                return Err(Error::dim("conv2d bias", self.shape(bv), &[*cout]));
            }
        }
        let g = ConvGeom { channels: *cin_g, height: *h, width: *wd, kh: *kh, kw: *kw, stride, padding };
        Ok((g, *b, *cout))
    }

    /// Grouped 2-D cross-correlation of `(B, Cin, H, W)` with `(Cout, Cin/groups, kh, kw)`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let (g, batch, cout) = self.conv_geom(x, w, bias, stride, padding, groups)?;
        let (oh, ow) = (g.out_h(), g.out_w());
        let plane = oh * ow;
        let cout_g = cout / groups;
        let in_sample = g.channels * groups * g.height * g.width;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = bias.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); batch * cout * plane];
        let depthwise = g.channels == 1 && cout_g == 1;
        let work = batch * cout * plane * g.patch_len();
        par::for_each_chunk_mut(&mut out, cout * plane, work, |bi, o| {
            let xs = &xv[bi * in_sample..(bi + 1) * in_sample];
            if depthwise {
                let dg = ConvGeom { channels: groups, ..g };
                kernels::depthwise_forward(&dg, xs, wv, o);
            } else {
                let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.patch_len() * plane] };
                let x_group = g.channels * g.height * g.width;
                for gi in 0..groups {
                    let xg = &xs[gi * x_group..(gi + 1) * x_group];
                    let colsr: &[T] = if g.is_pointwise() {
                        xg
                    } else {
                        kernels::im2col(&g, xg, &mut cols);
                        &cols
                    };
                    let wg = &wv[gi * cout_g * g.patch_len()..(gi + 1) * cout_g * g.patch_len()];
                    let og = &mut o[gi * cout_g * plane..(gi + 1) * cout_g * plane];
                    kernels::gemm_nn(cout_g, g.patch_len(), plane, wg, colsr, og);
                }
            }
            if let Some(bv) = bv {
                for (c, row) in o.chunks_exact_mut(plane).enumerate() {
                    row.iter_mut().for_each(|v| *v = *v + bv[c]);
                }
            }
        });
        let needs = self.needs(x) || self.needs(w) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor::from_parts(vec![batch, cout, oh, ow], out),
            Op::Conv2d { x, w, bias, stride, padding, groups },
            needs,
        ))
    }

    /// Mean over each `window × window` patch, stepping by `stride`.
    pub fn avg_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [b, c, h, w] = shape[..] else {
            return Err(Error::dim("avg_pool2d", &shape, &[window, window]));
        };
        if window == 0 || stride == 0 || window > h || window > w {
            return Err(Error::dim("avg_pool2d", &shape, &[window, window]));
        }
        let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let xv = self.value(x).data();
        let inv = T::one() / T::c((window * window) as f64);
        let mut out = vec![T::zero(); b * c * oh * ow];
        for (p, o) in out.chunks_exact_mut(oh * ow).enumerate() {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = T::zero();
                    for dy in 0..window {
                        for dx in 0..window {
                            s = s + src[(oy * stride + dy) * w + ox * stride + dx];
                        }
                    }
                    o[oy * ow + ox] = s * inv;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![b, c, oh, ow], out), Op::AvgPool2d { x, window, stride }, needs))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [b, c, h, w] = shape[..] else {
            return Err(Error::dim("upsample_nearest", &shape, &[factor]));
        };
        if factor == 0 {
            return Err(Error::dim("upsample_nearest", &shape, &[factor]));
        }
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * c * oh * ow];
        for (p, o) in out.chunks_exact_mut(oh * ow).enumerate() {
            for y in 0..oh {
                for xo in 0..ow {
                    o[y * ow + xo] = xv[p * h * w + (y / factor) * w + xo / factor];
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![b, c, oh, ow], out), Op::Upsample { x, factor }, needs))
    }

    /// `(B, C, H, W) → (B, C)` mean over spatial positions.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [b, c, h, w] = shape[..] else {
            return Err(Error::dim("spatial_mean", &shape, &[]));
        };
        let inv = T::one() / T::c((h * w) as f64);
        let out = self
            .value(x)
            .data()
            .chunks_exact(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![b, c], out), Op::SpatialMean(x), needs))
    }

    /// Collects the channel vectors at selected positions: `(B, C, H, W) → (B, K, C)`.
    pub fn gather(&mut self, x: Var, sel: Arc<SelectionIndex>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [b, c, h, w] = shape[..] else {
            return Err(Error::dim("gather", &shape, &[]));
        };
        sel.check_against(b, h * w, "gather")?;
        let k = sel.k();
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * k * c];
        for (bi, idx) in sel.iter().enumerate() {
            for (ki, &p) in idx.iter().enumerate() {
                for ci in 0..c {
                    out[(bi * k + ki) * c + ci] = xv[(bi * c + ci) * hw + p];
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![b, k, c], out), Op::Gather { x, sel }, needs))
    }

    /// Writes `(B, K, C)` tokens into a copy of `base` at the selected positions.
    ///
    /// With `residual == false` the selected positions are replaced; with
    /// `residual == true` the tokens are added onto the base values.
    pub fn scatter(&mut self, base: Var, tokens: Var, sel: Arc<SelectionIndex>, residual: bool) -> Result<Var> {
        let shape = self.shape(base).to_vec();
        let [b, c, h, w] = shape[..] else {
            return Err(Error::dim("scatter", &shape, self.shape(tokens)));
        };
        sel.check_against(b, h * w, "scatter")?;
        let k = sel.k();
        if self.shape(tokens) != [b, k, c] {
            return Err(Error::dim("scatter", &shape, self.shape(tokens)));
        }
        let hw = h * w;
        let mut out = self.value(base).data().to_vec();
        let tv = self.value(tokens).data();
        for (bi, idx) in sel.iter().enumerate() {
            for (ki, &p) in idx.iter().enumerate() {
                for ci in 0..c {
                    let o = &mut out[(bi * c + ci) * hw + p];
                    let t = tv[(bi * k + ki) * c + ci];
                    *o = if residual { *o + t } else { t };
                }
            }
        }
        let needs = self.needs(base) || self.needs(tokens);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Scatter { base, tokens, sel, residual }, needs))
    }

    /// Looks up rows of a `(N, C)` table: `out[b, k] = table[sel[b][k]]`.
    pub fn row_lookup(&mut self, table: Var, sel: Arc<SelectionIndex>) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        let [n, c] = shape[..] else {
            return Err(Error::dim("row_lookup", &shape, &[]));
        };
        sel.check_against(sel.batch(), n, "row_lookup")?;
        let (b, k) = (sel.batch(), sel.k());
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(b * k * c);
        for idx in sel.iter() {
            for &r in idx {
                out.extend_from_slice(&tv[r * c..(r + 1) * c]);
            }
        }
        let needs = self.needs(table);
        Ok(self.push(Tensor::from_parts(vec![b, k, c], out), Op::RowLookup { table, sel }, needs))
    }

    /// Mean softmax cross-entropy of `(B, N)` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [b, n] = shape[..] else {
            return Err(Error::dim("cross_entropy", &shape, &[labels.len()]));
        };
        if labels.len() != b {
            return Err(Error::dim("cross_entropy", &shape, &[labels.len()]));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= n) {
            return Err(Error::Index { op: "cross_entropy", sample: i, index: l, limit: n });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); b * n];
        let mut loss = T::zero();
        for (r, (&label, row)) in labels.iter().zip(lv.chunks_exact(n)).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = row.iter().map(|&v| (v - mx).exp()).sum();
            for (p, &v) in probs[r * n..(r + 1) * n].iter_mut().zip(row) {
                *p = (v - mx).exp() / s;
            }
            loss = loss - (row[label] - mx - s.ln());
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss / T::c(b as f64)),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            needs,
        ))
    }

    /// Vector-Jacobian product of node `i` given its output gradient `g`.
    pub(crate) fn backprop(&self, i: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let mut res: Vec<(Var, Vec<T>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                if self.needs(*a) {
                    res.push((*a, reduce_to(g, out_shape, self.shape(*a))));
                }
                if self.needs(*b) {
                    let mut gb = reduce_to(g, out_shape, self.shape(*b));
                    if neg {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    res.push((*b, gb));
                }
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let same = sa == sb;
                let (oa, ob) = if same {
                    (Vec::new(), Vec::new())
                } else {
                    (broadcast_offsets(out_shape, sa), broadcast_offsets(out_shape, sb))
                };
                let at = |o: usize| if same { o } else { oa[o] };
                let bt = |o: usize| if same { o } else { ob[o] };
                if self.needs(*a) {
                    let full: Vec<T> = (0..g.len()).map(|o| g[o] * vb[bt(o)]).collect();
                    res.push((*a, reduce_to(&full, out_shape, sa)));
                }
                if self.needs(*b) {
                    let full: Vec<T> = (0..g.len()).map(|o| g[o] * va[at(o)]).collect();
                    res.push((*b, reduce_to(&full, out_shape, sb)));
                }
            }
            Op::Scale(a, s) => res.push((*a, g.iter().map(|&v| v * *s).collect())),
            Op::AddScalar(a) | Op::Reshape(a) => res.push((*a, g.to_vec())),
            Op::Unary(a, kind) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let d = g
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&gv, (&xv, &yv))| gv * unary_derivative(*kind, xv, yv))
                    .collect();
                res.push((*a, d));
            }
            Op::Sum(a) => res.push((*a, vec![g[0]; self.numel(*a)])),
            Op::Mean(a) => {
                let n = self.numel(*a);
                res.push((*a, vec![g[0] / T::c(n as f64); n]));
            }
            Op::Permute(a, perm) => {
                let shape = self.shape(*a);
                let src = strides(shape);
                let st: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
                let mut d = vec![T::zero(); g.len()];
                for (o, off) in strided_offsets(out_shape, &st).into_iter().enumerate() {
                    d[off] = g[o];
                }
                res.push((*a, d));
            }
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k, n) = matmul_dims("matmul", sa, sb, *trans_b)?;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    par::for_each_chunk_mut(&mut da, m * k, batch * m * n * k, |bi, c| {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let bs = &vb[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            kernels::gemm_nn(m, n, k, gs, bs, c);
                        } else {
                            kernels::gemm_nt(m, n, k, gs, bs, c);
                        }
                    });
                    res.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    par::for_each_chunk_mut(&mut db, k * n, batch * m * n * k, |bi, c| {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let as_ = &va[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            kernels::gemm_tn(n, m, k, gs, as_, c);
                        } else {
                            kernels::gemm_tn(k, m, n, as_, gs, c);
                        }
                    });
                    res.push((*b, db));
                }
            }
            Op::Attention { q, k, v, scale, probs } => {
                let [groups, n, d] = out_shape[..] else { unreachable!("attention output is rank 3") };
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let parts = par::map_indices(groups, groups * n * n * d * 4, |i| {
                    let r = i * n * d..(i + 1) * n * d;
                    let (mut gq, mut gk, mut gv) = (vec![T::zero(); n * d], vec![T::zero(); n * d], vec![T::zero(); n * d]);
                    let mut scratch = vec![T::zero(); n * n];
                    kernels::attention_backward(
                        n,
                        d,
                        *scale,
                        &qv[r.clone()],
                        &kv[r.clone()],
                        &vv[r.clone()],
                        &probs[i * n * n..(i + 1) * n * n],
                        &g[r],
                        &mut scratch,
                        &mut gq,
                        &mut gk,
                        &mut gv,
                    );
                    (gq, gk, gv)
                });
                let mut out = [Vec::with_capacity(g.len()), Vec::with_capacity(g.len()), Vec::with_capacity(g.len())];
                for (gq, gk, gv) in parts {
                    out[0].extend_from_slice(&gq);
                    out[1].extend_from_slice(&gk);
                    out[2].extend_from_slice(&gv);
                }
                let [dq, dk, dv] = out;
                res.push((*q, dq));
                res.push((*k, dk));
                res.push((*v, dv));
            }
            Op::Softmax(a, axis) => {
                let len = out_shape[*axis];
                let inner: usize = out_shape[axis + 1..].iter().product();
                let outer: usize = out_shape[..*axis].iter().product();
                let y = node.value.data();
                let mut d = vec![T::zero(); g.len()];
                if inner == 1 {
                    par::for_each_chunk_mut(&mut d, len, g.len() * 4, |o, row| {
                        let (gs, ys) = (&g[o * len..(o + 1) * len], &y[o * len..(o + 1) * len]);
                        let dot = kernels::dot(gs, ys);
                        for ((dv, &gv), &yv) in row.iter_mut().zip(gs).zip(ys) {
                            *dv = yv * (gv - dot);
                        }
                    });
                } else {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let dot: T = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                d[p] = y[p] * (g[p] - dot);
                            }
                        }
                    }
                }
                res.push((*a, d));
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let c = *out_shape.last().expect("rank >= 1");
                let gv = self.value(*gamma).data();
                let xv = self.value(*x).data();
                // per-element scale differs along the row, so fold gamma into g first
                let g_scaled: Vec<T> = g.iter().enumerate().map(|(p, &v)| v * gv[p % c]).collect();
                let (dx, _) = norm_backward(xv, &g_scaled, c, stats, |_| T::one());
                if self.needs(*x) {
                    res.push((*x, dx));
                }
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        for j in 0..c {
                            let p = r * c + j;
                            dg[j] = dg[j] + g[p] * (xv[p] - mean) * rstd;
                            db[j] = db[j] + g[p];
                        }
                    }
                    if self.needs(*gamma) {
                        res.push((*gamma, dg));
                    }
                    if self.needs(*beta) {
                        res.push((*beta, db));
                    }
                }
            }
            Op::ChannelNorm { x, gamma, beta, stats } => {
                let [_, c, h, w] = out_shape[..] else { unreachable!() };
                let plane = h * w;
                let sample = c * plane;
                let gv = self.value(*gamma).data();
                let xv = self.value(*x).data();
                if self.needs(*x) {
                    let g_scaled: Vec<T> = g.iter().enumerate().map(|(p, &v)| v * gv[(p / plane) % c]).collect();
                    let (dx, _) = norm_backward(xv, &g_scaled, sample, stats, |_| T::one());
                    res.push((*x, dx));
                }
                if self.needs(*gamma) {
                    let mut dg = vec![T::zero(); c];
                    for (r, (xs, gs)) in xv.chunks_exact(plane).zip(g.chunks_exact(plane)).enumerate() {
                        let (mean, rstd) = stats[r / c];
                        let acc = xs.iter().zip(gs).fold(T::zero(), |a, (&xv, &gv)| a + gv * (xv - mean) * rstd);
                        dg[r % c] = dg[r % c] + acc;
                    }
                    res.push((*gamma, dg));
                }
                if self.needs(*beta) {
                    let mut db = vec![T::zero(); c];
                    for (r, row) in g.chunks_exact(plane).enumerate() {
                        db[r % c] = db[r % c] + row.iter().copied().sum();
                    }
                    res.push((*beta, db));
                }
            }
            Op::Conv2d { x, w, bias, stride, padding, groups } => {
                let (geom, batch, cout) = self.conv_geom(*x, *w, *bias, *stride, *padding, *groups)?;
                self.conv_backward(geom, batch, cout, *groups, *x, *w, *bias, g, &mut res);
            }
            Op::AvgPool2d { x, window, stride } => {
                let [_, _, h, w] = self.shape(*x)[..] else { unreachable!() };
                let [_, _, oh, ow] = out_shape[..] else { unreachable!() };
                let inv = T::one() / T::c((window * window) as f64);
                let mut d = vec![T::zero(); self.numel(*x)];
                for (p, go) in g.chunks_exact(oh * ow).enumerate() {
                    let dst = &mut d[p * h * w..(p + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let v = go[oy * ow + ox] * inv;
                            for dy in 0..*window {
                                for dx in 0..*window {
                                    let q = (oy * stride + dy) * w + ox * stride + dx;
                                    dst[q] = dst[q] + v;
                                }
                            }
                        }
                    }
                }
                res.push((*x, d));
            }
            Op::Upsample { x, factor } => {
                let [_, _, h, w] = self.shape(*x)[..] else { unreachable!() };
                let (oh, ow) = (h * factor, w * factor);
                let mut d = vec![T::zero(); self.numel(*x)];
                for (p, go) in g.chunks_exact(oh * ow).enumerate() {
                    for y in 0..oh {
                        for xo in 0..ow {
                            let q = p * h * w + (y / factor) * w + xo / factor;
                            d[q] = d[q] + go[y * ow + xo];
                        }
                    }
                }
                res.push((*x, d));
            }
            Op::SpatialMean(x) => {
                let [_, _, h, w] = self.shape(*x)[..] else { unreachable!() };
                let inv = T::one() / T::c((h * w) as f64);
                let d = g.iter().flat_map(|&v| std::iter::repeat_n(v * inv, h * w)).collect();
                res.push((*x, d));
            }
            Op::Gather { x, sel } => {
                let [_, c, h, w] = self.shape(*x)[..] else { unreachable!() };
                let (k, hw) = (sel.k(), h * w);
                let mut d = vec![T::zero(); self.numel(*x)];
                for (bi, idx) in sel.iter().enumerate() {
                    for (ki, &p) in idx.iter().enumerate() {
                        for ci in 0..c {
                            d[(bi * c + ci) * hw + p] = g[(bi * k + ki) * c + ci];
                        }
                    }
                }
                res.push((*x, d));
            }
            Op::Scatter { base, tokens, sel, residual } => {
                let [b, c, h, w] = out_shape[..] else { unreachable!() };
                let (k, hw) = (sel.k(), h * w);
                if self.needs(*tokens) {
                    let mut d = vec![T::zero(); b * k * c];
                    for (bi, idx) in sel.iter().enumerate() {
                        for (ki, &p) in idx.iter().enumerate() {
                            for ci in 0..c {
                                d[(bi * k + ki) * c + ci] = g[(bi * c + ci) * hw + p];
                            }
                        }
                    }
                    res.push((*tokens, d));
                }
                if self.needs(*base) {
                    let mut d = g.to_vec();
                    if !residual {
                        for (bi, idx) in sel.iter().enumerate() {
                            for &p in idx {
                                for ci in 0..c {
                                    d[(bi * c + ci) * hw + p] = T::zero();
                                }
                            }
                        }
                    }
                    res.push((*base, d));
                }
            }
            Op::RowLookup { table, sel } => {
                let c = self.shape(*table)[1];
                let mut d = vec![T::zero(); self.numel(*table)];
                for (t, &r) in sel.iter().flatten().enumerate() {
                    for ci in 0..c {
                        d[r * c + ci] = d[r * c + ci] + g[t * c + ci];
                    }
                }
                res.push((*table, d));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = self.shape(*logits)[1];
                let scale = g[0] / T::c(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * n + l] = d[r * n + l] - scale;
                }
                res.push((*logits, d));
            }
        }
        Ok(res)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        g: ConvGeom,
        batch: usize,
        cout: usize,
        groups: usize,
        x: Var,
        w: Var,
        bias: Option<Var>,
        dout: &[T],
        res: &mut Vec<(Var, Vec<T>)>,
    ) {
        let (oh, ow) = (g.out_h(), g.out_w());
        let plane = oh * ow;
        let cout_g = cout / groups;
        let in_sample = g.channels * groups * g.height * g.width;
        let x_group = g.channels * g.height * g.width;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let (need_x, need_w) = (self.needs(x), self.needs(w));
        let depthwise = g.channels == 1 && cout_g == 1;
        let wlen = wv.len();
        let work = batch * cout * plane * g.patch_len();

        let per_sample: Vec<(Vec<T>, Vec<T>)> = par::map_indices(batch, work, |bi| {
            let xs = &xv[bi * in_sample..(bi + 1) * in_sample];
            let go = &dout[bi * cout * plane..(bi + 1) * cout * plane];
            let mut dx = if need_x { vec![T::zero(); in_sample] } else { Vec::new() };
            let mut dw = if need_w { vec![T::zero(); wlen] } else { Vec::new() };
            if depthwise {
                let dg = ConvGeom { channels: groups, ..g };
                kernels::depthwise_backward(
                    &dg,
                    xs,
                    wv,
                    go,
                    need_x.then_some(dx.as_mut_slice()),
                    need_w.then_some(dw.as_mut_slice()),
                );
                return (dx, dw);
            }
            let patch = g.patch_len();
            let mut cols = vec![T::zero(); patch * plane];
            for gi in 0..groups {
                let xg = &xs[gi * x_group..(gi + 1) * x_group];
                let gg = &go[gi * cout_g * plane..(gi + 1) * cout_g * plane];
                let wg = &wv[gi * cout_g * patch..(gi + 1) * cout_g * patch];
                if need_w {
                    let colsr: &[T] = if g.is_pointwise() {
                        xg
                    } else {
                        kernels::im2col(&g, xg, &mut cols);
                        &cols
                    };
                    let dwg = &mut dw[gi * cout_g * patch..(gi + 1) * cout_g * patch];
                    kernels::gemm_nt(cout_g, plane, patch, gg, colsr, dwg);
                }
                if need_x {
                    let dxg = &mut dx[gi * x_group..(gi + 1) * x_group];
                    if g.is_pointwise() {
                        kernels::gemm_tn(patch, cout_g, plane, wg, gg, dxg);
                    } else {
                        cols.fill(T::zero());
                        kernels::gemm_tn(patch, cout_g, plane, wg, gg, &mut cols);
                        kernels::col2im(&g, &cols, dxg);
                    }
                }
            }
            (dx, dw)
        });

        if need_w {
            let mut dw = vec![T::zero(); wlen];
            for (_, part) in &per_sample {
                dw.iter_mut().zip(part).for_each(|(a, b)| *a = *a + *b);
            }
            res.push((w, dw));
        }
        if let Some(b) = bias.filter(|b| self.needs(*b)) {
            let mut db = vec![T::zero(); cout];
            for (p, row) in dout.chunks_exact(plane).enumerate() {
                db[p % cout] = db[p % cout] + row.iter().copied().sum();
            }
            res.push((b, db));
        }
        if need_x {
            let dx = per_sample.into_iter().flat_map(|(dx, _)| dx).collect();
            res.push((x, dx));
        }
    }
}
