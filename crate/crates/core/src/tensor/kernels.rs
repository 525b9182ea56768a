//! Raw numeric kernels over row-major slices.

use super::Element;
use crate::par;

fn rows_per_chunk(m: usize, n: usize, k: usize) -> usize {
    // aim for ~64k multiply-adds per task
    let per_row = (n * k).max(1);
    ((1 << 16) / per_row).clamp(1, m.max(1))
}

/// Short rows vectorize poorly; below this width kernels reshuffle operands.
const NARROW: usize = 32;

fn transpose<T: Element>(rows: usize, cols: usize, x: &[T]) -> Vec<T> {
    let mut t = vec![T::zero(); rows * cols];
    for (r, row) in x.chunks_exact(cols).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            t[j * rows + r] = v;
        }
    }
    t
}

/// `c += a · b` with `a: m×k`, `b: k×n`, `c: m×n`.
pub fn gemm_nn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n < NARROW && k >= 2 * NARROW {
        // long reductions into few columns: dot products against bᵀ
        return gemm_nt(m, k, n, a, &transpose(k, n, b), c);
    }
    if n < NARROW && m >= NARROW {
        // accumulate cᵀ = bᵀ · aᵀ, streaming over the long axis
        let mut ct = transpose(m, n, c);
        stream_rows(n, k, m, &transpose(k, n, b), &transpose(m, k, a), &mut ct);
        c.copy_from_slice(&transpose(n, m, &ct));
        return;
    }
    stream_rows(m, k, n, a, b, c);
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`, `c: m×n`.
pub fn gemm_tn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n < NARROW && m >= NARROW {
        // accumulate cᵀ = bᵀ · a, streaming over the long axis
        let mut ct = transpose(m, n, c);
        gemm_tn(n, k, m, b, a, &mut ct);
        c.copy_from_slice(&transpose(n, m, &ct));
        return;
    }
    let rows = rows_per_chunk(m, n, k);
    par::for_each_chunk_mut(c, rows * n, m * n * k, |ci, chunk| {
        let row0 = ci * rows;
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            for (r, c_row) in chunk.chunks_exact_mut(n).enumerate() {
                let av = a[p * m + row0 + r];
                if av == T::zero() {
                    continue;
                }
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv = *cv + av * bv;
                }
            }
        }
    });
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`, `c: m×n`.
pub fn gemm_nt<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if k < 2 * NARROW {
        return gemm_nn(m, k, n, a, &transpose(n, k, b), c);
    }
    let rows = rows_per_chunk(m, n, k);
    par::for_each_chunk_mut(c, rows * n, m * n * k, |ci, chunk| {
        let row0 = ci * rows;
        for (r, c_row) in chunk.chunks_exact_mut(n).enumerate() {
            let a_row = &a[(row0 + r) * k..(row0 + r + 1) * k];
            for (j, cv) in c_row.iter_mut().enumerate() {
                *cv = *cv + dot(a_row, &b[j * k..(j + 1) * k]);
            }
        }
    });
}

/// `c += a · b`, each output row built as a sum of scaled rows of `b`.
fn stream_rows<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let rows = rows_per_chunk(m, n, k);
    par::for_each_chunk_mut(c, rows * n, m * n * k, |ci, chunk| {
        let row0 = ci * rows;
        for (r, c_row) in chunk.chunks_exact_mut(n).enumerate() {
            let a_row = &a[(row0 + r) * k..(row0 + r + 1) * k];
            for (p, &av) in a_row.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let b_row = &b[p * n..(p + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv = *cv + av * bv;
                }
            }
        }
    });
}

/// `out = softmax(xs)`.
pub fn softmax_row<T: Element>(xs: &[T], out: &mut [T]) {
    out.copy_from_slice(xs);
    softmax_in_place(out);
}

/// Softmax of one row in place. Max and sum run over independent lanes so
/// both passes vectorize.
pub fn softmax_in_place<T: Element>(row: &mut [T]) {
    const L: usize = 16;
    let mut lanes = [T::neg_infinity(); L];
    let chunks = row.chunks_exact(L);
    let mut mx = chunks.remainder().iter().copied().fold(T::neg_infinity(), T::max);
    for c in chunks {
        for l in 0..L {
            lanes[l] = if c[l] > lanes[l] { c[l] } else { lanes[l] };
        }
    }
    mx = lanes.iter().copied().fold(mx, T::max);
    row.iter_mut().for_each(|v| *v = *v - mx);
    T::exp_in_place(row);
    let mut acc = [T::zero(); L];
    let chunks = row.chunks_exact(L);
    let rest: T = chunks.remainder().iter().copied().sum();
    for c in chunks {
        for l in 0..L {
            acc[l] = acc[l] + c[l];
        }
    }
    let inv = T::one() / (acc.iter().copied().sum::<T>() + rest);
    row.iter_mut().for_each(|v| *v = *v * inv);
}

/// One head of scaled dot-product attention: `p = softmax(s·q·kᵀ)` (written
/// to `p`, `n×n`) and `y = p·v`, with `q, k, v: n×d`.
pub fn attention_forward<T: Element>(n: usize, d: usize, scale: T, q: &[T], k: &[T], v: &[T], p: &mut [T], y: &mut [T]) {
    p.iter_mut().for_each(|x| *x = T::zero());
    gemm_nt(n, d, n, q, k, p);
    for row in p.chunks_exact_mut(n) {
        row.iter_mut().for_each(|x| *x = *x * scale);
        softmax_in_place(row);
    }
    y.iter_mut().for_each(|x| *x = T::zero());
    gemm_nn(n, n, d, p, v, y);
}

/// Gradients of [`attention_forward`] given `gy`; `scratch` holds `n×n`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Element>(
    n: usize,
    d: usize,
    scale: T,
    q: &[T],
    k: &[T],
    v: &[T],
    p: &[T],
    gy: &[T],
    scratch: &mut [T],
    gq: &mut [T],
    gk: &mut [T],
    gv: &mut [T],
) {
    // gv = pᵀ·gy
    gemm_tn(n, n, d, p, gy, gv);
    // scratch = gy·vᵀ, then the softmax Jacobian and the score scale
    scratch.iter_mut().for_each(|x| *x = T::zero());
    gemm_nt(n, d, n, gy, v, scratch);
    for (gr, pr) in scratch.chunks_exact_mut(n).zip(p.chunks_exact(n)) {
        let dp = dot(gr, pr);
        for (g, &pv) in gr.iter_mut().zip(pr) {
            *g = pv * (*g - dp) * scale;
        }
    }
    gemm_nn(n, n, d, scratch, k, gq);
    gemm_tn(n, n, d, scratch, q, gk);
}

/// Dot product over 32 independent lanes, so the adds neither serialize on
/// one accumulator nor stop vectorizing.
#[inline]
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    const L: usize = 32;
    let mut acc = [T::zero(); L];
    let ca = a.chunks_exact(L);
    let cb = b.chunks_exact(L);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..L {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut width = L;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            acc[l] = acc[l] + acc[l + width];
        }
    }
    let mut s = acc[0];
    for (x, y) in ra.iter().zip(rb) {
        s = s + *x * *y;
    }
    s
}

/// Geometry of one 2-D convolution window sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kw) / self.stride + 1
    }

    /// Rows of the column matrix.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds one image `(C, H, W)` into `(C·kh·kw, Ho·Wo)` columns.
pub fn im2col<T: Element>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    debug_assert_eq!(cols.len(), g.patch_len() * plane);
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let src = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `(C, H, W)`.
pub fn col2im<T: Element>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let dst = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `ox` whose input column `ox·stride + kj − pad` lies inside `0..width`.
fn valid_cols(ow: usize, width: usize, stride: usize, kj: usize, pad: usize) -> std::ops::Range<usize> {
    let lo = pad.saturating_sub(kj).div_ceil(stride);
    let hi = if width + pad > kj { ((width + pad - kj - 1) / stride + 1).min(ow) } else { 0 };
    lo..hi.max(lo)
}

/// Depthwise convolution of one image: channel `c` of `x` with kernel `c` of `w`.
pub fn depthwise_forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = g.height * g.width;
    for c in 0..g.channels {
        let src = &x[c * plane..(c + 1) * plane];
        let ker = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        dst.fill(T::zero());
        for oy in 0..oh {
            let drow = &mut dst[oy * ow..(oy + 1) * ow];
            for ki in 0..g.kh {
                let Some(iy) = (oy * g.stride + ki).checked_sub(g.padding).filter(|&iy| iy < g.height) else {
                    continue;
                };
                let srow = &src[iy * g.width..(iy + 1) * g.width];
                for kj in 0..g.kw {
                    let k = ker[ki * g.kw + kj];
                    let cols = valid_cols(ow, g.width, g.stride, kj, g.padding);
                    if cols.is_empty() {
                        continue;
                    }
                    let ix0 = cols.start * g.stride + kj - g.padding;
                    let d = &mut drow[cols.clone()];
                    if g.stride == 1 {
                        for (o, &v) in d.iter_mut().zip(&srow[ix0..ix0 + cols.len()]) {
                            *o = *o + k * v;
                        }
                    } else {
                        for (o, &v) in d.iter_mut().zip(srow[ix0..].iter().step_by(g.stride)) {
                            *o = *o + k * v;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`depthwise_forward`] for one image; accumulates into `dx` and `dw`.
pub fn depthwise_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = g.height * g.width;
    let taps = g.kh * g.kw;
    for c in 0..g.channels {
        let src = &x[c * plane..(c + 1) * plane];
        let ker = &w[c * taps..(c + 1) * taps];
        let go = &dout[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            let grow = &go[oy * ow..(oy + 1) * ow];
            for ki in 0..g.kh {
                let Some(iy) = (oy * g.stride + ki).checked_sub(g.padding).filter(|&iy| iy < g.height) else {
                    continue;
                };
                for kj in 0..g.kw {
                    let cols = valid_cols(ow, g.width, g.stride, kj, g.padding);
                    if cols.is_empty() {
                        continue;
                    }
                    let ix0 = iy * g.width + cols.start * g.stride + kj - g.padding;
                    let gs = &grow[cols.clone()];
                    let t = ki * g.kw + kj;
                    if let Some(dw) = dw.as_deref_mut() {
                        let acc = if g.stride == 1 {
                            dot(gs, &src[ix0..ix0 + gs.len()])
                        } else {
                            gs.iter().zip(src[ix0..].iter().step_by(g.stride)).fold(T::zero(), |a, (&d, &v)| a + d * v)
                        };
                        dw[c * taps + t] = dw[c * taps + t] + acc;
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let k = ker[t];
                        let dxc = &mut dx[c * plane..(c + 1) * plane];
                        if g.stride == 1 {
                            for (o, &d) in dxc[ix0..ix0 + gs.len()].iter_mut().zip(gs) {
                                *o = *o + d * k;
                            }
                        } else {
                            for (o, &d) in dxc[ix0..].iter_mut().step_by(g.stride).zip(gs) {
                                *o = *o + d * k;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        // covers the narrow-output, long-reduction and plain paths
        for (m, k, n) in [(7, 13, 5), (70, 13, 5), (40, 100, 9), (5, 90, 40), (33, 64, 31), (64, 200, 48)] {
            gemm_case(m, k, n);
        }
    }

    fn gemm_case(m: usize, k: usize, n: usize) {
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-11);
        }
        let mut c = vec![0.0; m * n];
        gemm_tn(m, k, n, &transpose(m, k, &a), &b, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-11);
        }
        let mut c = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &transpose(k, n, &b), &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-11);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { channels: 2, height: 5, width: 4, kh: 3, kw: 3, stride: 2, padding: 1 };
        let x: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..g.patch_len() * g.out_h() * g.out_w()).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&g, &x, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&g, &y, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
