//! Forward and backward kernels. Matrices are row-major; linear weights are
//! stored `[d_in, d_out]` so the hot loops are contiguous axpys.

use super::plan::{ConvPlan, EncPlan, ExtractorPlan};
use super::Scalar;

pub(crate) const LN_EPS: f64 = 1e-12;

#[inline]
pub(crate) fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with eight independent accumulators so it vectorizes
/// without reassociating a single sum.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// `out[n, dout] = x[n, din] * w[din, dout] + b`.
pub(crate) fn linear<T: Scalar>(x: &[T], n: usize, w: &[T], b: &[T], out: &mut [T]) {
    let dout = b.len();
    let din = w.len() / dout;
    for i in 0..n {
        let o = &mut out[i * dout..(i + 1) * dout];
        o.copy_from_slice(b);
        for k in 0..din {
            axpy(x[i * din + k], &w[k * dout..(k + 1) * dout], o);
        }
    }
}

/// Accumulates weight and bias grads; adds the input grad into `dx` if given.
pub(crate) fn linear_backward<T: Scalar>(
    x: &[T],
    n: usize,
    w: &[T],
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
) {
    let dout = db.len();
    let din = w.len() / dout;
    for i in 0..n {
        let g = &dy[i * dout..(i + 1) * dout];
        axpy(T::one(), g, db);
        for k in 0..din {
            axpy(x[i * din + k], g, &mut dw[k * dout..(k + 1) * dout]);
        }
    }
    if let Some(dx) = dx {
        for i in 0..n {
            let g = &dy[i * dout..(i + 1) * dout];
            for k in 0..din {
                dx[i * din + k] += dot(g, &w[k * dout..(k + 1) * dout]);
            }
        }
    }
}

/// Per-row layer norm. Returns (output, normalized input, 1/std per row).
pub(crate) fn layer_norm<T: Scalar>(x: &[T], d: usize, g: &[T], b: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = x.len() / d;
    let inv_d = T::of(1.0 / d as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
        let r = T::one() / (var + T::of(LN_EPS)).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = g[j] * h + b[j];
        }
    }
    (y, xhat, rstd)
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    d: usize,
    g: &[T],
    dg: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let n = rstd.len();
    let inv_d = T::of(1.0 / d as f64);
    let mut dx = vec![T::zero(); n * d];
    let mut dxhat = vec![T::zero(); d];
    for i in 0..n {
        let (gy, h) = (&dy[i * d..(i + 1) * d], &xhat[i * d..(i + 1) * d]);
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for j in 0..d {
            dg[j] += gy[j] * h[j];
            db[j] += gy[j];
            dxhat[j] = gy[j] * g[j];
            s1 += dxhat[j];
            s2 += dxhat[j] * h[j];
        }
        let (m1, m2) = (s1 * inv_d, s2 * inv_d);
        for j in 0..d {
            dx[i * d + j] = rstd[i] * (dxhat[j] - m1 - h[j] * m2);
        }
    }
    dx
}

fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); x.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = x[i * cols + j];
        }
    }
    t
}

// ---------------------------------------------------------------------------
// Convolution stages: 3x3 same conv -> SiLU -> 2x2 average pool.

fn conv3x3<T: Scalar>(c: &ConvPlan, p: &[T], inp: &[T]) -> Vec<T> {
    let (h, w) = (c.h, c.w);
    let wt = &p[c.weight.range()];
    let bias = &p[c.bias.range()];
    let mut out = vec![T::zero(); c.cout * h * w];
    for co in 0..c.cout {
        let plane = &mut out[co * h * w..(co + 1) * h * w];
        plane.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..c.cin {
            let src = &inp[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let k = wt[((co * c.cin + ci) * 3 + ky) * 3 + kx];
                    let (x_lo, x_hi) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < 1 || sy > h {
                            continue;
                        }
                        let srow = &src[(sy - 1) * w..sy * w];
                        let orow = &mut plane[y * w..(y + 1) * w];
                        axpy(k, &srow[x_lo + kx - 1..x_hi + kx - 1], &mut orow[x_lo..x_hi]);
                    }
                }
            }
        }
    }
    out
}

fn silu_pool<T: Scalar>(pre: &[T], ch: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); ch * oh * ow];
    for c in 0..ch {
        let src = &pre[c * h * w..(c + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let i = 2 * y * w + 2 * x;
                let s = silu(src[i]) + silu(src[i + 1]) + silu(src[i + w]) + silu(src[i + w + 1]);
                out[(c * oh + y) * ow + x] = s * quarter;
            }
        }
    }
    out
}

pub(crate) struct ExtractorCache<T> {
    /// Per stage: (input, pre-activation).
    stages: Vec<(Vec<T>, Vec<T>)>,
    /// Token-major final features `[tokens, c_last]`.
    feat: Vec<T>,
}

/// Image -> `[tokens, d]`.
pub(crate) fn extractor_forward<T: Scalar>(
    e: &ExtractorPlan,
    p: &[T],
    image: Vec<T>,
    d: usize,
) -> (Vec<T>, ExtractorCache<T>) {
    let mut stages = Vec::with_capacity(e.convs.len());
    let mut x = image;
    for c in &e.convs {
        let pre = conv3x3(c, p, &x);
        let next = silu_pool(&pre, c.cout, c.h, c.w);
        stages.push((x, pre));
        x = next;
    }
    let feat = transpose(&x, e.c_last, e.tokens);
    let mut tok = vec![T::zero(); e.tokens * d];
    linear(&feat, e.tokens, &p[e.proj_w.range()], &p[e.proj_b.range()], &mut tok);
    (tok, ExtractorCache { stages, feat })
}

pub(crate) fn extractor_backward<T: Scalar>(
    e: &ExtractorPlan,
    p: &[T],
    cache: &ExtractorCache<T>,
    dtok: &[T],
    grad: &mut [T],
) {
    let mut dfeat = vec![T::zero(); e.tokens * e.c_last];
    {
        let (dw, db) = split2(grad, e.proj_w.range(), e.proj_b.range());
        linear_backward(&cache.feat, e.tokens, &p[e.proj_w.range()], dtok, dw, db, Some(&mut dfeat));
    }
    let mut dout = transpose(&dfeat, e.tokens, e.c_last);
    for (s, c) in e.convs.iter().enumerate().rev() {
        let (inp, pre) = &cache.stages[s];
        let (h, w) = (c.h, c.w);
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::of(0.25);
        // pool + activation backward
        let mut dpre = vec![T::zero(); c.cout * h * w];
        for ch in 0..c.cout {
            for y in 0..oh {
                for x in 0..ow {
                    let g = dout[(ch * oh + y) * ow + x] * quarter;
                    let base = ch * h * w + 2 * y * w + 2 * x;
                    for i in [base, base + 1, base + w, base + w + 1] {
                        dpre[i] = g * silu_grad(pre[i]);
                    }
                }
            }
        }
        let need_dx = s > 0;
        let mut dx = if need_dx { vec![T::zero(); c.cin * h * w] } else { vec![] };
        let wt = &p[c.weight.range()];
        for co in 0..c.cout {
            let dplane = &dpre[co * h * w..(co + 1) * h * w];
            grad[c.bias.off + co] += dplane.iter().fold(T::zero(), |a, &v| a + v);
            for ci in 0..c.cin {
                let src = &inp[ci * h * w..(ci + 1) * h * w];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let widx = ((co * c.cin + ci) * 3 + ky) * 3 + kx;
                        let (x_lo, x_hi) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                        let mut acc = T::zero();
                        for y in 0..h {
                            let sy = y + ky;
                            if sy < 1 || sy > h {
                                continue;
                            }
                            let srow = &src[(sy - 1) * w + x_lo + kx - 1..(sy - 1) * w + x_hi + kx - 1];
                            let drow = &dplane[y * w + x_lo..y * w + x_hi];
                            acc += dot(drow, srow);
                            if need_dx {
                                let xrow = &mut dx[ci * h * w + (sy - 1) * w + x_lo + kx - 1
                                    ..ci * h * w + (sy - 1) * w + x_hi + kx - 1];
                                axpy(wt[widx], drow, xrow);
                            }
                        }
                        grad[c.weight.off + widx] += acc;
                    }
                }
            }
        }
        dout = dx;
    }
}

/// Two disjoint mutable sub-slices.
pub(crate) fn split2<T>(
    v: &mut [T],
    a: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
) -> (&mut [T], &mut [T]) {
    assert!(a.end <= b.start || b.end <= a.start);
    if a.start < b.start {
        let (lo, hi) = v.split_at_mut(b.start);
        (&mut lo[a], &mut hi[..b.end - b.start])
    } else {
        let (lo, hi) = v.split_at_mut(a.start);
        let bb = &mut lo[b];
        (&mut hi[..a.end - a.start], bb)
    }
}

// ---------------------------------------------------------------------------
// Post-LN transformer encoder layer.

pub(crate) struct EncCache<T> {
    n: usize,
    /// First output row; rows `r0..n` are computed.
    r0: usize,
    x: Vec<T>,
    q: Vec<T>,
    /// `[d, n]`
    kt: Vec<T>,
    vt: Vec<T>,
    /// `[heads, rows, n]`
    probs: Vec<T>,
    o: Vec<T>,
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    x1: Vec<T>,
    h1: Vec<T>,
    g: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
}

impl<T> EncCache<T> {
    /// Attention weights, `[heads, rows, n]`.
    #[cfg(test)]
    pub(crate) fn probs(&self) -> &[T] {
        &self.probs
    }
}

/// Runs one layer over `x[n, d]`, returning output rows `r0..n` only. Keys and
/// values still come from all rows.
pub(crate) fn encoder_forward<T: Scalar>(
    l: &EncPlan,
    p: &[T],
    d: usize,
    heads: usize,
    d_ff: usize,
    x: Vec<T>,
    r0: usize,
) -> (Vec<T>, EncCache<T>) {
    let n = x.len() / d;
    let rows = n - r0;
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let xr = &x[r0 * d..];

    let mut q = vec![T::zero(); rows * d];
    linear(xr, rows, &p[l.wq.range()], &p[l.bq.range()], &mut q);
    let mut k = vec![T::zero(); n * d];
    linear(&x, n, &p[l.wk.range()], &vec![T::zero(); d], &mut k);
    let mut v = vec![T::zero(); n * d];
    linear(&x, n, &p[l.wv.range()], &p[l.bv.range()], &mut v);
    let kt = transpose(&k, n, d);
    let vt = transpose(&v, n, d);

    let mut probs = vec![T::zero(); heads * rows * n];
    let mut o = vec![T::zero(); rows * d];
    for hd in 0..heads {
        for i in 0..rows {
            let s = &mut probs[(hd * rows + i) * n..(hd * rows + i + 1) * n];
            for c in hd * dh..(hd + 1) * dh {
                axpy(q[i * d + c] * scale, &kt[c * n..(c + 1) * n], s);
            }
            let m = s.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            for v in s.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            let inv = T::one() / z;
            s.iter_mut().for_each(|v| *v *= inv);
            for c in hd * dh..(hd + 1) * dh {
                o[i * d + c] = dot(s, &vt[c * n..(c + 1) * n]);
            }
        }
    }
    let mut r1 = vec![T::zero(); rows * d];
    linear(&o, rows, &p[l.wo.range()], &p[l.bo.range()], &mut r1);
    axpy(T::one(), xr, &mut r1);
    let (x1, xhat1, rstd1) = layer_norm(&r1, d, &p[l.ln1_g.range()], &p[l.ln1_b.range()]);

    let mut h1 = vec![T::zero(); rows * d_ff];
    linear(&x1, rows, &p[l.w1.range()], &p[l.b1.range()], &mut h1);
    let g: Vec<T> = h1.iter().map(|&v| silu(v)).collect();
    let mut r2 = vec![T::zero(); rows * d];
    linear(&g, rows, &p[l.w2.range()], &p[l.b2.range()], &mut r2);
    axpy(T::one(), &x1, &mut r2);
    let (out, xhat2, rstd2) = layer_norm(&r2, d, &p[l.ln2_g.range()], &p[l.ln2_b.range()]);

    let cache = EncCache {
        n,
        r0,
        x,
        q,
        kt,
        vt,
        probs,
        o,
        xhat1,
        rstd1,
        x1,
        h1,
        g,
        xhat2,
        rstd2,
    };
    (out, cache)
}

/// Given the grad of the output rows, accumulates parameter grads and returns
/// the grad of the full input `[n, d]`.
pub(crate) fn encoder_backward<T: Scalar>(
    l: &EncPlan,
    p: &[T],
    d: usize,
    heads: usize,
    d_ff: usize,
    c: &EncCache<T>,
    dout: &[T],
    grad: &mut [T],
) -> Vec<T> {
    let (n, r0) = (c.n, c.r0);
    let rows = n - r0;
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());

    let dr2 = {
        let (dg, db) = split2(grad, l.ln2_g.range(), l.ln2_b.range());
        layer_norm_backward(dout, &c.xhat2, &c.rstd2, d, &p[l.ln2_g.range()], dg, db)
    };
    let mut dx1 = dr2.clone();
    let mut dg_ff = vec![T::zero(); rows * d_ff];
    {
        let (dw, db) = split2(grad, l.w2.range(), l.b2.range());
        linear_backward(&c.g, rows, &p[l.w2.range()], &dr2, dw, db, Some(&mut dg_ff));
    }
    for (dv, &h) in dg_ff.iter_mut().zip(&c.h1) {
        *dv *= silu_grad(h);
    }
    {
        let (dw, db) = split2(grad, l.w1.range(), l.b1.range());
        linear_backward(&c.x1, rows, &p[l.w1.range()], &dg_ff, dw, db, Some(&mut dx1));
    }
    let dr1 = {
        let (dg, db) = split2(grad, l.ln1_g.range(), l.ln1_b.range());
        layer_norm_backward(&dx1, &c.xhat1, &c.rstd1, d, &p[l.ln1_g.range()], dg, db)
    };

    let mut dx = vec![T::zero(); n * d];
    axpy(T::one(), &dr1, &mut dx[r0 * d..]);
    let mut d_o = vec![T::zero(); rows * d];
    {
        let (dw, db) = split2(grad, l.wo.range(), l.bo.range());
        linear_backward(&c.o, rows, &p[l.wo.range()], &dr1, dw, db, Some(&mut d_o));
    }

    let mut dq = vec![T::zero(); rows * d];
    let mut dkt = vec![T::zero(); d * n];
    let mut dvt = vec![T::zero(); d * n];
    let mut dp = vec![T::zero(); n];
    for hd in 0..heads {
        for i in 0..rows {
            let pr = &c.probs[(hd * rows + i) * n..(hd * rows + i + 1) * n];
            dp.iter_mut().for_each(|v| *v = T::zero());
            for ch in hd * dh..(hd + 1) * dh {
                let go = d_o[i * d + ch];
                axpy(go, &c.vt[ch * n..(ch + 1) * n], &mut dp);
                axpy(go, pr, &mut dvt[ch * n..(ch + 1) * n]);
            }
            let s = dot(&dp, pr);
            for (g, &pv) in dp.iter_mut().zip(pr) {
                *g = pv * (*g - s) * scale;
            }
            for ch in hd * dh..(hd + 1) * dh {
                dq[i * d + ch] = dot(&dp, &c.kt[ch * n..(ch + 1) * n]);
                axpy(c.q[i * d + ch], &dp, &mut dkt[ch * n..(ch + 1) * n]);
            }
        }
    }
    let dk = transpose(&dkt, d, n);
    let dv = transpose(&dvt, d, n);
    {
        let (dw, db) = split2(grad, l.wq.range(), l.bq.range());
        linear_backward(&c.x[r0 * d..], rows, &p[l.wq.range()], &dq, dw, db, Some(&mut dx[r0 * d..]));
    }
    {
        let mut unused = vec![T::zero(); d];
        let dw = &mut grad[l.wk.range()];
        linear_backward(&c.x, n, &p[l.wk.range()], &dk, dw, &mut unused, Some(&mut dx));
    }
    {
        let (dw, db) = split2(grad, l.wv.range(), l.bv.range());
        linear_backward(&c.x, n, &p[l.wv.range()], &dv, dw, db, Some(&mut dx));
    }
    dx
}
