//! Forward and backward kernels on flat row-major buffers.
//!
//! Every kernel that runs in parallel assigns each output element to exactly
//! one task and reduces shared gradients in a fixed order, so results are
//! bit-identical regardless of the thread count.

use rayon::prelude::*;

use super::Element;

const PAR_THRESHOLD: usize = 1 << 15;

#[inline]
fn c<T: Element>(x: f64) -> T {
    T::of(x)
}

/// `a (m, k) x b (k, n) -> (m, n)`.
pub fn gemm<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    let row = |(i, dst): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in dst.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

pub fn transpose<T: Element>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `a^T b` for `a (m, k)`, `b (m, n)`.
pub fn gemm_tn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    gemm(&transpose(a, m, k), b, k, m, n)
}

/// `a b^T` for `a (m, k)`, `b (n, k)`.
pub fn gemm_nt<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    gemm(a, &transpose(b, n, k), m, k, n)
}

pub fn batch_matmul<T: Element>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    transpose_b: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    let go = |(i, dst): (usize, &mut [T])| {
        let ai = &a[i * m * k..(i + 1) * m * k];
        let bi = &b[i * k * n..(i + 1) * k * n];
        let r = if transpose_b {
            gemm_nt(ai, bi, m, k, n)
        } else {
            gemm(ai, bi, m, k, n)
        };
        dst.copy_from_slice(&r);
    };
    if batch * m * n * k >= PAR_THRESHOLD && batch > 1 {
        out.par_chunks_mut(m * n).enumerate().for_each(go);
    } else {
        out.chunks_mut(m * n).enumerate().for_each(go);
    }
    out
}

/// Gradients of `batch_matmul` with respect to both operands.
#[allow(clippy::too_many_arguments)]
pub fn batch_matmul_backward<T: Element>(
    a: &[T],
    b: &[T],
    gy: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    transpose_b: bool,
) -> (Vec<T>, Vec<T>) {
    let mut ga = vec![T::zero(); batch * m * k];
    let mut gb = vec![T::zero(); batch * k * n];
    ga.par_chunks_mut(m * k)
        .zip(gb.par_chunks_mut(k * n))
        .enumerate()
        .for_each(|(i, (gai, gbi))| {
            let ai = &a[i * m * k..(i + 1) * m * k];
            let bi = &b[i * k * n..(i + 1) * k * n];
            let gyi = &gy[i * m * n..(i + 1) * m * n];
            if transpose_b {
                // y = a b^T with b (n, k): ga = gy b, gb = gy^T a
                gai.copy_from_slice(&gemm(gyi, bi, m, n, k));
                gbi.copy_from_slice(&gemm_tn(gyi, ai, m, n, k));
            } else {
                gai.copy_from_slice(&gemm_nt(gyi, bi, m, n, k));
                gbi.copy_from_slice(&gemm_tn(ai, gyi, m, k, n));
            }
        });
    (ga, gb)
}

#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Element>(x: T) -> T {
    let inner = c::<T>(GELU_K) * (x + c::<T>(GELU_A) * x * x * x);
    c::<T>(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Element>(x: T) -> T {
    let inner = c::<T>(GELU_K) * (x + c::<T>(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = c::<T>(GELU_K) * (T::one() + c::<T>(3.0 * GELU_A) * x * x);
    c::<T>(0.5) * (T::one() + t) + c::<T>(0.5) * x * (T::one() - t * t) * dinner
}

#[inline]
pub fn silu<T: Element>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Element>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub fn softmax_rows<T: Element>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

pub fn softmax_backward<T: Element>(y: &[T], gy: &[T], cols: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); y.len()];
    for ((yr, gr), dst) in y.chunks(cols).zip(gy.chunks(cols)).zip(gx.chunks_mut(cols)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    gx
}

/// Row-wise layer norm. Returns output, per-row mean and reciprocal std.
pub fn layer_norm<T: Element>(x: &[T], gamma: &[T], beta: &[T], cols: usize, eps: f64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / cols;
    let mut y = vec![T::zero(); x.len()];
    let mut means = vec![T::zero(); rows];
    let mut rstds = vec![T::zero(); rows];
    let n = c::<T>(cols as f64);
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + c(eps)).sqrt();
        means[r] = mean;
        rstds[r] = rstd;
        for j in 0..cols {
            y[r * cols + j] = (xr[j] - mean) * rstd * gamma[j] + beta[j];
        }
    }
    (y, means, rstds)
}

pub fn layer_norm_backward<T: Element>(
    x: &[T],
    gamma: &[T],
    means: &[T],
    rstds: &[T],
    gy: &[T],
    cols: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / cols;
    let mut gx = vec![T::zero(); x.len()];
    let mut gg = vec![T::zero(); cols];
    let mut gb = vec![T::zero(); cols];
    let n = c::<T>(cols as f64);
    let mut xhat = vec![T::zero(); cols];
    let mut gxhat = vec![T::zero(); cols];
    for r in 0..rows {
        let (mean, rstd) = (means[r], rstds[r]);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for j in 0..cols {
            let i = r * cols + j;
            xhat[j] = (x[i] - mean) * rstd;
            gxhat[j] = gy[i] * gamma[j];
            gg[j] = gg[j] + gy[i] * xhat[j];
            gb[j] = gb[j] + gy[i];
            sum_g = sum_g + gxhat[j];
            sum_gx = sum_gx + gxhat[j] * xhat[j];
        }
        for j in 0..cols {
            gx[r * cols + j] = rstd * (gxhat[j] - sum_g / n - xhat[j] * sum_gx / n);
        }
    }
    (gx, gg, gb)
}

/// Per-channel batch statistics over every row. Returns (mean, biased var).
pub fn channel_stats<T: Element>(x: &[T], cols: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / cols;
    let n = c::<T>(rows as f64);
    let mut mean = vec![T::zero(); cols];
    for r in x.chunks(cols) {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m = *m + v;
        }
    }
    for m in mean.iter_mut() {
        *m = *m / n;
    }
    let mut var = vec![T::zero(); cols];
    for r in x.chunks(cols) {
        for ((s, &v), &m) in var.iter_mut().zip(r).zip(&mean) {
            *s = *s + (v - m) * (v - m);
        }
    }
    for s in var.iter_mut() {
        *s = *s / n;
    }
    (mean, var)
}

pub fn affine_normalize<T: Element>(x: &[T], mean: &[T], var: &[T], gamma: &[T], beta: &[T], eps: f64) -> Vec<T> {
    let cols = mean.len();
    let scale: Vec<T> = var.iter().zip(gamma).map(|(&v, &g)| g / (v + c(eps)).sqrt()).collect();
    let mut y = vec![T::zero(); x.len()];
    for (yr, xr) in y.chunks_mut(cols).zip(x.chunks(cols)) {
        for j in 0..cols {
            yr[j] = (xr[j] - mean[j]) * scale[j] + beta[j];
        }
    }
    y
}

/// Batch-norm backward with batch statistics.
pub fn batch_norm_train_backward<T: Element>(
    x: &[T],
    gamma: &[T],
    mean: &[T],
    var: &[T],
    gy: &[T],
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cols = mean.len();
    let rows = x.len() / cols;
    let n = c::<T>(rows as f64);
    let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + c(eps)).sqrt()).collect();
    let mut gg = vec![T::zero(); cols];
    let mut gb = vec![T::zero(); cols];
    for (xr, gr) in x.chunks(cols).zip(gy.chunks(cols)) {
        for j in 0..cols {
            let xhat = (xr[j] - mean[j]) * rstd[j];
            gg[j] = gg[j] + gr[j] * xhat;
            gb[j] = gb[j] + gr[j];
        }
    }
    let mut gx = vec![T::zero(); x.len()];
    for ((dst, xr), gr) in gx.chunks_mut(cols).zip(x.chunks(cols)).zip(gy.chunks(cols)) {
        for j in 0..cols {
            let xhat = (xr[j] - mean[j]) * rstd[j];
            dst[j] = gamma[j] * rstd[j] / n * (n * gr[j] - gb[j] - xhat * gg[j]);
        }
    }
    (gx, gg, gb)
}

/// Batch-norm backward with fixed (running) statistics. Returns gradients
/// for x, gamma, beta, mean and var.
#[allow(clippy::type_complexity)]
pub fn batch_norm_eval_backward<T: Element>(
    x: &[T],
    gamma: &[T],
    mean: &[T],
    var: &[T],
    gy: &[T],
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    let cols = mean.len();
    let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + c(eps)).sqrt()).collect();
    let mut gx = vec![T::zero(); x.len()];
    let mut gg = vec![T::zero(); cols];
    let mut gb = vec![T::zero(); cols];
    let mut gm = vec![T::zero(); cols];
    let mut gv = vec![T::zero(); cols];
    for ((dst, xr), gr) in gx.chunks_mut(cols).zip(x.chunks(cols)).zip(gy.chunks(cols)) {
        for j in 0..cols {
            let centered = xr[j] - mean[j];
            dst[j] = gr[j] * gamma[j] * rstd[j];
            gg[j] = gg[j] + gr[j] * centered * rstd[j];
            gb[j] = gb[j] + gr[j];
            gm[j] = gm[j] - gr[j] * gamma[j] * rstd[j];
            gv[j] = gv[j] - c::<T>(0.5) * gr[j] * gamma[j] * centered * rstd[j] * rstd[j] * rstd[j];
        }
    }
    (gx, gg, gb, gm, gv)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

pub fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let per_image = g.oh * g.ow * patch;
    let mut cols = vec![T::zero(); g.n * per_image];
    cols.par_chunks_mut(per_image).enumerate().for_each(|(img, dst)| {
        let src = &x[img * g.h * g.w * g.cin..(img + 1) * g.h * g.w * g.cin];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = &mut dst[(oy * g.ow + ox) * patch..(oy * g.ow + ox + 1) * patch];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let s = ((iy as usize) * g.w + ix as usize) * g.cin;
                        let d = (ky * g.kw + kx) * g.cin;
                        row[d..d + g.cin].copy_from_slice(&src[s..s + g.cin]);
                    }
                }
            }
        }
    });
    cols
}

pub fn col2im<T: Element>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let per_image = g.h * g.w * g.cin;
    let mut x = vec![T::zero(); g.n * per_image];
    x.par_chunks_mut(per_image).enumerate().for_each(|(img, dst)| {
        let src = &cols[img * g.oh * g.ow * patch..(img + 1) * g.oh * g.ow * patch];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = &src[(oy * g.ow + ox) * patch..(oy * g.ow + ox + 1) * patch];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let d = ((iy as usize) * g.w + ix as usize) * g.cin;
                        let s = (ky * g.kw + kx) * g.cin;
                        for ci in 0..g.cin {
                            dst[d + ci] = dst[d + ci] + row[s + ci];
                        }
                    }
                }
            }
        }
    });
    x
}

pub fn conv2d<T: Element>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = im2col(x, g);
    gemm(&cols, w, g.n * g.oh * g.ow, g.patch(), g.cout)
}

pub fn conv2d_backward<T: Element>(x: &[T], w: &[T], gy: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let rows = g.n * g.oh * g.ow;
    let cols = im2col(x, g);
    let gw = gemm_tn(&cols, gy, rows, g.patch(), g.cout);
    let gcols = gemm_nt(gy, w, rows, g.cout, g.patch());
    (col2im(&gcols, g), gw)
}

/// Depthwise same-padded 1D convolution over `(B, T, C)` with `w (K, C)`.
pub fn dwconv1d<T: Element>(x: &[T], w: &[T], b: usize, t: usize, ch: usize, k: usize) -> Vec<T> {
    let pad = k / 2;
    let mut y = vec![T::zero(); b * t * ch];
    for bi in 0..b {
        for ti in 0..t {
            let dst = (bi * t + ti) * ch;
            for ki in 0..k {
                let src_t = ti as isize + ki as isize - pad as isize;
                if src_t < 0 || src_t >= t as isize {
                    continue;
                }
                let src = (bi * t + src_t as usize) * ch;
                let wr = &w[ki * ch..(ki + 1) * ch];
                for ci in 0..ch {
                    y[dst + ci] = y[dst + ci] + wr[ci] * x[src + ci];
                }
            }
        }
    }
    y
}

pub fn dwconv1d_backward<T: Element>(
    x: &[T],
    w: &[T],
    gy: &[T],
    b: usize,
    t: usize,
    ch: usize,
    k: usize,
) -> (Vec<T>, Vec<T>) {
    let pad = k / 2;
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    for bi in 0..b {
        for ti in 0..t {
            let dst = (bi * t + ti) * ch;
            for ki in 0..k {
                let src_t = ti as isize + ki as isize - pad as isize;
                if src_t < 0 || src_t >= t as isize {
                    continue;
                }
                let src = (bi * t + src_t as usize) * ch;
                for ci in 0..ch {
                    gx[src + ci] = gx[src + ci] + w[ki * ch + ci] * gy[dst + ci];
                    gw[ki * ch + ci] = gw[ki * ch + ci] + x[src + ci] * gy[dst + ci];
                }
            }
        }
    }
    (gx, gw)
}

/// Dimensions of a selective scan: batch, length, channels, state size.
#[derive(Clone, Copy, Debug)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub chans: usize,
    pub state: usize,
}

pub struct ScanInputs<'a, T> {
    pub u: &'a [T],
    pub delta: &'a [T],
    pub a: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    pub d: &'a [T],
}

/// Discretized input gain for one (channel, state) pair.
#[inline]
fn input_gain<T: Element>(dt: T, a: T, abar: T, exact_zoh: bool) -> T {
    if exact_zoh {
        (abar - T::one()) / a
    } else {
        dt
    }
}

/// Sequential selective scan. Returns outputs `(B, T, E)` and all hidden
/// states `(B, T, E, N)`.
pub fn selective_scan<T: Element>(inp: &ScanInputs<'_, T>, dims: ScanDims, exact_zoh: bool) -> (Vec<T>, Vec<T>) {
    let ScanDims {
        batch,
        len,
        chans,
        state,
    } = dims;
    let mut y = vec![T::zero(); batch * len * chans];
    let mut hs = vec![T::zero(); batch * len * chans * state];
    y.par_chunks_mut(len * chans)
        .zip(hs.par_chunks_mut(len * chans * state))
        .enumerate()
        .for_each(|(bi, (yb, hb))| {
            let mut h = vec![T::zero(); chans * state];
            for t in 0..len {
                let row = (bi * len + t) * chans;
                let srow = (bi * len + t) * state;
                for e in 0..chans {
                    let dt = inp.delta[row + e];
                    let uu = inp.u[row + e];
                    let mut acc = inp.d[e] * uu;
                    for n in 0..state {
                        let a = inp.a[e * state + n];
                        let abar = (dt * a).exp();
                        let gain = input_gain(dt, a, abar, exact_zoh);
                        let hv = abar * h[e * state + n] + gain * inp.b[srow + n] * uu;
                        h[e * state + n] = hv;
                        acc = acc + inp.c[srow + n] * hv;
                    }
                    yb[t * chans + e] = acc;
                }
                hb[t * chans * state..(t + 1) * chans * state].copy_from_slice(&h);
            }
        });
    (y, hs)
}

pub struct ScanGrads<T> {
    pub u: Vec<T>,
    pub delta: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d: Vec<T>,
}

/// Reverse-time adjoint of [`selective_scan`].
pub fn selective_scan_backward<T: Element>(
    inp: &ScanInputs<'_, T>,
    hs: &[T],
    gy: &[T],
    dims: ScanDims,
    exact_zoh: bool,
) -> ScanGrads<T> {
    let ScanDims {
        batch,
        len,
        chans,
        state,
    } = dims;
    let per_b: Vec<_> = (0..batch)
        .into_par_iter()
        .map(|bi| {
            let mut gu = vec![T::zero(); len * chans];
            let mut gdelta = vec![T::zero(); len * chans];
            let mut gb = vec![T::zero(); len * state];
            let mut gc = vec![T::zero(); len * state];
            let mut ga = vec![T::zero(); chans * state];
            let mut gd = vec![T::zero(); chans];
            // gradient w.r.t. h_t flowing in from step t + 1, already scaled by abar_{t+1}
            let mut carry = vec![T::zero(); chans * state];
            for t in (0..len).rev() {
                let row = (bi * len + t) * chans;
                let srow = (bi * len + t) * state;
                let hrow = (bi * len + t) * chans * state;
                for e in 0..chans {
                    let g = gy[row + e];
                    let uu = inp.u[row + e];
                    let dt = inp.delta[row + e];
                    gd[e] = gd[e] + g * uu;
                    let mut gu_acc = g * inp.d[e];
                    let mut gdt = T::zero();
                    for n in 0..state {
                        let k = e * state + n;
                        let a = inp.a[k];
                        let bv = inp.b[srow + n];
                        let ht = hs[hrow + k];
                        let hprev = if t > 0 { hs[hrow - chans * state + k] } else { T::zero() };
                        gc[t * state + n] = gc[t * state + n] + g * ht;
                        let gh = carry[k] + g * inp.c[srow + n];
                        let abar = (dt * a).exp();
                        let gain = input_gain(dt, a, abar, exact_zoh);
                        let g_abar = gh * hprev;
                        let g_bbar = gh * uu;
                        gu_acc = gu_acc + gh * gain * bv;
                        gb[t * state + n] = gb[t * state + n] + g_bbar * gain;
                        gdt = gdt + g_abar * abar * a;
                        ga[k] = ga[k] + g_abar * abar * dt;
                        if exact_zoh {
                            gdt = gdt + g_bbar * bv * abar;
                            ga[k] = ga[k] + g_bbar * bv * (dt * abar * a - (abar - T::one())) / (a * a);
                        } else {
                            gdt = gdt + g_bbar * bv;
                        }
                        carry[k] = gh * abar;
                    }
                    gu[t * chans + e] = gu_acc;
                    gdelta[t * chans + e] = gdt;
                }
            }
            (gu, gdelta, gb, gc, ga, gd)
        })
        .collect();

    let mut out = ScanGrads {
        u: Vec::with_capacity(batch * len * chans),
        delta: Vec::with_capacity(batch * len * chans),
        a: vec![T::zero(); chans * state],
        b: Vec::with_capacity(batch * len * state),
        c: Vec::with_capacity(batch * len * state),
        d: vec![T::zero(); chans],
    };
    for (gu, gdelta, gb, gc, ga, gd) in per_b {
        out.u.extend(gu);
        out.delta.extend(gdelta);
        out.b.extend(gb);
        out.c.extend(gc);
        for (dst, v) in out.a.iter_mut().zip(ga) {
            *dst = *dst + v;
        }
        for (dst, v) in out.d.iter_mut().zip(gd) {
            *dst = *dst + v;
        }
    }
    out
}

/// Row-major strides.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub fn permute<T: Element>(x: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..x.len() {
        out.push(x[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Splits a shape around `axis` into (outer, extent, inner).
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn narrow<T: Element>(x: &[T], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<T> {
    let (outer, ext, inner) = split_axis(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * ext + start) * inner;
        out.extend_from_slice(&x[base..base + len * inner]);
    }
    out
}

pub fn narrow_backward<T: Element>(gy: &[T], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<T> {
    let (outer, ext, inner) = split_axis(shape, axis);
    let mut gx = vec![T::zero(); outer * ext * inner];
    for o in 0..outer {
        let base = (o * ext + start) * inner;
        gx[base..base + len * inner].copy_from_slice(&gy[o * len * inner..(o + 1) * len * inner]);
    }
    gx
}

/// Per-row logsumexp cross-entropy. Returns (weighted loss, softmax probs).
pub fn cross_entropy<T: Element>(logits: &[T], classes: usize, targets: &[usize], weights: &[f64]) -> (T, Vec<T>) {
    let probs = softmax_rows(logits, classes);
    let mut total = T::zero();
    for (r, row) in logits.chunks(classes).enumerate() {
        if weights[r] == 0.0 {
            continue;
        }
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        total = total + c::<T>(weights[r]) * (lse - row[targets[r]]);
    }
    (total, probs)
}
