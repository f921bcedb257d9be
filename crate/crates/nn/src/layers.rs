//! Forward and backward kernels for the fixed layer set.
//!
//! All tensors are row-major. Image tensors are `[N, C, H, W]`, dense
//! activations `[N, F]`, sequences `[N, T, F]`.

use crate::scalar::{gemm, Scalar};

/// Valid output range `[lo, hi)` along one axis for a tap offset `d`.
#[inline]
fn tap_range(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(lo as isize) as usize;
    (lo.min(n), hi.min(n))
}

/// Unfold a `[c, h, w]` image into `[c*k*k, h*w]` columns with zero "same" padding.
pub(crate) fn im2col<S: Scalar>(x: &[S], c: usize, h: usize, w: usize, k: usize, col: &mut [S]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let out = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let (ylo, yhi) = tap_range(dy, h);
                let (xlo, xhi) = tap_range(dx, w);
                out[..ylo * w].fill(S::zero());
                out[yhi * w..].fill(S::zero());
                for y in ylo..yhi {
                    let sy = (y as isize + dy) as usize;
                    let dst = &mut out[y * w..(y + 1) * w];
                    dst[..xlo].fill(S::zero());
                    dst[xhi..].fill(S::zero());
                    let s0 = (sy * w) as isize + xlo as isize + dx;
                    dst[xlo..xhi].copy_from_slice(&plane[s0 as usize..s0 as usize + (xhi - xlo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]; accumulates into `dx`.
pub(crate) fn col2im<S: Scalar>(col: &[S], c: usize, h: usize, w: usize, k: usize, dx: &mut [S]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dxo = kx as isize - pad;
                let (ylo, yhi) = tap_range(dy, h);
                let (xlo, xhi) = tap_range(dxo, w);
                for y in ylo..yhi {
                    let sy = (y as isize + dy) as usize;
                    let s0 = ((sy * w) as isize + xlo as isize + dxo) as usize;
                    let dst = &mut plane[s0..s0 + (xhi - xlo)];
                    for (d, &v) in dst.iter_mut().zip(&src[y * w + xlo..y * w + xhi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Below this unfolded depth the GEMM packing overhead dominates and plain
/// row updates are faster.
const AXPY_DEPTH: usize = 32;

#[inline]
fn axpy<S: Scalar>(a: S, x: &[S], y: &mut [S]) {
    for (d, &v) in y.iter_mut().zip(x) {
        *d += a * v;
    }
}

/// Dot product with independent partial sums so the loop vectorises.
#[inline]
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = S::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    acc.iter().fold(tail, |s, v| s + *v)
}

pub(crate) struct ConvShape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
}

pub(crate) fn conv2d_forward<S: Scalar>(
    x: &[S],
    kernel: &[S],
    bias: &[S],
    s: &ConvShape,
    y: &mut [S],
) {
    let hw = s.h * s.w;
    let ckk = s.c * s.k * s.k;
    let mut col = vec![S::zero(); ckk * hw];
    for ni in 0..s.n {
        let xin = &x[ni * s.c * hw..(ni + 1) * s.c * hw];
        im2col(xin, s.c, s.h, s.w, s.k, &mut col);
        let out = &mut y[ni * s.f * hw..(ni + 1) * s.f * hw];
        for (fi, chunk) in out.chunks_mut(hw).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[fi]);
        }
        if ckk <= AXPY_DEPTH {
            for (fi, orow) in out.chunks_exact_mut(hw).enumerate() {
                for (r, crow) in col.chunks_exact(hw).enumerate() {
                    axpy(kernel[fi * ckk + r], crow, orow);
                }
            }
        } else {
            gemm(s.f, ckk, hw, kernel, false, &col, false, out, true);
        }
    }
}

pub(crate) fn conv2d_backward<S: Scalar>(
    x: &[S],
    kernel: &[S],
    dy: &[S],
    s: &ConvShape,
    mut dx: Option<&mut [S]>,
    dkernel: &mut [S],
    dbias: &mut [S],
) {
    let hw = s.h * s.w;
    let ckk = s.c * s.k * s.k;
    let mut col = vec![S::zero(); ckk * hw];
    let mut dcol = vec![S::zero(); if dx.is_some() { ckk * hw } else { 0 }];
    for ni in 0..s.n {
        let xin = &x[ni * s.c * hw..(ni + 1) * s.c * hw];
        let g = &dy[ni * s.f * hw..(ni + 1) * s.f * hw];
        im2col(xin, s.c, s.h, s.w, s.k, &mut col);
        // dK[f, ckk] += dY[f, hw] · col[ckk, hw]^T, as dot products: the
        // reduction axis is long and both operands are contiguous along it.
        for (fi, grow) in g.chunks_exact(hw).enumerate() {
            for (r, crow) in col.chunks_exact(hw).enumerate() {
                dkernel[fi * ckk + r] += dot(grow, crow);
            }
        }
        for (fi, chunk) in g.chunks(hw).enumerate() {
            dbias[fi] += chunk.iter().copied().sum();
        }
        let Some(dx) = dx.as_deref_mut() else { continue };
        // dcol[ckk, hw] = K[f, ckk]^T · dY[f, hw]
        gemm(ckk, s.f, hw, kernel, true, g, false, &mut dcol, false);
        col2im(
            &dcol,
            s.c,
            s.h,
            s.w,
            s.k,
            &mut dx[ni * s.c * hw..(ni + 1) * s.c * hw],
        );
    }
}

/// Non-overlapping max pooling with floor semantics. Returns argmax offsets
/// (relative to each input plane) for the backward pass.
pub(crate) fn maxpool_forward<S: Scalar>(
    x: &[S],
    planes: usize,
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
    y: &mut [S],
) -> Vec<u32> {
    let (oh, ow) = (h / ph, w / pw);
    let mut arg = vec![0u32; planes * oh * ow];
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        let yp = &mut y[p * oh * ow..(p + 1) * oh * ow];
        let ap = &mut arg[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let yrow = &mut yp[oy * ow..(oy + 1) * ow];
            let arow = &mut ap[oy * ow..(oy + 1) * ow];
            // Row-major scan with a strict comparison keeps the first maximum.
            for dy in 0..ph {
                let r = (oy * ph + dy) * w;
                let src = &plane[r..r + ow * pw];
                for (ox, win) in src.chunks_exact(pw).enumerate() {
                    for (dx, &v) in win.iter().enumerate() {
                        if (dy == 0 && dx == 0) || v > yrow[ox] {
                            yrow[ox] = v;
                            arow[ox] = (r + ox * pw + dx) as u32;
                        }
                    }
                }
            }
        }
    }
    arg
}

pub(crate) fn maxpool_backward<S: Scalar>(
    dy: &[S],
    arg: &[u32],
    plane_in: usize,
    plane_out: usize,
    dx: &mut [S],
) {
    for (o, (&g, &a)) in dy.iter().zip(arg).enumerate() {
        let p = o / plane_out;
        dx[p * plane_in + a as usize] += g;
    }
}

/// `y = x·W + b` for `x: [n, fin]`, `W: [fin, fout]`.
pub(crate) fn dense_forward<S: Scalar>(
    x: &[S],
    wt: &[S],
    b: &[S],
    n: usize,
    fin: usize,
    fout: usize,
    y: &mut [S],
) {
    for row in y.chunks_mut(fout) {
        row.copy_from_slice(b);
    }
    gemm(n, fin, fout, x, false, wt, false, y, true);
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward<S: Scalar>(
    x: &[S],
    wt: &[S],
    dy: &[S],
    n: usize,
    fin: usize,
    fout: usize,
    dx: &mut [S],
    dw: &mut [S],
    db: &mut [S],
) {
    gemm(fin, n, fout, x, true, dy, false, dw, true);
    for row in dy.chunks(fout) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += *g;
        }
    }
    gemm(n, fout, fin, dy, false, wt, true, dx, true);
}

#[inline]
pub(crate) fn elu<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        v
    } else {
        v.exp() - S::one()
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn softmax_rows<S: Scalar>(x: &[S], width: usize, y: &mut [S]) {
    for (xr, yr) in x.chunks(width).zip(y.chunks_mut(width)) {
        let max = xr.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in yr.iter_mut() {
            *o /= sum;
        }
    }
}

pub(crate) fn softmax_backward<S: Scalar>(y: &[S], dy: &[S], width: usize, dx: &mut [S]) {
    for ((yr, gr), dr) in y.chunks(width).zip(dy.chunks(width)).zip(dx.chunks_mut(width)) {
        let dot: S = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
        for ((d, &p), &g) in dr.iter_mut().zip(yr).zip(gr) {
            *d += p * (g - dot);
        }
    }
}

/// Per-channel statistics layout for batch normalisation over `[N, C, rest…]`.
pub(crate) struct BnShape {
    pub n: usize,
    pub c: usize,
    pub inner: usize,
}

impl BnShape {
    fn for_each_channel<S: Scalar>(&self, x: &[S], ch: usize, mut f: impl FnMut(usize, S)) {
        for ni in 0..self.n {
            let base = (ni * self.c + ch) * self.inner;
            for i in 0..self.inner {
                f(base + i, x[base + i]);
            }
        }
    }
}

pub(crate) struct BnCache<S> {
    pub xhat: Vec<S>,
    pub inv_std: Vec<S>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_train<S: Scalar>(
    x: &[S],
    gamma: &[S],
    beta: &[S],
    s: &BnShape,
    eps: S,
    momentum: S,
    running_mean: &mut [S],
    running_var: &mut [S],
    y: &mut [S],
) -> BnCache<S> {
    let count = S::from_f64((s.n * s.inner) as f64);
    let mut xhat = vec![S::zero(); x.len()];
    let mut inv_std = vec![S::zero(); s.c];
    for ch in 0..s.c {
        let mut mean = S::zero();
        s.for_each_channel(x, ch, |_, v| mean += v);
        mean /= count;
        let mut var = S::zero();
        s.for_each_channel(x, ch, |_, v| var += (v - mean) * (v - mean));
        var /= count;
        let is = S::one() / (var + eps).sqrt();
        inv_std[ch] = is;
        s.for_each_channel(x, ch, |i, v| {
            let h = (v - mean) * is;
            xhat[i] = h;
            y[i] = gamma[ch] * h + beta[ch];
        });
        running_mean[ch] = momentum * running_mean[ch] + (S::one() - momentum) * mean;
        running_var[ch] = momentum * running_var[ch] + (S::one() - momentum) * var;
    }
    BnCache { xhat, inv_std }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_infer<S: Scalar>(
    x: &[S],
    gamma: &[S],
    beta: &[S],
    s: &BnShape,
    eps: S,
    running_mean: &[S],
    running_var: &[S],
    y: &mut [S],
) {
    for ch in 0..s.c {
        let is = S::one() / (running_var[ch] + eps).sqrt();
        s.for_each_channel(x, ch, |i, v| {
            y[i] = gamma[ch] * (v - running_mean[ch]) * is + beta[ch];
        });
    }
}

pub(crate) fn batchnorm_backward<S: Scalar>(
    dy: &[S],
    gamma: &[S],
    cache: &BnCache<S>,
    s: &BnShape,
    dx: &mut [S],
    dgamma: &mut [S],
    dbeta: &mut [S],
) {
    let count = S::from_f64((s.n * s.inner) as f64);
    for ch in 0..s.c {
        let mut sum_g = S::zero();
        let mut sum_gx = S::zero();
        s.for_each_channel(dy, ch, |i, g| {
            sum_g += g;
            sum_gx += g * cache.xhat[i];
        });
        dgamma[ch] += sum_gx;
        dbeta[ch] += sum_g;
        let k = gamma[ch] * cache.inv_std[ch] / count;
        s.for_each_channel(dy, ch, |i, g| {
            dx[i] += k * (count * g - sum_g - cache.xhat[i] * sum_gx);
        });
    }
}

/// Activations recorded by one LSTM direction.
pub(crate) struct LstmCache<S> {
    /// Inputs per step, each `[n, f]`, in processing order.
    pub xs: Vec<Vec<S>>,
    /// Hidden states `h_0..=h_T`, each `[n, u]`.
    pub hs: Vec<Vec<S>>,
    /// Cell states `c_0..=c_T`.
    pub cs: Vec<Vec<S>>,
    /// Activated gates per step `[n, 4u]` ordered (i, f, g, o).
    pub gates: Vec<Vec<S>>,
}

pub(crate) struct LstmWeights<'a, S> {
    /// `[f, 4u]`
    pub kernel: &'a [S],
    /// `[u, 4u]`
    pub recurrent: &'a [S],
    /// `[4u]`
    pub bias: &'a [S],
}

/// Runs one direction over `xs` (already in processing order).
pub(crate) fn lstm_forward<S: Scalar>(
    xs: Vec<Vec<S>>,
    w: &LstmWeights<S>,
    n: usize,
    f: usize,
    u: usize,
) -> LstmCache<S> {
    let g4 = 4 * u;
    let mut hs = vec![vec![S::zero(); n * u]];
    let mut cs = vec![vec![S::zero(); n * u]];
    let mut gates_all = Vec::with_capacity(xs.len());
    for x in &xs {
        let mut z = vec![S::zero(); n * g4];
        for row in z.chunks_mut(g4) {
            row.copy_from_slice(w.bias);
        }
        gemm(n, f, g4, x, false, w.kernel, false, &mut z, true);
        let hprev = hs.last().unwrap();
        gemm(n, u, g4, hprev, false, w.recurrent, false, &mut z, true);
        let cprev = cs.last().unwrap();
        let mut h = vec![S::zero(); n * u];
        let mut c = vec![S::zero(); n * u];
        for ni in 0..n {
            let zr = &mut z[ni * g4..(ni + 1) * g4];
            for j in 0..u {
                let i_g = sigmoid(zr[j]);
                let f_g = sigmoid(zr[u + j]);
                let g_g = zr[2 * u + j].tanh();
                let o_g = sigmoid(zr[3 * u + j]);
                zr[j] = i_g;
                zr[u + j] = f_g;
                zr[2 * u + j] = g_g;
                zr[3 * u + j] = o_g;
                let cv = f_g * cprev[ni * u + j] + i_g * g_g;
                c[ni * u + j] = cv;
                h[ni * u + j] = o_g * cv.tanh();
            }
        }
        gates_all.push(z);
        hs.push(h);
        cs.push(c);
    }
    LstmCache {
        xs,
        hs,
        cs,
        gates: gates_all,
    }
}

pub(crate) struct LstmGrads<'a, S> {
    pub kernel: &'a mut [S],
    pub recurrent: &'a mut [S],
    pub bias: &'a mut [S],
}

/// Backpropagates a gradient on the final hidden state. Returns per-step
/// input gradients in processing order.
pub(crate) fn lstm_backward<S: Scalar>(
    cache: &LstmCache<S>,
    w: &LstmWeights<S>,
    dh_final: &[S],
    n: usize,
    f: usize,
    u: usize,
    grads: LstmGrads<S>,
) -> Vec<Vec<S>> {
    let g4 = 4 * u;
    let steps = cache.xs.len();
    let mut dxs = vec![Vec::new(); steps];
    let mut dh = dh_final.to_vec();
    let mut dc = vec![S::zero(); n * u];
    let one = S::one();
    for t in (0..steps).rev() {
        let gates = &cache.gates[t];
        let c = &cache.cs[t + 1];
        let cprev = &cache.cs[t];
        let mut dz = vec![S::zero(); n * g4];
        for ni in 0..n {
            for j in 0..u {
                let k = ni * u + j;
                let gr = &gates[ni * g4..(ni + 1) * g4];
                let (i_g, f_g, g_g, o_g) = (gr[j], gr[u + j], gr[2 * u + j], gr[3 * u + j]);
                let tc = c[k].tanh();
                let d_o = dh[k] * tc;
                let dcv = dc[k] + dh[k] * o_g * (one - tc * tc);
                let d_i = dcv * g_g;
                let d_g = dcv * i_g;
                let d_f = dcv * cprev[k];
                dc[k] = dcv * f_g;
                let dzr = &mut dz[ni * g4..(ni + 1) * g4];
                dzr[j] = d_i * i_g * (one - i_g);
                dzr[u + j] = d_f * f_g * (one - f_g);
                dzr[2 * u + j] = d_g * (one - g_g * g_g);
                dzr[3 * u + j] = d_o * o_g * (one - o_g);
            }
        }
        gemm(f, n, g4, &cache.xs[t], true, &dz, false, grads.kernel, true);
        gemm(u, n, g4, &cache.hs[t], true, &dz, false, grads.recurrent, true);
        for row in dz.chunks(g4) {
            for (b, g) in grads.bias.iter_mut().zip(row) {
                *b += *g;
            }
        }
        let mut dx = vec![S::zero(); n * f];
        gemm(n, g4, f, &dz, false, w.kernel, true, &mut dx, false);
        dxs[t] = dx;
        let mut dhp = vec![S::zero(); n * u];
        gemm(n, g4, u, &dz, false, w.recurrent, true, &mut dhp, false);
        dh = dhp;
    }
    dxs
}
