//! Row-wise kernels for the toy transformer and their adjoints.
//!
//! Every per-row result is computed with a loop order that does not depend
//! on the number of rows, which keeps causal prefixes bitwise stable.

use crate::backend::AttentionMode;
use crate::Scalar;

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) struct LnCache<S> {
    xhat: Vec<S>,
    rstd: Vec<S>,
}

/// `y[r] = b + x[r]·W` with `W` row-major `[din, dout]`.
pub(crate) fn linear<S: Scalar>(x: &[S], din: usize, w: &[S], b: &[S], dout: usize) -> Vec<S> {
    let rows = x.len() / din;
    let mut y = Vec::with_capacity(rows * dout);
    for r in 0..rows {
        let start = y.len();
        y.extend_from_slice(b);
        let out = &mut y[start..];
        for (i, &xi) in x[r * din..(r + 1) * din].iter().enumerate() {
            let wrow = &w[i * dout..(i + 1) * dout];
            out.iter_mut().zip(wrow).for_each(|(o, &wv)| *o += xi * wv);
        }
    }
    y
}

/// Adjoint of [`linear`]: accumulates `dW` at `grads[w_off..]` and `db` at
/// `grads[b_off..]`, returns `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<S: Scalar>(
    x: &[S],
    dy: &[S],
    din: usize,
    dout: usize,
    w: &[S],
    grads: &mut [S],
    w_off: usize,
    b_off: usize,
) -> Vec<S> {
    let rows = dy.len() / dout;
    let mut dx = vec![S::zero(); rows * din];
    for r in 0..rows {
        let dyr = &dy[r * dout..(r + 1) * dout];
        let xr = &x[r * din..(r + 1) * din];
        for (db, &g) in grads[b_off..b_off + dout].iter_mut().zip(dyr) {
            *db += g;
        }
        for i in 0..din {
            let wrow = &w[i * dout..(i + 1) * dout];
            let mut acc = S::zero();
            for (&wv, &g) in wrow.iter().zip(dyr) {
                acc += wv * g;
            }
            dx[r * din + i] = acc;
            let xi = xr[i];
            let dw = &mut grads[w_off + i * dout..w_off + (i + 1) * dout];
            dw.iter_mut().zip(dyr).for_each(|(d, &g)| *d += xi * g);
        }
    }
    dx
}

pub(crate) fn layer_norm<S: Scalar>(x: &[S], d: usize, gain: &[S], shift: &[S]) -> (Vec<S>, LnCache<S>) {
    let rows = x.len() / d;
    let n = S::of(d as f64);
    let eps = S::of(LN_EPS);
    let mut y = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(rows);
    for row in x.chunks_exact(d) {
        let mean = row.iter().copied().sum::<S>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
        let rs = (var + eps).sqrt().recip();
        rstd.push(rs);
        for ((&v, &g), &b) in row.iter().zip(gain).zip(shift) {
            let h = (v - mean) * rs;
            xhat.push(h);
            y.push(g * h + b);
        }
    }
    (y, LnCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward<S: Scalar>(
    dy: &[S],
    cache: &LnCache<S>,
    d: usize,
    gain: &[S],
    d_gain: &mut [S],
    d_shift: &mut [S],
) -> Vec<S> {
    let n = S::of(d as f64);
    let mut dx = Vec::with_capacity(dy.len());
    for ((dyr, xh), &rs) in dy.chunks_exact(d).zip(cache.xhat.chunks_exact(d)).zip(&cache.rstd) {
        let mut sum_dxh = S::zero();
        let mut sum_dxh_xh = S::zero();
        for e in 0..d {
            d_gain[e] += dyr[e] * xh[e];
            d_shift[e] += dyr[e];
            let dxh = dyr[e] * gain[e];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[e];
        }
        let mean_dxh = sum_dxh / n;
        let mean_dxh_xh = sum_dxh_xh / n;
        for e in 0..d {
            let dxh = dyr[e] * gain[e];
            dx.push(rs * (dxh - mean_dxh - xh[e] * mean_dxh_xh));
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<S: Scalar>(u: S) -> S {
    let inner = S::of(GELU_C) * (u + S::of(GELU_A) * u * u * u);
    S::of(0.5) * u * (S::one() + inner.tanh())
}

pub(crate) fn gelu_grad<S: Scalar>(u: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let t = (c * (u + a * u * u * u)).tanh();
    let half = S::of(0.5);
    half * (S::one() + t) + half * u * (S::one() - t * t) * c * (S::one() + S::of(3.0) * a * u * u)
}

fn visible(i: usize, t_len: usize, mode: AttentionMode) -> usize {
    match mode {
        AttentionMode::Causal => i + 1,
        AttentionMode::Bidirectional => t_len,
    }
}

/// Multi-head scaled dot-product attention. Returns the concatenated head
/// outputs `[T, d]` and the attention weights `[heads, T, T]` (zero where
/// masked).
pub(crate) fn attention<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    t_len: usize,
    d: usize,
    heads: usize,
    mode: AttentionMode,
) -> (Vec<S>, Vec<S>) {
    let dh = d / heads;
    let scale = S::of(1.0 / (dh as f64).sqrt());
    let mut ctx = vec![S::zero(); t_len * d];
    let mut probs = vec![S::zero(); heads * t_len * t_len];
    let mut scores = Vec::with_capacity(t_len);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..t_len {
            let n = visible(i, t_len, mode);
            let qi = &q[i * d..][cols.clone()];
            scores.clear();
            for j in 0..n {
                let kj = &k[j * d..][cols.clone()];
                let s = qi.iter().zip(kj).fold(S::zero(), |acc, (&a, &b)| acc + a * b);
                scores.push(s * scale);
            }
            let max = scores.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            let prow = &mut probs[(h * t_len + i) * t_len..][..t_len];
            let out = &mut ctx[i * d..][cols.clone()];
            for (j, &e) in scores.iter().enumerate() {
                let p = e / z;
                prow[j] = p;
                let vj = &v[j * d..][cols.clone()];
                out.iter_mut().zip(vj).for_each(|(o, &vv)| *o += p * vv);
            }
        }
    }
    (ctx, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<S: Scalar>(
    dctx: &[S],
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    t_len: usize,
    d: usize,
    heads: usize,
    mode: AttentionMode,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let dh = d / heads;
    let scale = S::of(1.0 / (dh as f64).sqrt());
    let mut dq = vec![S::zero(); t_len * d];
    let mut dk = vec![S::zero(); t_len * d];
    let mut dv = vec![S::zero(); t_len * d];
    let mut dp = Vec::with_capacity(t_len);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..t_len {
            let n = visible(i, t_len, mode);
            let prow = &probs[(h * t_len + i) * t_len..][..t_len];
            let gi = &dctx[i * d..][cols.clone()];
            dp.clear();
            let mut weighted = S::zero();
            for j in 0..n {
                let vj = &v[j * d..][cols.clone()];
                let g = gi.iter().zip(vj).fold(S::zero(), |acc, (&a, &b)| acc + a * b);
                dp.push(g);
                weighted += prow[j] * g;
                let dvj = &mut dv[j * d..][cols.clone()];
                dvj.iter_mut().zip(gi).for_each(|(o, &g)| *o += prow[j] * g);
            }
            for j in 0..n {
                let ds = prow[j] * (dp[j] - weighted) * scale;
                if ds == S::zero() {
                    continue;
                }
                for e in cols.clone() {
                    dq[i * d + e] += ds * k[j * d + e];
                    dk[j * d + e] += ds * q[i * d + e];
                }
            }
        }
    }
    (dq, dk, dv)
}
