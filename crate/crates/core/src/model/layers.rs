//! Differentiable building blocks of the decoder and the upsampling tail.

use crate::error::{Error, Result};
use crate::tensor::{reflect_index, FeatureMap};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Smooth GELU (tanh form).
pub fn gelu(x: f64) -> f64 {
    const K: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    const K: f64 = 0.7978845608028654;
    let u = K * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = K * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu_map(m: &FeatureMap) -> FeatureMap {
    m.map(gelu)
}

/// Backward of [`gelu_map`] given the forward input.
pub fn gelu_map_backward(input: &FeatureMap, grad_out: &FeatureMap) -> FeatureMap {
    let mut grad = grad_out.clone();
    for (g, x) in grad.data_mut().iter_mut().zip(input.data()) {
        *g *= gelu_grad(*x);
    }
    grad
}

/// Per-channel affine parameters of a layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNormParams {
    pub fn identity(c: usize) -> Self {
        LayerNormParams {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
        }
    }

    pub fn zeros(c: usize) -> Self {
        LayerNormParams {
            gamma: vec![0.0; c],
            beta: vec![0.0; c],
        }
    }
}

pub struct LayerNormCache {
    /// Normalized activations, before the affine transform.
    pub x_hat: FeatureMap,
    /// Per-site inverse standard deviation.
    pub inv_std: Vec<f64>,
}

/// Layer norm over the channel axis at every spatial site.
pub fn layer_norm_forward(m: &FeatureMap, p: &LayerNormParams) -> (FeatureMap, LayerNormCache) {
    let (c, h, w) = m.shape();
    debug_assert_eq!(p.gamma.len(), c);
    let sites = h * w;
    let mut x_hat = FeatureMap::zeros(c, h, w);
    let mut out = FeatureMap::zeros(c, h, w);
    let mut inv_std = vec![0.0; sites];
    let cf = c as f64;
    for s in 0..sites {
        let mut mean = 0.0;
        for ch in 0..c {
            mean += m.channel(ch)[s];
        }
        mean /= cf;
        let mut var = 0.0;
        for ch in 0..c {
            let d = m.channel(ch)[s] - mean;
            var += d * d;
        }
        var /= cf;
        let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[s] = istd;
        for ch in 0..c {
            let xh = (m.channel(ch)[s] - mean) * istd;
            x_hat.channel_mut(ch)[s] = xh;
            out.channel_mut(ch)[s] = p.gamma[ch] * xh + p.beta[ch];
        }
    }
    (out, LayerNormCache { x_hat, inv_std })
}

pub fn layer_norm_backward(
    p: &LayerNormParams,
    cache: &LayerNormCache,
    grad_out: &FeatureMap,
    grad_gamma: &mut [f64],
    grad_beta: &mut [f64],
) -> FeatureMap {
    let (c, h, w) = grad_out.shape();
    let sites = h * w;
    let cf = c as f64;
    let mut grad_in = FeatureMap::zeros(c, h, w);
    for s in 0..sites {
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for ch in 0..c {
            let go = grad_out.channel(ch)[s];
            let xh = cache.x_hat.channel(ch)[s];
            grad_gamma[ch] += go * xh;
            grad_beta[ch] += go;
            let dxh = go * p.gamma[ch];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh;
        }
        let istd = cache.inv_std[s];
        for ch in 0..c {
            let dxh = grad_out.channel(ch)[s] * p.gamma[ch];
            let xh = cache.x_hat.channel(ch)[s];
            grad_in.channel_mut(ch)[s] =
                istd * (dxh - sum_dxhat / cf - xh * sum_dxhat_xhat / cf);
        }
    }
    grad_in
}

/// Softmax attention weights of every window and head, kept for backward.
pub struct AttnCoreCache {
    /// `[window][head]` row-major n×n probability matrices.
    pub probs: Vec<Vec<Vec<f64>>>,
}

fn window_grid(h: usize, w: usize, ws: usize) -> (usize, usize, usize) {
    (h / ws, w / ws, ws * ws)
}

/// Token coordinates of a window in row-major order.
fn token_site(wy: usize, wx: usize, t: usize, ws: usize, w: usize) -> usize {
    let y = wy * ws + t / ws;
    let x = wx * ws + t % ws;
    y * w + x
}

/// Relative-position index of a token pair within a window.
pub fn rel_bias_index(t1: usize, t2: usize, ws: usize) -> usize {
    let (y1, x1) = (t1 / ws, t1 % ws);
    let (y2, x2) = (t2 / ws, t2 % ws);
    let dy = y1 + ws - 1 - y2;
    let dx = x1 + ws - 1 - x2;
    dy * (2 * ws - 1) + dx
}

/// Scaled dot-product attention inside non-overlapping `ws`x`ws` windows.
/// `q`, `k`, `v` are C×H×W with H, W divisible by `ws` and C divisible by
/// `heads`. `rel_bias`, when present, has `(2ws-1)^2 * heads` entries.
pub fn window_attention_core(
    q: &FeatureMap,
    k: &FeatureMap,
    v: &FeatureMap,
    ws: usize,
    heads: usize,
    rel_bias: Option<&[f64]>,
) -> Result<(FeatureMap, AttnCoreCache)> {
    let (c, h, w) = q.shape();
    if h % ws != 0 || w % ws != 0 {
        return Err(Error::Shape(format!(
            "window size {ws} must divide feature dims {h}x{w}"
        )));
    }
    if c % heads != 0 {
        return Err(Error::Config(format!(
            "channels {c} not divisible by {heads} heads"
        )));
    }
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (wy_n, wx_n, n) = window_grid(h, w, ws);
    let mut out = FeatureMap::zeros(c, h, w);
    let mut probs = Vec::with_capacity(wy_n * wx_n);
    for wy in 0..wy_n {
        for wx in 0..wx_n {
            let sites: Vec<usize> = (0..n).map(|t| token_site(wy, wx, t, ws, w)).collect();
            let mut window_probs = Vec::with_capacity(heads);
            for head in 0..heads {
                let c0 = head * dh;
                let mut p = vec![0.0; n * n];
                for t1 in 0..n {
                    let row = &mut p[t1 * n..(t1 + 1) * n];
                    let mut max = f64::NEG_INFINITY;
                    for (t2, slot) in row.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for d in 0..dh {
                            s += q.channel(c0 + d)[sites[t1]] * k.channel(c0 + d)[sites[t2]];
                        }
                        let mut s = s * scale;
                        if let Some(bias) = rel_bias {
                            s += bias[rel_bias_index(t1, t2, ws) * heads + head];
                        }
                        *slot = s;
                        max = max.max(s);
                    }
                    let mut denom = 0.0;
                    for slot in row.iter_mut() {
                        *slot = (*slot - max).exp();
                        denom += *slot;
                    }
                    for slot in row.iter_mut() {
                        *slot /= denom;
                    }
                }
                for t1 in 0..n {
                    for d in 0..dh {
                        let mut acc = 0.0;
                        for t2 in 0..n {
                            acc += p[t1 * n + t2] * v.channel(c0 + d)[sites[t2]];
                        }
                        out.channel_mut(c0 + d)[sites[t1]] = acc;
                    }
                }
                window_probs.push(p);
            }
            probs.push(window_probs);
        }
    }
    Ok((out, AttnCoreCache { probs }))
}

/// Backward of [`window_attention_core`]. Returns `(dq, dk, dv)`;
/// relative-bias gradients accumulate into `grad_rel_bias` when present.
#[allow(clippy::too_many_arguments)]
pub fn window_attention_core_backward(
    q: &FeatureMap,
    k: &FeatureMap,
    v: &FeatureMap,
    cache: &AttnCoreCache,
    grad_out: &FeatureMap,
    ws: usize,
    heads: usize,
    mut grad_rel_bias: Option<&mut [f64]>,
) -> (FeatureMap, FeatureMap, FeatureMap) {
    let (c, h, w) = q.shape();
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (wy_n, wx_n, n) = window_grid(h, w, ws);
    let mut dq = FeatureMap::zeros(c, h, w);
    let mut dk = FeatureMap::zeros(c, h, w);
    let mut dv = FeatureMap::zeros(c, h, w);
    for wy in 0..wy_n {
        for wx in 0..wx_n {
            let widx = wy * wx_n + wx;
            let sites: Vec<usize> = (0..n).map(|t| token_site(wy, wx, t, ws, w)).collect();
            for head in 0..heads {
                let c0 = head * dh;
                let p = &cache.probs[widx][head];
                // dV and dP.
                let mut dp = vec![0.0; n * n];
                for t2 in 0..n {
                    for d in 0..dh {
                        let mut acc = 0.0;
                        for t1 in 0..n {
                            acc += p[t1 * n + t2] * grad_out.channel(c0 + d)[sites[t1]];
                        }
                        dv.channel_mut(c0 + d)[sites[t2]] += acc;
                    }
                }
                for t1 in 0..n {
                    for t2 in 0..n {
                        let mut acc = 0.0;
                        for d in 0..dh {
                            acc += grad_out.channel(c0 + d)[sites[t1]]
                                * v.channel(c0 + d)[sites[t2]];
                        }
                        dp[t1 * n + t2] = acc;
                    }
                }
                // Softmax backward: dS = P ⊙ (dP - rowsum(dP ⊙ P)).
                for t1 in 0..n {
                    let row_p = &p[t1 * n..(t1 + 1) * n];
                    let row_dp = &mut dp[t1 * n..(t1 + 1) * n];
                    let dot: f64 = row_p.iter().zip(row_dp.iter()).map(|(a, b)| a * b).sum();
                    for (dpv, pv) in row_dp.iter_mut().zip(row_p) {
                        *dpv = pv * (*dpv - dot);
                    }
                }
                // dS feeds scores, bias, queries, keys.
                for t1 in 0..n {
                    for t2 in 0..n {
                        let ds = dp[t1 * n + t2];
                        if let Some(gb) = grad_rel_bias.as_deref_mut() {
                            gb[rel_bias_index(t1, t2, ws) * heads + head] += ds;
                        }
                        let dss = ds * scale;
                        for d in 0..dh {
                            dq.channel_mut(c0 + d)[sites[t1]] +=
                                dss * k.channel(c0 + d)[sites[t2]];
                            dk.channel_mut(c0 + d)[sites[t2]] +=
                                dss * q.channel(c0 + d)[sites[t1]];
                        }
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Depth-to-space: `C·d² × H × W` to `C × dH × dW`.
pub fn pixel_shuffle(m: &FeatureMap, d: usize) -> Result<FeatureMap> {
    if d == 0 {
        return Err(Error::Parameter("pixel shuffle factor must be >= 1".into()));
    }
    let (c_in, h, w) = m.shape();
    if c_in % (d * d) != 0 {
        return Err(Error::Shape(format!(
            "channels {c_in} not divisible by {}",
            d * d
        )));
    }
    if d == 1 {
        return Ok(m.clone());
    }
    let c = c_in / (d * d);
    let mut out = FeatureMap::zeros(c, h * d, w * d);
    for ch in 0..c {
        for y in 0..h * d {
            for x in 0..w * d {
                let src_c = ch * d * d + (y % d) * d + (x % d);
                *out.at_mut(ch, y, x) = m.at(src_c, y / d, x / d);
            }
        }
    }
    Ok(out)
}

/// Space-to-depth; exact inverse (and adjoint) of [`pixel_shuffle`].
pub fn pixel_unshuffle(m: &FeatureMap, d: usize) -> Result<FeatureMap> {
    if d == 0 {
        return Err(Error::Parameter("pixel shuffle factor must be >= 1".into()));
    }
    let (c, hd, wd) = m.shape();
    if hd % d != 0 || wd % d != 0 {
        return Err(Error::Shape(format!(
            "dims {hd}x{wd} not divisible by {d}"
        )));
    }
    if d == 1 {
        return Ok(m.clone());
    }
    let (h, w) = (hd / d, wd / d);
    let mut out = FeatureMap::zeros(c * d * d, h, w);
    for ch in 0..c {
        for y in 0..hd {
            for x in 0..wd {
                let dst_c = ch * d * d + (y % d) * d + (x % d);
                *out.at_mut(dst_c, y / d, x / d) = m.at(ch, y, x);
            }
        }
    }
    Ok(out)
}

/// Round `n` up to a multiple of `m`.
pub fn next_multiple(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Reflect-pad on the bottom/right so both dims are multiples of `ws`.
pub fn pad_reflect_to_multiple(m: &FeatureMap, ws: usize) -> FeatureMap {
    let (c, h, w) = m.shape();
    let hp = next_multiple(h, ws);
    let wp = next_multiple(w, ws);
    if hp == h && wp == w {
        return m.clone();
    }
    let mut out = FeatureMap::zeros(c, hp, wp);
    for ch in 0..c {
        for y in 0..hp {
            let sy = reflect_index(y as isize, h);
            for x in 0..wp {
                let sx = reflect_index(x as isize, w);
                *out.at_mut(ch, y, x) = m.at(ch, sy, sx);
            }
        }
    }
    out
}

/// Adjoint of [`pad_reflect_to_multiple`]: scatter-add padded gradients back
/// onto the original `h`x`w` extent.
pub fn pad_reflect_backward(grad_padded: &FeatureMap, h: usize, w: usize) -> FeatureMap {
    let (c, hp, wp) = grad_padded.shape();
    if hp == h && wp == w {
        return grad_padded.clone();
    }
    let mut out = FeatureMap::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..hp {
            let sy = reflect_index(y as isize, h);
            for x in 0..wp {
                let sx = reflect_index(x as isize, w);
                *out.at_mut(ch, sy, sx) += grad_padded.at(ch, y, x);
            }
        }
    }
    out
}

/// Keep the top-left `h`x`w` region.
pub fn crop(m: &FeatureMap, h: usize, w: usize) -> FeatureMap {
    let (c, mh, mw) = m.shape();
    if mh == h && mw == w {
        return m.clone();
    }
    let mut out = FeatureMap::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            out.channel_mut(ch)[y * w..(y + 1) * w]
                .copy_from_slice(&m.channel(ch)[y * mw..y * mw + w]);
        }
    }
    out
}

/// Adjoint of [`crop`]: zero-pad back to `hp`x`wp`.
pub fn crop_backward(grad: &FeatureMap, hp: usize, wp: usize) -> FeatureMap {
    let (c, h, w) = grad.shape();
    if hp == h && wp == w {
        return grad.clone();
    }
    let mut out = FeatureMap::zeros(c, hp, wp);
    for ch in 0..c {
        for y in 0..h {
            out.channel_mut(ch)[y * wp..y * wp + w]
                .copy_from_slice(&grad.channel(ch)[y * w..(y + 1) * w]);
        }
    }
    out
}

/// Mean over the spatial extent: C×H×W to C×1×1.
pub fn global_avg_pool(m: &FeatureMap) -> FeatureMap {
    let (c, h, w) = m.shape();
    let inv = 1.0 / (h * w) as f64;
    let mut out = FeatureMap::zeros(c, 1, 1);
    for ch in 0..c {
        out.channel_mut(ch)[0] = m.channel(ch).iter().sum::<f64>() * inv;
    }
    out
}
