//! Forward and reverse passes of the reference transformer.
//!
//! Every per-row quantity at row `i` is computed from rows `0..=i` only and
//! in a fixed order, so editing later rows of the input leaves earlier
//! outputs bit-identical.

use super::{ReferenceModel, LAYER_NORM_EPS};
use crate::numeric::{dot, mat_vec_acc, vec_mat_acc};
use crate::types::EmbeddingMatrix;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_K * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_K * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * u * u)
}

#[derive(Debug, Default)]
struct LayerNormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], rows: usize, d: usize, gain: &[f64], bias: &[f64], out: &mut [f64], cache: Option<&mut LayerNormCache>) {
    let mut xhat_all = Vec::new();
    let mut rstd_all = Vec::new();
    let keep = cache.is_some();
    for i in 0..rows {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let o = &mut out[i * d..(i + 1) * d];
        for k in 0..d {
            let xh = (row[k] - mean) * rstd;
            o[k] = gain[k] * xh + bias[k];
            if keep {
                xhat_all.push(xh);
            }
        }
        if keep {
            rstd_all.push(rstd);
        }
    }
    if let Some(c) = cache {
        c.xhat = xhat_all;
        c.rstd = rstd_all;
    }
}

/// Adds the input gradient of a layer norm to `dx`.
fn layer_norm_backward(dy: &[f64], cache: &LayerNormCache, rows: usize, d: usize, gain: &[f64], dx: &mut [f64]) {
    let mut dxhat = vec![0.0; d];
    for i in 0..rows {
        let xhat = &cache.xhat[i * d..(i + 1) * d];
        let dyr = &dy[i * d..(i + 1) * d];
        for k in 0..d {
            dxhat[k] = dyr[k] * gain[k];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dot(&dxhat, xhat) / d as f64;
        let rstd = cache.rstd[i];
        let out = &mut dx[i * d..(i + 1) * d];
        for k in 0..d {
            out[k] += rstd * (dxhat[k] - mean_dxhat - xhat[k] * mean_dxhat_xhat);
        }
    }
}

/// `out = x W + b` row by row.
fn linear(x: &[f64], rows: usize, d_in: usize, d_out: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * d_out);
    for i in 0..rows {
        let mut y = b.to_vec();
        vec_mat_acc(&x[i * d_in..(i + 1) * d_in], w, d_out, &mut y);
        out.extend_from_slice(&y);
    }
    out
}

/// `dx += dy Wᵀ` row by row.
fn linear_backward_input(dy: &[f64], rows: usize, d_in: usize, d_out: usize, w: &[f64], dx: &mut [f64]) {
    for i in 0..rows {
        mat_vec_acc(w, &dy[i * d_out..(i + 1) * d_out], d_out, &mut dx[i * d_in..(i + 1) * d_in]);
    }
}

#[derive(Debug, Default)]
struct LayerCache {
    ln1: LayerNormCache,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per head, per row `i`, the `i + 1` attention weights.
    att: Vec<f64>,
    ln2: LayerNormCache,
    pre_act: Vec<f64>,
}

pub(crate) struct ForwardPass {
    rows: usize,
    layers: Vec<LayerCache>,
    final_ln: LayerNormCache,
    pub logits: Vec<f64>,
}

impl ForwardPass {
    pub fn logits_rows(&self, vocab: usize) -> Vec<Vec<f64>> {
        self.logits.chunks(vocab).map(<[f64]>::to_vec).collect()
    }
}

fn tri(i: usize) -> usize {
    i * (i + 1) / 2
}

pub(crate) fn forward(model: &ReferenceModel, h: &EmbeddingMatrix, keep_cache: bool) -> ForwardPass {
    let cfg = model.config();
    let lay = model.layout();
    let (t, d, f, nh) = (h.rows(), cfg.dim, cfg.ffn_dim, cfg.num_heads);
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut x = h.as_slice().to_vec();
    let mut caches = Vec::with_capacity(lay.layers.len());
    let mut normed = vec![0.0; t * d];

    for off in &lay.layers {
        let mut cache = LayerCache::default();

        layer_norm(&x, t, d, model.slice(off.ln1_gain, d), model.slice(off.ln1_bias, d), &mut normed, keep_cache.then_some(&mut cache.ln1));
        let q = linear(&normed, t, d, d, model.slice(off.w_q, d * d), model.slice(off.b_q, d));
        let k = linear(&normed, t, d, d, model.slice(off.w_k, d * d), model.slice(off.b_k, d));
        let v = linear(&normed, t, d, d, model.slice(off.w_v, d * d), model.slice(off.b_v, d));

        let mut ctx = vec![0.0; t * d];
        let mut att = vec![0.0; nh * tri(t)];
        let mut scores = Vec::with_capacity(t);
        for head in 0..nh {
            let hs = head * hd;
            for i in 0..t {
                let qi = &q[i * d + hs..i * d + hs + hd];
                scores.clear();
                scores.extend((0..=i).map(|j| dot(qi, &k[j * d + hs..j * d + hs + hd]) * scale));
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let a = &mut att[head * tri(t) + tri(i)..head * tri(t) + tri(i) + i + 1];
                let c = &mut ctx[i * d + hs..i * d + hs + hd];
                for (j, (aj, s)) in a.iter_mut().zip(&scores).enumerate() {
                    *aj = s / sum;
                    let vj = &v[j * d + hs..j * d + hs + hd];
                    for (cc, vv) in c.iter_mut().zip(vj) {
                        *cc += *aj * vv;
                    }
                }
            }
        }
        let o = linear(&ctx, t, d, d, model.slice(off.w_o, d * d), model.slice(off.b_o, d));
        x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

        layer_norm(&x, t, d, model.slice(off.ln2_gain, d), model.slice(off.ln2_bias, d), &mut normed, keep_cache.then_some(&mut cache.ln2));
        let pre = linear(&normed, t, d, f, model.slice(off.w_1, d * f), model.slice(off.b_1, f));
        let act: Vec<f64> = pre.iter().map(|&u| gelu(u)).collect();
        let mlp = linear(&act, t, f, d, model.slice(off.w_2, f * d), model.slice(off.b_2, d));
        x.iter_mut().zip(&mlp).for_each(|(a, b)| *a += b);

        if keep_cache {
            cache.q = q;
            cache.k = k;
            cache.v = v;
            cache.att = att;
            cache.pre_act = pre;
        }
        caches.push(cache);
    }

    let mut final_ln = LayerNormCache::default();
    layer_norm(&x, t, d, model.slice(lay.final_gain, d), model.slice(lay.final_bias, d), &mut normed, keep_cache.then_some(&mut final_ln));

    let vocab = cfg.vocab_size;
    let unembed = model.slice(lay.unembedding, vocab * d);
    let mut logits = vec![0.0; t * vocab];
    for i in 0..t {
        mat_vec_acc(unembed, &normed[i * d..(i + 1) * d], d, &mut logits[i * vocab..(i + 1) * vocab]);
    }

    ForwardPass {
        rows: t,
        layers: caches,
        final_ln,
        logits,
    }
}

/// Gradient with respect to the input rows given `d loss / d logits`.
pub(crate) fn backward(model: &ReferenceModel, pass: &ForwardPass, dlogits: &[f64]) -> Vec<f64> {
    let cfg = model.config();
    let lay = model.layout();
    let (t, d, f, nh) = (pass.rows, cfg.dim, cfg.ffn_dim, cfg.num_heads);
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let vocab = cfg.vocab_size;

    let unembed = model.slice(lay.unembedding, vocab * d);
    let mut dnormed = vec![0.0; t * d];
    for i in 0..t {
        vec_mat_acc(&dlogits[i * vocab..(i + 1) * vocab], unembed, d, &mut dnormed[i * d..(i + 1) * d]);
    }
    let mut dx = vec![0.0; t * d];
    layer_norm_backward(&dnormed, &pass.final_ln, t, d, model.slice(lay.final_gain, d), &mut dx);

    for (off, cache) in lay.layers.iter().zip(&pass.layers).rev() {
        // MLP branch: x += W2 gelu(W1 LN2(x) + b1) + b2
        let mut dact = vec![0.0; t * f];
        linear_backward_input(&dx, t, f, d, model.slice(off.w_2, f * d), &mut dact);
        for (g, &u) in dact.iter_mut().zip(&cache.pre_act) {
            *g *= gelu_grad(u);
        }
        let mut dn = vec![0.0; t * d];
        linear_backward_input(&dact, t, d, f, model.slice(off.w_1, d * f), &mut dn);
        layer_norm_backward(&dn, &cache.ln2, t, d, model.slice(off.ln2_gain, d), &mut dx);

        // Attention branch: x += Wo Attn(LN1(x)) + bo
        let mut dctx = vec![0.0; t * d];
        linear_backward_input(&dx, t, d, d, model.slice(off.w_o, d * d), &mut dctx);
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut datt = Vec::with_capacity(t);
        for head in 0..nh {
            let hs = head * hd;
            for i in 0..t {
                let a = &cache.att[head * tri(t) + tri(i)..head * tri(t) + tri(i) + i + 1];
                let dci = &dctx[i * d + hs..i * d + hs + hd];
                datt.clear();
                datt.extend((0..=i).map(|j| dot(dci, &cache.v[j * d + hs..j * d + hs + hd])));
                for (j, &aj) in a.iter().enumerate() {
                    let dvj = &mut dv[j * d + hs..j * d + hs + hd];
                    for (g, c) in dvj.iter_mut().zip(dci) {
                        *g += aj * c;
                    }
                }
                let weighted: f64 = a.iter().zip(&datt).map(|(x, y)| x * y).sum();
                let qi = &cache.q[i * d + hs..i * d + hs + hd];
                for (j, (&aj, &daj)) in a.iter().zip(&datt).enumerate() {
                    let ds = aj * (daj - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &cache.k[j * d + hs..j * d + hs + hd];
                    let dqi = &mut dq[i * d + hs..i * d + hs + hd];
                    for (g, kk) in dqi.iter_mut().zip(kj) {
                        *g += ds * kk;
                    }
                    let dkj = &mut dk[j * d + hs..j * d + hs + hd];
                    for (g, qq) in dkj.iter_mut().zip(qi) {
                        *g += ds * qq;
                    }
                }
            }
        }
        let mut dn = vec![0.0; t * d];
        linear_backward_input(&dq, t, d, d, model.slice(off.w_q, d * d), &mut dn);
        linear_backward_input(&dk, t, d, d, model.slice(off.w_k, d * d), &mut dn);
        linear_backward_input(&dv, t, d, d, model.slice(off.w_v, d * d), &mut dn);
        layer_norm_backward(&dn, &cache.ln1, t, d, model.slice(off.ln1_gain, d), &mut dx);
    }
    dx
}
