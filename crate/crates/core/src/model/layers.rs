//! Layer forward passes with their hand-written backward rules.
//!
//! Each `*_forward` returns its output and a cache; the matching
//! `*_backward` consumes the cache and an upstream gradient, accumulates
//! parameter gradients into the supplied container, and returns the gradient
//! with respect to the layer input(s).

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Axis, Zip};

use super::params::{AttentionParams, BlockParams, CrossBlockParams, LayerNormParams, LinearParams, Mat, MlpParams};

pub const LN_EPS: f64 = 1e-5;

pub fn linear_forward(p: &LinearParams, x: &Mat) -> Mat {
    let mut y = x.dot(&p.w);
    y += &p.b;
    y
}

pub fn linear_backward(p: &LinearParams, x: &Mat, dy: &Mat, g: &mut LinearParams) -> Mat {
    general_mat_mul(1.0, &x.t(), dy, 1.0, &mut g.w);
    g.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    dy.dot(&p.w.t())
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Mat,
    inv_std: Array1<f64>,
}

pub fn layer_norm_forward(p: &LayerNormParams, x: &Mat) -> (Mat, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *s = 1.0 / (var + LN_EPS).sqrt();
        row *= *s;
    }
    let mut y = &xhat * &p.gamma;
    y += &p.beta;
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward(p: &LayerNormParams, c: &LayerNormCache, dy: &Mat, g: &mut LayerNormParams) -> Mat {
    let d = dy.ncols() as f64;
    g.gamma += &(dy * &c.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    g.beta += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * &p.gamma;
    let mut dx = Mat::zeros(dy.raw_dim());
    for (((mut out, dh), xh), &s) in dx
        .axis_iter_mut(Axis(0))
        .zip(dxhat.axis_iter(Axis(0)))
        .zip(c.xhat.axis_iter(Axis(0)))
        .zip(c.inv_std.iter())
    {
        let sum_dh = dh.sum();
        let sum_dh_xh = dh.dot(&xh);
        Zip::from(&mut out).and(&dh).and(&xh).for_each(|o, &a, &b| {
            *o = s / d * (d * a - sum_dh - b * sum_dh_xh);
        });
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh approximation of GELU.
pub fn gelu(x: &Mat) -> Mat {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
}

pub fn gelu_backward(x: &Mat, dy: &Mat) -> Mat {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let t = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
        *d *= 0.5 * (1.0 + t) + 0.5 * v * dt;
    });
    dx
}

/// Row-wise softmax in place.
pub fn softmax_rows(m: &mut Mat) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    xq: Mat,
    xkv: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Per-head attention weights, `queries x keys`.
    pub probs: Vec<Mat>,
    concat: Mat,
}

/// Multi-head scaled dot-product attention of `xq` over `xkv`.
pub fn attention_forward(p: &AttentionParams, xq: &Mat, xkv: &Mat, heads: usize) -> (Mat, AttentionCache) {
    let d = p.q.w.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear_forward(&p.q, xq);
    let k = xkv.dot(&p.k.w);
    let v = linear_forward(&p.v, xkv);
    let mut concat = Mat::zeros((xq.nrows(), d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut a = q.slice(cols).dot(&k.slice(cols).t());
        a *= scale;
        softmax_rows(&mut a);
        concat.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
        probs.push(a);
    }
    let y = linear_forward(&p.o, &concat);
    (
        y,
        AttentionCache {
            xq: xq.clone(),
            xkv: xkv.clone(),
            q,
            k,
            v,
            probs,
            concat,
        },
    )
}

/// Returns `(d xq, d xkv)`.
pub fn attention_backward(p: &AttentionParams, c: &AttentionCache, dy: &Mat, g: &mut AttentionParams) -> (Mat, Mat) {
    let heads = c.probs.len();
    let d = p.q.w.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let dconcat = linear_backward(&p.o, &c.concat, dy, &mut g.o);
    let mut dq = Mat::zeros(c.q.raw_dim());
    let mut dk = Mat::zeros(c.k.raw_dim());
    let mut dv = Mat::zeros(c.v.raw_dim());
    for (h, a) in c.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dout = dconcat.slice(cols);
        let da = dout.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&a.t().dot(&dout));
        let mut ds = &da * a;
        let row_sums = ds.sum_axis(Axis(1)).insert_axis(Axis(1));
        ds = a * &(&da - &row_sums);
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    let dxq = linear_backward(&p.q, &c.xq, &dq, &mut g.q);
    general_mat_mul(1.0, &c.xkv.t(), &dk, 1.0, &mut g.k.w);
    let mut dxkv = dk.dot(&p.k.w.t());
    dxkv += &linear_backward(&p.v, &c.xkv, &dv, &mut g.v);
    (dxq, dxkv)
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    x: Mat,
    pre: Mat,
    act: Mat,
}

pub fn mlp_forward(p: &MlpParams, x: &Mat) -> (Mat, MlpCache) {
    let pre = linear_forward(&p.fc1, x);
    let act = gelu(&pre);
    let y = linear_forward(&p.fc2, &act);
    (y, MlpCache { x: x.clone(), pre, act })
}

pub fn mlp_backward(p: &MlpParams, c: &MlpCache, dy: &Mat, g: &mut MlpParams) -> Mat {
    let dact = linear_backward(&p.fc2, &c.act, dy, &mut g.fc2);
    let dpre = gelu_backward(&c.pre, &dact);
    linear_backward(&p.fc1, &c.x, &dpre, &mut g.fc1)
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    mlp: MlpCache,
}

/// `x + attn(ln1(x))`, then `+ mlp(ln2(.))`.
pub fn block_forward(p: &BlockParams, x: &Mat, heads: usize) -> (Mat, BlockCache) {
    let (h1, ln1) = layer_norm_forward(&p.ln1, x);
    let (a, attn) = attention_forward(&p.attn, &h1, &h1, heads);
    let x1 = x + &a;
    let (h2, ln2) = layer_norm_forward(&p.ln2, &x1);
    let (m, mlp) = mlp_forward(&p.mlp, &h2);
    (x1 + &m, BlockCache { ln1, attn, ln2, mlp })
}

pub fn block_backward(p: &BlockParams, c: &BlockCache, dy: &Mat, g: &mut BlockParams) -> Mat {
    let dh2 = mlp_backward(&p.mlp, &c.mlp, dy, &mut g.mlp);
    let dx1 = dy + &layer_norm_backward(&p.ln2, &c.ln2, &dh2, &mut g.ln2);
    let (dq, dkv) = attention_backward(&p.attn, &c.attn, &dx1, &mut g.attn);
    let dh1 = dq + &dkv;
    dx1 + &layer_norm_backward(&p.ln1, &c.ln1, &dh1, &mut g.ln1)
}

#[derive(Debug, Clone)]
pub struct CrossBlockCache {
    ln_query: LayerNormCache,
    ln_context: LayerNormCache,
    pub attn: AttentionCache,
    ln2: LayerNormCache,
    mlp: MlpCache,
}

/// `x + attn(lnq(x), lnc(ctx))`, then `+ mlp(ln2(.))`.
pub fn cross_block_forward(p: &CrossBlockParams, x: &Mat, ctx: &Mat, heads: usize) -> (Mat, CrossBlockCache) {
    let (hq, ln_query) = layer_norm_forward(&p.ln_query, x);
    let (hc, ln_context) = layer_norm_forward(&p.ln_context, ctx);
    let (a, attn) = attention_forward(&p.attn, &hq, &hc, heads);
    let x1 = x + &a;
    let (h2, ln2) = layer_norm_forward(&p.ln2, &x1);
    let (m, mlp) = mlp_forward(&p.mlp, &h2);
    (
        x1 + &m,
        CrossBlockCache {
            ln_query,
            ln_context,
            attn,
            ln2,
            mlp,
        },
    )
}

/// Returns `(d x, d ctx)`.
pub fn cross_block_backward(
    p: &CrossBlockParams,
    c: &CrossBlockCache,
    dy: &Mat,
    g: &mut CrossBlockParams,
) -> (Mat, Mat) {
    let dh2 = mlp_backward(&p.mlp, &c.mlp, dy, &mut g.mlp);
    let dx1 = dy + &layer_norm_backward(&p.ln2, &c.ln2, &dh2, &mut g.ln2);
    let (dq, dkv) = attention_backward(&p.attn, &c.attn, &dx1, &mut g.attn);
    let dx = dx1 + &layer_norm_backward(&p.ln_query, &c.ln_query, &dq, &mut g.ln_query);
    let dctx = layer_norm_backward(&p.ln_context, &c.ln_context, &dkv, &mut g.ln_context);
    (dx, dctx)
}

/// `u / |u|` for a single row; returns the normalized row and `|u|`.
pub fn l2_normalize(u: &Mat) -> (Mat, f64) {
    let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    (u / n, n)
}

pub fn l2_normalize_backward(z: &Mat, norm: f64, dz: &Mat) -> Mat {
    let dot: f64 = (z * dz).sum();
    (dz - &(z * dot)) / norm
}
