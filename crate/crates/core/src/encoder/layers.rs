//! Post-LN transformer forward pass with cached activations, and the
//! matching hand-derived backward pass.
//!
//! Only the non-PAD prefix of a sequence is computed. That is equivalent to
//! masking PAD keys in attention: no non-PAD row ever reads a PAD row.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{LayerParams, Model, Parameters};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub(crate) struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    bias: &Array1<f64>,
    eps: f64,
) -> (Array2<f64>, NormCache) {
    let h = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / h;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / h;
        *s = 1.0 / (var + eps).sqrt();
        let k = *s;
        row.mapv_inplace(|v| v * k);
    }
    let y = &xhat * gain + bias;
    (y, NormCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    gain: &Array1<f64>,
    d_gain: &mut Array1<f64>,
    d_bias: &mut Array1<f64>,
) -> Array2<f64> {
    *d_gain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *d_bias += &dy.sum_axis(Axis(0));
    let h = dy.ncols() as f64;
    let mut dx = dy * gain;
    for ((mut row, xhat), &s) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_d = row.sum() / h;
        let mean_dx = row.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f64>() / h;
        Zip::from(&mut row)
            .and(&xhat)
            .for_each(|d, &xh| *d = s * (*d - mean_d - xh * mean_dx));
    }
    dx
}

/// Inverted-dropout scale factors, or `None` when dropout is off.
fn dropout_mask(
    rng: Option<&mut ChaCha8Rng>,
    rate: f64,
    shape: (usize, usize),
) -> Option<Array2<f64>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    Some(Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    }))
}

fn apply_mask(x: &mut Array2<f64>, mask: &Option<Array2<f64>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

fn affine(x: ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(w) + b
}

fn softmax_rows(mut s: Array2<f64>) -> Array2<f64> {
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    s
}

pub(crate) struct LayerCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    attn_mask: Option<Array2<f64>>,
    ln1: NormCache,
    y: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    ffn_mask: Option<Array2<f64>>,
    ln2: NormCache,
}

pub(crate) struct SequenceCache {
    ids: Vec<u32>,
    segments: Vec<u8>,
    emb_ln: NormCache,
    emb_mask: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
}

fn layer_forward(
    lp: &LayerParams,
    x: Array2<f64>,
    heads: usize,
    eps: f64,
    dropout: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Array2<f64>, LayerCache) {
    let (n, h) = x.dim();
    let dh = h / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = affine(x.view(), &lp.wq, &lp.bq);
    let k = affine(x.view(), &lp.wk, &lp.bk);
    let v = affine(x.view(), &lp.wv, &lp.bv);
    let mut ctx = Array2::zeros((n, h));
    let mut probs = Vec::with_capacity(heads);
    for a in 0..heads {
        let cols = s![.., a * dh..(a + 1) * dh];
        let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        let p = softmax_rows(scores);
        ctx.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    let mut attn = affine(ctx.view(), &lp.wo, &lp.bo);
    let attn_mask = dropout_mask(rng.as_deref_mut(), dropout, (n, h));
    apply_mask(&mut attn, &attn_mask);
    let (y, ln1) = layer_norm(&(&x + &attn), &lp.ln1_gain, &lp.ln1_bias, eps);

    let pre_act = affine(y.view(), &lp.w_ff1, &lp.b_ff1);
    let act = pre_act.mapv(gelu);
    let mut ffn = affine(act.view(), &lp.w_ff2, &lp.b_ff2);
    let ffn_mask = dropout_mask(rng, dropout, (n, h));
    apply_mask(&mut ffn, &ffn_mask);
    let (z, ln2) = layer_norm(&(&y + &ffn), &lp.ln2_gain, &lp.ln2_bias, eps);
    (
        z,
        LayerCache {
            x,
            q,
            k,
            v,
            probs,
            ctx,
            attn_mask,
            ln1,
            y,
            pre_act,
            act,
            ffn_mask,
            ln2,
        },
    )
}

/// Runs the encoder over the non-PAD prefix `ids`/`segments`.
pub(crate) fn forward_sequence(
    model: &Model,
    ids: &[u32],
    segments: &[u8],
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Array2<f64>, SequenceCache) {
    let cfg = &model.config;
    let p = &model.params;
    let n = ids.len();
    let mut emb = Array2::zeros((n, cfg.hidden));
    for (pos, mut row) in emb.rows_mut().into_iter().enumerate() {
        row.assign(&p.token_emb.row(ids[pos] as usize));
        row += &p.pos_emb.row(pos);
        if cfg.use_segments {
            row += &p.seg_emb.row(segments[pos] as usize);
        }
    }
    let (mut x, emb_ln) = layer_norm(&emb, &p.emb_ln_gain, &p.emb_ln_bias, cfg.layer_norm_eps);
    let emb_mask = dropout_mask(rng.as_deref_mut(), cfg.dropout, x.dim());
    apply_mask(&mut x, &emb_mask);

    let mut layers = Vec::with_capacity(p.layers.len());
    for lp in &p.layers {
        let (z, cache) = layer_forward(
            lp,
            x,
            cfg.heads,
            cfg.layer_norm_eps,
            cfg.dropout,
            rng.as_deref_mut(),
        );
        layers.push(cache);
        x = z;
    }
    (
        x,
        SequenceCache {
            ids: ids.to_vec(),
            segments: segments.to_vec(),
            emb_ln,
            emb_mask,
            layers,
        },
    )
}

fn layer_backward(
    lp: &LayerParams,
    g: &mut LayerParams,
    c: &LayerCache,
    dz: Array2<f64>,
    heads: usize,
) -> Array2<f64> {
    let (n, h) = c.x.dim();
    let dh = h / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // z = LN2(y + dropout(act · W2 + b2))
    let d_res2 = layer_norm_backward(&dz, &c.ln2, &lp.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);
    let mut d_ffn = d_res2.clone();
    apply_mask(&mut d_ffn, &c.ffn_mask);
    g.w_ff2 += &c.act.t().dot(&d_ffn);
    g.b_ff2 += &d_ffn.sum_axis(Axis(0));
    let mut d_pre = d_ffn.dot(&lp.w_ff2.t());
    Zip::from(&mut d_pre)
        .and(&c.pre_act)
        .for_each(|d, &x| *d *= gelu_grad(x));
    g.w_ff1 += &c.y.t().dot(&d_pre);
    g.b_ff1 += &d_pre.sum_axis(Axis(0));
    let dy = d_res2 + d_pre.dot(&lp.w_ff1.t());

    // y = LN1(x + dropout(ctx · Wo + bo))
    let d_res1 = layer_norm_backward(&dy, &c.ln1, &lp.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
    let mut d_attn = d_res1.clone();
    apply_mask(&mut d_attn, &c.attn_mask);
    g.wo += &c.ctx.t().dot(&d_attn);
    g.bo += &d_attn.sum_axis(Axis(0));
    let d_ctx = d_attn.dot(&lp.wo.t());

    let mut dq = Array2::zeros((n, h));
    let mut dk = Array2::zeros((n, h));
    let mut dv = Array2::zeros((n, h));
    for a in 0..heads {
        let cols = s![.., a * dh..(a + 1) * dh];
        let p = &c.probs[a];
        let d_ctx_h = d_ctx.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&d_ctx_h));
        let dp = d_ctx_h.dot(&c.v.slice(cols).t());
        // softmax: ds = p ⊙ (dp − Σ_j dp_j p_j)
        let mut ds = &dp * p;
        let row_dot = ds.sum_axis(Axis(1));
        Zip::from(ds.rows_mut())
            .and(p.rows())
            .and(&row_dot)
            .for_each(|mut d, pr, &r| {
                Zip::from(&mut d).and(&pr).for_each(|dv, &pv| *dv -= pv * r);
            });
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    let xt = c.x.t();
    g.wq += &xt.dot(&dq);
    g.bq += &dq.sum_axis(Axis(0));
    g.wk += &xt.dot(&dk);
    g.bk += &dk.sum_axis(Axis(0));
    g.wv += &xt.dot(&dv);
    g.bv += &dv.sum_axis(Axis(0));
    d_res1 + dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t())
}

/// Accumulates into `grads` the gradient of a scalar loss whose derivative
/// with respect to the encoder output rows is `d_out` (`n × h`, non-PAD
/// prefix only).
pub(crate) fn backward_sequence(
    model: &Model,
    cache: &SequenceCache,
    d_out: Array2<f64>,
    grads: &mut Parameters,
) {
    let cfg = &model.config;
    let p = &model.params;
    let mut d = d_out;
    for (i, c) in cache.layers.iter().enumerate().rev() {
        d = layer_backward(&p.layers[i], &mut grads.layers[i], c, d, cfg.heads);
    }
    apply_mask(&mut d, &cache.emb_mask);
    let d_emb = layer_norm_backward(
        &d,
        &cache.emb_ln,
        &p.emb_ln_gain,
        &mut grads.emb_ln_gain,
        &mut grads.emb_ln_bias,
    );
    for (pos, row) in d_emb.rows().into_iter().enumerate() {
        let mut t = grads.token_emb.row_mut(cache.ids[pos] as usize);
        t += &row;
        let mut pe = grads.pos_emb.row_mut(pos);
        pe += &row;
        if cfg.use_segments {
            let mut se = grads.seg_emb.row_mut(cache.segments[pos] as usize);
            se += &row;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        for &x in &[-2.0, -0.3, 0.0, 0.7, 1.9] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = ndarray::array![[1.0, 2.0, 3.0, 4.0], [-1.0, 0.0, 0.0, 5.0]];
        let (y, _) = layer_norm(&x, &Array1::ones(4), &Array1::zeros(4), 1e-12);
        for row in y.rows() {
            assert!(row.mean().unwrap().abs() < 1e-12);
            assert!((row.mapv(|v| v * v).mean().unwrap() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(ndarray::array![[1000.0, 1000.0], [0.0, -1000.0]]);
        assert_eq!(p[[0, 0]], 0.5);
        assert!((p[[1, 0]] - 1.0).abs() < 1e-12);
    }
}
