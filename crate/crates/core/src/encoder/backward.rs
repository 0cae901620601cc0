use ndarray::{s, Array1, Array2, Axis};

use super::forward::{gelu_grad, LayerTrace, LnCache};
use super::{EncoderParams, ForwardTrace, LayerParams, Pooling};
use crate::error::{Error, Result};

fn add_into(dst: &mut Array1<f64>, src: Array1<f64>) {
    *dst += &src;
}

/// Returns d(loss)/d(input) and accumulates gamma/beta gradients.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gamma: &Array1<f64>,
    dgamma: &mut Array1<f64>,
    dbeta: &mut Array1<f64>,
) -> Array2<f64> {
    add_into(dgamma, (dy * &cache.xhat).sum_axis(Axis(0)));
    add_into(dbeta, dy.sum_axis(Axis(0)));
    let d = dy.ncols() as f64;
    let mut dx = dy * gamma;
    for ((mut row, xhat), &rstd) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.rstd) {
        let mean_dxhat = row.sum() / d;
        let mean_dxhat_xhat = row.dot(&xhat) / d;
        row.zip_mut_with(&xhat, |g, &xh| *g = rstd * (*g - mean_dxhat - xh * mean_dxhat_xhat));
    }
    dx
}

fn layer_backward(
    lp: &LayerParams,
    lt: &LayerTrace,
    segments: &[(usize, usize)],
    n_heads: usize,
    dy: Array2<f64>,
    g: &mut LayerParams,
) -> Array2<f64> {
    // Feed-forward sublayer: y = LN2(h + W2 gelu(W1 h + b1) + b2)
    let du2 = layer_norm_backward(&dy, &lt.ln2, &lp.ln2_gamma, &mut g.ln2_gamma, &mut g.ln2_beta);
    g.w2 += &lt.g.t().dot(&du2);
    add_into(&mut g.b2, du2.sum_axis(Axis(0)));
    let mut df1 = du2.dot(&lp.w2.t());
    df1.zip_mut_with(&lt.f1, |d, &x| *d *= gelu_grad(x));
    g.w1 += &lt.h.t().dot(&df1);
    add_into(&mut g.b1, df1.sum_axis(Axis(0)));
    let dh = du2 + df1.dot(&lp.w1.t());

    // Attention sublayer: h = LN1(x + attn(x) Wo + bo)
    let du1 = layer_norm_backward(&dh, &lt.ln1, &lp.ln1_gamma, &mut g.ln1_gamma, &mut g.ln1_beta);
    g.wo += &lt.ctx.t().dot(&du1);
    add_into(&mut g.bo, du1.sum_axis(Axis(0)));
    let dctx = du1.dot(&lp.wo.t());

    let dhd = lt.q.ncols() / n_heads;
    let scale = 1.0 / (dhd as f64).sqrt();
    let mut dq = Array2::zeros(lt.q.raw_dim());
    let mut dk = Array2::zeros(lt.k.raw_dim());
    let mut dv = Array2::zeros(lt.v.raw_dim());
    for (si, &(start, len)) in segments.iter().enumerate() {
        let rows = start..start + len;
        for h in 0..n_heads {
            let cols = h * dhd..(h + 1) * dhd;
            let p = &lt.probs[si * n_heads + h];
            let dc = dctx.slice(s![rows.clone(), cols.clone()]);
            let qs = lt.q.slice(s![rows.clone(), cols.clone()]);
            let ks = lt.k.slice(s![rows.clone(), cols.clone()]);
            let vs = lt.v.slice(s![rows.clone(), cols.clone()]);
            dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&dc));
            let mut ds = dc.dot(&vs.t());
            for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let inner = drow.dot(&prow);
                drow.zip_mut_with(&prow, |d, &pv| *d = pv * (*d - inner) * scale);
            }
            dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&ks));
            dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qs));
        }
    }
    g.wq += &lt.x_in.t().dot(&dq);
    g.wk += &lt.x_in.t().dot(&dk);
    g.wv += &lt.x_in.t().dot(&dv);
    add_into(&mut g.bq, dq.sum_axis(Axis(0)));
    add_into(&mut g.bv, dv.sum_axis(Axis(0)));
    du1 + dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t())
}

fn check(params: &EncoderParams, trace: &ForwardTrace, grads: &EncoderParams) -> Result<()> {
    if trace.layers.len() != params.layers.len() || trace.model_dim != params.config.model_dim {
        return Err(Error::Contract(format!(
            "trace has {} layers of width {}, params have {} of width {}",
            trace.layers.len(),
            trace.model_dim,
            params.layers.len(),
            params.config.model_dim
        )));
    }
    if grads.config != params.config {
        return Err(Error::Contract("gradient buffer shaped for a different config".into()));
    }
    Ok(())
}

/// Accumulates into `grads` the parameter gradients of a loss whose
/// gradient with respect to the final hidden states is `upstream`.
pub fn backward(
    params: &EncoderParams,
    trace: &ForwardTrace,
    upstream: &Array2<f64>,
    grads: &mut EncoderParams,
) -> Result<()> {
    check(params, trace, grads)?;
    if upstream.dim() != trace.hidden.dim() {
        return Err(Error::Contract(format!(
            "upstream gradient {:?} does not match hidden states {:?}",
            upstream.dim(),
            trace.hidden.dim()
        )));
    }
    let mut dx = upstream.clone();
    for ((lp, lt), g) in params.layers.iter().zip(&trace.layers).zip(&mut grads.layers).rev() {
        dx = layer_backward(lp, lt, &trace.segments, params.config.n_heads, dx, g);
    }
    for (r, row) in dx.rows().into_iter().enumerate() {
        let mut t = grads.token_emb.row_mut(trace.ids[r] as usize);
        t += &row;
        let mut p = grads.pos_emb.row_mut(trace.positions[r]);
        p += &row;
    }
    Ok(())
}

/// Backpropagates per-sequence score gradients through the score head.
pub fn backward_scores(
    params: &EncoderParams,
    trace: &ForwardTrace,
    dscores: &[f64],
    grads: &mut EncoderParams,
) -> Result<()> {
    if dscores.len() != trace.segments.len() {
        return Err(Error::Contract(format!(
            "{} score gradients for {} sequences",
            dscores.len(),
            trace.segments.len()
        )));
    }
    let mut upstream = Array2::zeros(trace.hidden.raw_dim());
    for (&(start, _), &ds) in trace.segments.iter().zip(dscores) {
        upstream.row_mut(start).scaled_add(ds, &params.score_w);
        grads.score_w.scaled_add(ds, &trace.hidden.row(start));
        grads.score_b[0] += ds;
    }
    backward(params, trace, &upstream, grads)
}

/// Backpropagates gradients of pooled embeddings (one row per sequence).
pub fn backward_embeddings(
    params: &EncoderParams,
    trace: &ForwardTrace,
    d_emb: &Array2<f64>,
    grads: &mut EncoderParams,
) -> Result<()> {
    if d_emb.dim() != (trace.segments.len(), trace.model_dim) {
        return Err(Error::Contract("embedding gradient shape mismatch".into()));
    }
    let mut upstream = Array2::zeros(trace.hidden.raw_dim());
    for (drow, &(start, len)) in d_emb.rows().into_iter().zip(&trace.segments) {
        match params.config.pooling {
            Pooling::Cls => upstream.row_mut(start).assign(&drow),
            Pooling::Mean => {
                let keep = &trace.mask[start..start + len];
                let n = keep.iter().filter(|&&m| m != 0).count().max(1) as f64;
                for (r, &m) in (start..start + len).zip(keep) {
                    if m != 0 {
                        upstream.row_mut(r).scaled_add(1.0 / n, &drow);
                    }
                }
            }
        }
    }
    backward(params, trace, &upstream, grads)
}

/// Backpropagates logit gradients from [`super::mlm_logits`] for `rows`.
pub fn backward_mlm(
    params: &EncoderParams,
    trace: &ForwardTrace,
    rows: &[usize],
    d_logits: &Array2<f64>,
    grads: &mut EncoderParams,
) -> Result<()> {
    if d_logits.dim() != (rows.len(), params.config.vocab_size) {
        return Err(Error::Contract("logit gradient shape mismatch".into()));
    }
    let selected = trace.hidden.select(Axis(0), rows);
    grads.token_emb += &d_logits.t().dot(&selected);
    add_into(&mut grads.mlm_bias, d_logits.sum_axis(Axis(0)));
    let d_sel = d_logits.dot(&params.token_emb);
    let mut upstream = Array2::zeros(trace.hidden.raw_dim());
    for (&r, drow) in rows.iter().zip(d_sel.rows()) {
        let mut u = upstream.row_mut(r);
        u += &drow;
    }
    backward(params, trace, &upstream, grads)
}
