//! Reverse-mode pass over a [`ForwardCache`], accumulating into a gradient
//! [`Parameters`] of the same layout.

use super::config::TinyTransformerConfig;
use super::forward::{axpy, dot, gelu_grad, ForwardCache};
use super::params::{cst, Linear, Parameters, Real};

/// Accumulate `dW += dy^T x`, `db += sum(dy)` and return `dx = dy W`.
fn linear_bwd<F: Real>(x: &[F], dy: &[F], l: &Linear<F>, g: &mut Linear<F>) -> Vec<F> {
    let t = dy.len() / l.rows;
    let mut dx = vec![F::zero(); t * l.cols];
    for ((xr, dyr), dxr) in x
        .chunks_exact(l.cols)
        .zip(dy.chunks_exact(l.rows))
        .zip(dx.chunks_exact_mut(l.cols))
    {
        for (o, &gy) in dyr.iter().enumerate() {
            if gy == F::zero() {
                continue;
            }
            axpy(&mut g.w[o * l.cols..(o + 1) * l.cols], gy, xr);
            if let Some(b) = &mut g.b {
                b[o] += gy;
            }
            axpy(dxr, gy, &l.w[o * l.cols..(o + 1) * l.cols]);
        }
    }
    dx
}

/// Backward of `y = x * r * gain`, `r = (mean(x^2) + eps)^-1/2`.
fn rmsnorm_bwd<F: Real>(x: &[F], r: &[F], gain: &[F], dy: &[F], dgain: &mut [F]) -> Vec<F> {
    let d = gain.len();
    let dn: F = cst(d as f64);
    let mut dx = vec![F::zero(); x.len()];
    for (((xr, &ri), dyr), dxr) in x
        .chunks_exact(d)
        .zip(r)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
    {
        let mut s = F::zero();
        for i in 0..d {
            dgain[i] += dyr[i] * xr[i] * ri;
            s += dyr[i] * gain[i] * xr[i];
        }
        let r3 = ri * ri * ri / dn;
        for i in 0..d {
            dxr[i] = ri * gain[i] * dyr[i] - r3 * xr[i] * s;
        }
    }
    dx
}

/// Gradients of the attention inputs `(dq, dk, dv)` given the gradient of
/// the concatenated head outputs.
fn attention_bwd<F: Real>(
    cfg: &TinyTransformerConfig,
    t: usize,
    c: &super::forward::LayerCache<F>,
    dout: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let (d, e) = (cfg.d_model, cfg.head_dim());
    let scale = cst::<F>(e as f64).sqrt().recip();
    let mut dq = vec![F::zero(); t * d];
    let mut dk = vec![F::zero(); t * d];
    let mut dv = vec![F::zero(); t * d];
    let mut dp = vec![F::zero(); t];
    for h in 0..cfg.n_heads {
        let cols = h * e..(h + 1) * e;
        for i in 0..t {
            let p = &c.probs[(h * t + i) * t..][..t];
            let doi = &dout[i * d..][cols.clone()];
            let mut weighted = F::zero();
            for j in 0..=i {
                dp[j] = dot(doi, &c.v[j * d..][cols.clone()]);
                weighted += p[j] * dp[j];
                axpy(&mut dv[j * d..][cols.clone()], p[j], doi);
            }
            let qi = &c.q[i * d..][cols.clone()];
            for j in 0..=i {
                let ds = p[j] * (dp[j] - weighted) * scale;
                if ds == F::zero() {
                    continue;
                }
                axpy(&mut dq[i * d..][cols.clone()], ds, &c.k[j * d..][cols.clone()]);
                axpy(&mut dk[j * d..][cols.clone()], ds, qi);
            }
        }
    }
    (dq, dk, dv)
}

/// Propagate `dlogits` back through the network, adding into `g`.
pub(crate) fn backward_into<F: Real>(
    cfg: &TinyTransformerConfig,
    p: &Parameters<F>,
    tokens: &[u32],
    cache: &ForwardCache<F>,
    dlogits: &[F],
    g: &mut Parameters<F>,
) {
    let (t, d) = (cache.t, cfg.d_model);
    let dn = linear_bwd(&cache.n_final, dlogits, &p.lm_head, &mut g.lm_head);
    let mut dx = rmsnorm_bwd(&cache.x_final, &cache.r_final, &p.final_norm, &dn, &mut g.final_norm);
    for ((lp, lg), c) in p.layers.iter().zip(g.layers.iter_mut()).zip(&cache.layers).rev() {
        // x_out = x_mid + W_down gelu(W_up norm(x_mid))
        let dact = linear_bwd(&c.act, &dx, &lp.w_down, &mut lg.w_down);
        let dup: Vec<F> = dact.iter().zip(&c.up).map(|(&a, &u)| a * gelu_grad(u)).collect();
        let dn2 = linear_bwd(&c.n2, &dup, &lp.w_up, &mut lg.w_up);
        let dmid = rmsnorm_bwd(&c.x_mid, &c.r2, &lp.mlp_norm, &dn2, &mut lg.mlp_norm);
        dx.iter_mut().zip(&dmid).for_each(|(a, &b)| *a += b);
        // x_mid = x_in + W_o attn(norm(x_in))
        let dattn = linear_bwd(&c.attn, &dx, &lp.wo, &mut lg.wo);
        let (dq, dk, dv) = attention_bwd(cfg, t, c, &dattn);
        let mut dn1 = linear_bwd(&c.n1, &dq, &lp.wq, &mut lg.wq);
        let dn1_k = linear_bwd(&c.n1, &dk, &lp.wk, &mut lg.wk);
        let dn1_v = linear_bwd(&c.n1, &dv, &lp.wv, &mut lg.wv);
        for ((a, &bk), &bv) in dn1.iter_mut().zip(&dn1_k).zip(&dn1_v) {
            *a += bk + bv;
        }
        let din = rmsnorm_bwd(&c.x_in, &c.r1, &lp.attn_norm, &dn1, &mut lg.attn_norm);
        dx.iter_mut().zip(&din).for_each(|(a, &b)| *a += b);
    }
    for (i, (&tok, dxr)) in tokens.iter().zip(dx.chunks_exact(d)).enumerate() {
        let tok = tok as usize;
        axpy(&mut g.tok_emb[tok * d..(tok + 1) * d], F::one(), dxr);
        axpy(&mut g.pos_emb[i * d..(i + 1) * d], F::one(), dxr);
    }
}
