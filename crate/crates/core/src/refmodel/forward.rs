//! Causal forward pass. Everything is row-major `[positions, features]`.

use super::config::TinyTransformerConfig;
use super::params::{cst, Linear, Parameters, Real};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
pub(crate) fn axpy<F: Real>(y: &mut [F], a: F, x: &[F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `y[t] = W x[t] + b` for each of the `t` rows of `x`.
pub(crate) fn linear_fwd<F: Real>(x: &[F], t: usize, l: &Linear<F>) -> Vec<F> {
    let mut y = vec![F::zero(); t * l.rows];
    for (xr, yr) in x.chunks_exact(l.cols).take(t).zip(y.chunks_exact_mut(l.rows)) {
        for (o, (out, wr)) in yr.iter_mut().zip(l.w.chunks_exact(l.cols)).enumerate() {
            *out = dot(xr, wr);
            if let Some(b) = &l.b {
                *out += b[o];
            }
        }
    }
    y
}

/// RMS normalization with a learned gain. Returns the output and the
/// per-row reciprocal RMS needed by the backward pass.
pub(crate) fn rmsnorm_fwd<F: Real>(x: &[F], d: usize, gain: &[F]) -> (Vec<F>, Vec<F>) {
    let eps: F = cst(NORM_EPS);
    let dn: F = cst(d as f64);
    let mut y = vec![F::zero(); x.len()];
    let mut rs = Vec::with_capacity(x.len() / d);
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let ms = xr.iter().map(|&v| v * v).sum::<F>() / dn;
        let r = (ms + eps).sqrt().recip();
        for ((o, &v), &g) in yr.iter_mut().zip(xr).zip(gain) {
            *o = v * r * g;
        }
        rs.push(r);
    }
    (y, rs)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub(crate) fn gelu<F: Real>(u: F) -> F {
    let (c, k, half) = (cst::<F>(GELU_C), cst::<F>(GELU_K), cst::<F>(0.5));
    half * u * (F::one() + (c * (u + k * u * u * u)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<F: Real>(u: F) -> F {
    let (c, k, half) = (cst::<F>(GELU_C), cst::<F>(GELU_K), cst::<F>(0.5));
    let th = (c * (u + k * u * u * u)).tanh();
    let three: F = cst(3.0);
    half * (F::one() + th) + half * u * (F::one() - th * th) * c * (F::one() + three * k * u * u)
}

/// Activations of one decoder block kept for the backward pass.
pub(crate) struct LayerCache<F> {
    pub x_in: Vec<F>,
    pub r1: Vec<F>,
    pub n1: Vec<F>,
    pub q: Vec<F>,
    pub k: Vec<F>,
    pub v: Vec<F>,
    /// Attention probabilities, `[head][query][key]`, zero above the diagonal.
    pub probs: Vec<F>,
    pub attn: Vec<F>,
    pub x_mid: Vec<F>,
    pub r2: Vec<F>,
    pub n2: Vec<F>,
    pub up: Vec<F>,
    pub act: Vec<F>,
}

pub(crate) struct ForwardCache<F> {
    pub t: usize,
    pub layers: Vec<LayerCache<F>>,
    pub x_final: Vec<F>,
    pub r_final: Vec<F>,
    pub n_final: Vec<F>,
    pub logits: Vec<F>,
}

/// Multi-head causal self-attention over `[t, d]` projections. Returns the
/// concatenated head outputs and the probability tensor.
fn attention<F: Real>(
    cfg: &TinyTransformerConfig,
    t: usize,
    q: &[F],
    k: &[F],
    v: &[F],
) -> (Vec<F>, Vec<F>) {
    let (d, e) = (cfg.d_model, cfg.head_dim());
    let scale = cst::<F>(e as f64).sqrt().recip();
    let mut out = vec![F::zero(); t * d];
    let mut probs = vec![F::zero(); cfg.n_heads * t * t];
    for h in 0..cfg.n_heads {
        let cols = h * e..(h + 1) * e;
        for i in 0..t {
            let qi = &q[i * d..][cols.clone()];
            let p = &mut probs[(h * t + i) * t..][..t];
            let mut max = F::neg_infinity();
            for (j, pj) in p.iter_mut().enumerate().take(i + 1) {
                *pj = dot(qi, &k[j * d..][cols.clone()]) * scale;
                max = max.max(*pj);
            }
            let mut sum = F::zero();
            for pj in p.iter_mut().take(i + 1) {
                *pj = (*pj - max).exp();
                sum += *pj;
            }
            let oi = &mut out[i * d..][cols.clone()];
            for (j, pj) in p.iter_mut().enumerate().take(i + 1) {
                *pj = *pj / sum;
                axpy(oi, *pj, &v[j * d..][cols.clone()]);
            }
        }
    }
    (out, probs)
}

/// Run the decoder on `tokens`, which the caller has validated.
pub(crate) fn forward_cached<F: Real>(
    cfg: &TinyTransformerConfig,
    p: &Parameters<F>,
    tokens: &[u32],
) -> ForwardCache<F> {
    let (t, d) = (tokens.len(), cfg.d_model);
    let mut x = vec![F::zero(); t * d];
    for (i, (&tok, xr)) in tokens.iter().zip(x.chunks_exact_mut(d)).enumerate() {
        let tok = tok as usize;
        for ((o, &a), &b) in xr.iter_mut().zip(&p.tok_emb[tok * d..(tok + 1) * d]).zip(&p.pos_emb[i * d..]) {
            *o = a + b;
        }
    }
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lp in &p.layers {
        let (n1, r1) = rmsnorm_fwd(&x, d, &lp.attn_norm);
        let q = linear_fwd(&n1, t, &lp.wq);
        let k = linear_fwd(&n1, t, &lp.wk);
        let v = linear_fwd(&n1, t, &lp.wv);
        let (attn, probs) = attention(cfg, t, &q, &k, &v);
        let proj = linear_fwd(&attn, t, &lp.wo);
        let x_mid: Vec<F> = x.iter().zip(&proj).map(|(&a, &b)| a + b).collect();
        let (n2, r2) = rmsnorm_fwd(&x_mid, d, &lp.mlp_norm);
        let up = linear_fwd(&n2, t, &lp.w_up);
        let act: Vec<F> = up.iter().map(|&u| gelu(u)).collect();
        let down = linear_fwd(&act, t, &lp.w_down);
        let x_out: Vec<F> = x_mid.iter().zip(&down).map(|(&a, &b)| a + b).collect();
        layers.push(LayerCache {
            x_in: std::mem::replace(&mut x, x_out),
            r1,
            n1,
            q,
            k,
            v,
            probs,
            attn,
            x_mid,
            r2,
            n2,
            up,
            act,
        });
    }
    let (n_final, r_final) = rmsnorm_fwd(&x, d, &p.final_norm);
    let logits = linear_fwd(&n_final, t, &p.lm_head);
    ForwardCache {
        t,
        layers,
        x_final: x,
        r_final,
        n_final,
        logits,
    }
}
