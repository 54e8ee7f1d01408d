use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use super::config::TinyTransformerConfig;
use crate::error::{GwqError, Result};
use crate::io::{GradientBundle, ModelBundle};
use crate::tensor::Tensor;

/// Scalar type the model math is generic over. Production runs use `f32`;
/// finite-difference checks run an `f64` shadow of the same code.
pub trait Real:
    Float + FromPrimitive + AddAssign + SubAssign + MulAssign + Sum + Send + Sync + Debug + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub(crate) fn cst<F: Real>(v: f64) -> F {
    F::from_f64(v).expect("constant representable")
}

/// A `[rows, cols]` weight with an optional bias of length `rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub w: Vec<F>,
    pub b: Option<Vec<F>>,
    pub rows: usize,
    pub cols: usize,
}

impl<F: Real> Linear<F> {
    fn zeros(rows: usize, cols: usize, bias: bool) -> Self {
        Linear {
            w: vec![F::zero(); rows * cols],
            b: bias.then(|| vec![F::zero(); rows]),
            rows,
            cols,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub attn_norm: Vec<F>,
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
    pub wo: Linear<F>,
    pub mlp_norm: Vec<F>,
    pub w_up: Linear<F>,
    pub w_down: Linear<F>,
}

/// All weights of the reference decoder (also used to hold their gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<F> {
    pub tok_emb: Vec<F>,
    pub pos_emb: Vec<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_norm: Vec<F>,
    pub lm_head: Linear<F>,
}

impl<F: Real> Parameters<F> {
    pub fn zeros(cfg: &TinyTransformerConfig) -> Self {
        let (d, f, v, bias) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.use_bias);
        let layer = LayerParams {
            attn_norm: vec![F::zero(); d],
            wq: Linear::zeros(d, d, bias),
            wk: Linear::zeros(d, d, bias),
            wv: Linear::zeros(d, d, bias),
            wo: Linear::zeros(d, d, bias),
            mlp_norm: vec![F::zero(); d],
            w_up: Linear::zeros(f, d, bias),
            w_down: Linear::zeros(d, f, bias),
        };
        Parameters {
            tok_emb: vec![F::zero(); v * d],
            pos_emb: vec![F::zero(); cfg.max_seq_len * d],
            layers: vec![layer; cfg.n_layers],
            final_norm: vec![F::zero(); d],
            lm_head: Linear::zeros(v, d, bias),
        }
    }

    /// Every tensor with its name, in canonical order (matches
    /// [`TinyTransformerConfig::param_specs`]).
    pub fn named(&self) -> Vec<(String, &[F])> {
        let mut out: Vec<(String, &[F])> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        fn lin<'a, F>(out: &mut Vec<(String, &'a [F])>, name: String, l: &'a Linear<F>) {
            if let Some(b) = &l.b {
                out.push((name.clone(), &l.w));
                out.push((format!("{name}.bias"), b));
            } else {
                out.push((name, &l.w));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &l.attn_norm));
            lin(&mut out, format!("layers.{i}.attn.wq"), &l.wq);
            lin(&mut out, format!("layers.{i}.attn.wk"), &l.wk);
            lin(&mut out, format!("layers.{i}.attn.wv"), &l.wv);
            lin(&mut out, format!("layers.{i}.attn.wo"), &l.wo);
            out.push((format!("layers.{i}.mlp_norm"), &l.mlp_norm));
            lin(&mut out, format!("layers.{i}.mlp.w_up"), &l.w_up);
            lin(&mut out, format!("layers.{i}.mlp.w_down"), &l.w_down);
        }
        out.push(("final_norm".into(), &self.final_norm));
        lin(&mut out, "lm_head".into(), &self.lm_head);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut [F])> {
        let mut out: Vec<(String, &mut [F])> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        fn lin<'a, F>(out: &mut Vec<(String, &'a mut [F])>, name: String, l: &'a mut Linear<F>) {
            if let Some(b) = &mut l.b {
                out.push((name.clone(), &mut l.w));
                out.push((format!("{name}.bias"), b));
            } else {
                out.push((name, &mut l.w));
            }
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &mut l.attn_norm));
            lin(&mut out, format!("layers.{i}.attn.wq"), &mut l.wq);
            lin(&mut out, format!("layers.{i}.attn.wk"), &mut l.wk);
            lin(&mut out, format!("layers.{i}.attn.wv"), &mut l.wv);
            lin(&mut out, format!("layers.{i}.attn.wo"), &mut l.wo);
            out.push((format!("layers.{i}.mlp_norm"), &mut l.mlp_norm));
            lin(&mut out, format!("layers.{i}.mlp.w_up"), &mut l.w_up);
            lin(&mut out, format!("layers.{i}.mlp.w_down"), &mut l.w_down);
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        lin(&mut out, "lm_head".into(), &mut self.lm_head);
        out
    }

    pub fn get(&self, name: &str) -> Option<&[F]> {
        self.named().into_iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [F]> {
        self.named_mut().into_iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }

    pub fn from_bundle(cfg: &TinyTransformerConfig, bundle: &ModelBundle) -> Result<Self> {
        let mut p = Parameters::zeros(cfg);
        for ((name, dst), (_, dims)) in p.named_mut().into_iter().zip(cfg.param_specs()) {
            let t = bundle
                .get(&name)
                .ok_or_else(|| GwqError::Input(format!("model is missing tensor `{name}`")))?;
            if t.dims() != dims.as_slice() {
                return Err(GwqError::Dimension(format!(
                    "`{name}` has dims {:?}, architecture expects {dims:?}",
                    t.dims()
                )));
            }
            for (d, &s) in dst.iter_mut().zip(t.data()) {
                *d = cst(s as f64);
            }
        }
        Ok(p)
    }

    fn tensors(&self, cfg: &TinyTransformerConfig) -> Result<Vec<Tensor>> {
        self.named()
            .into_iter()
            .zip(cfg.param_specs())
            .map(|((name, data), (_, dims))| {
                let values = data.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
                Tensor::new(name, dims, values)
            })
            .collect()
    }

    pub fn to_tensors(&self, cfg: &TinyTransformerConfig) -> Vec<Tensor> {
        self.tensors(cfg).expect("parameters are finite with matching dims")
    }

    pub fn to_gradients(&self, cfg: &TinyTransformerConfig) -> Result<GradientBundle> {
        let tensors = self
            .tensors(cfg)
            .map_err(|e| GwqError::Training(format!("non-finite gradient: {e}")))?;
        let mut g = GradientBundle::new();
        for t in tensors {
            let name = t.name().to_owned();
            g.insert(&name, t);
        }
        Ok(g)
    }

    /// `self += alpha * other`, elementwise over every tensor.
    pub fn axpy(&mut self, alpha: F, other: &Parameters<F>) {
        for ((_, dst), (_, src)) in self.named_mut().into_iter().zip(other.named()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn scale(&mut self, alpha: F) {
        for (_, d) in self.named_mut() {
            d.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.named()
            .iter()
            .flat_map(|(_, d)| d.iter())
            .map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_matches_specs() {
        let mut cfg = TinyTransformerConfig::new(11, 8, 2, 2, 5);
        cfg.use_bias = true;
        let p = Parameters::<f32>::zeros(&cfg);
        let seen: Vec<(String, usize)> = p.named().into_iter().map(|(n, d)| (n, d.len())).collect();
        let specs: Vec<(String, usize)> = cfg
            .param_specs()
            .into_iter()
            .map(|(n, d)| (n, d.iter().product()))
            .collect();
        assert_eq!(seen, specs);
    }

    #[test]
    fn bundle_round_trip() {
        let cfg = TinyTransformerConfig::new(7, 4, 2, 1, 3);
        let mut p = Parameters::<f32>::zeros(&cfg);
        p.get_mut("layers.0.mlp.w_down").unwrap()[3] = 2.5;
        let mut b = ModelBundle::new();
        for t in p.to_tensors(&cfg) {
            b.insert(t);
        }
        let back = Parameters::<f64>::from_bundle(&cfg, &b).unwrap();
        assert_eq!(back.layers[0].w_down.w[3], 2.5);
        b.tensors.shift_remove("final_norm");
        assert!(matches!(Parameters::<f32>::from_bundle(&cfg, &b), Err(GwqError::Input(_))));
    }
}
