use rayon::prelude::*;

use super::backward::backward_into;
use super::config::{LossKind, TinyTransformerConfig};
use super::forward::forward_cached;
use super::loss::{argmax, label_sequence, log2_prob, loss_and_grad, to_f64, validate_targets};
use super::params::{Parameters, Real};
use super::tokenizer::Tokenizer;
use crate::error::{GwqError, Result};
use crate::io::{GradientBundle, ModelBundle};
use crate::quant::QuantizedModel;
use crate::sensitivity::LayerActivations;
use crate::tensor::Tensor;

pub const META_ARCH: &str = "arch";
pub const META_TOKENIZER: &str = "tokenizer";

/// The reference decoder: architecture plus weights held at precision `F`.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyTransformer<F: Real = f32> {
    pub config: TinyTransformerConfig,
    pub params: Parameters<F>,
}

impl<F: Real> TinyTransformer<F> {
    pub fn new(config: TinyTransformerConfig, params: Parameters<F>) -> Result<Self> {
        config.validate()?;
        Ok(TinyTransformer { config, params })
    }

    /// Load from a bundle whose `arch` metadata describes the architecture.
    pub fn from_bundle(bundle: &ModelBundle) -> Result<Self> {
        let arch = bundle
            .metadata
            .get(META_ARCH)
            .ok_or_else(|| GwqError::Input("model has no `arch` metadata".into()))?;
        let config = TinyTransformerConfig::from_json(arch)?;
        Self::with_config(config, bundle)
    }

    pub fn with_config(config: TinyTransformerConfig, bundle: &ModelBundle) -> Result<Self> {
        config.validate()?;
        let params = Parameters::from_bundle(&config, bundle)?;
        Ok(TinyTransformer { config, params })
    }

    /// Evaluate a quantized model through its dense reconstruction.
    pub fn from_quantized(model: &QuantizedModel) -> Result<Self> {
        Self::from_bundle(&model.to_bundle())
    }

    pub fn to_bundle(&self) -> ModelBundle {
        let mut b = ModelBundle::new();
        for t in self.params.to_tensors(&self.config) {
            b.insert(t);
        }
        b.metadata.insert(META_ARCH.into(), self.config.to_json());
        b
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(GwqError::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(GwqError::Input(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(pos) = tokens.iter().position(|&t| t as usize >= self.config.vocab_size) {
            return Err(GwqError::Input(format!(
                "token {} at position {pos} is outside vocab {}",
                tokens[pos], self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Flat `[T, vocab]` logits.
    pub fn logits(&self, tokens: &[u32]) -> Result<Vec<F>> {
        self.check_tokens(tokens)?;
        Ok(forward_cached(&self.config, &self.params, tokens).logits)
    }

    /// Loss of one sequence at precision `F`.
    pub fn loss(&self, tokens: &[u32], kind: LossKind) -> Result<F> {
        let logits = self.logits(tokens)?;
        let v = self.config.vocab_size;
        let targets = label_sequence(tokens, &logits, v, kind.labels);
        validate_targets(tokens.len(), v, &targets)?;
        Ok(loss_and_grad(&logits, v, &targets, kind.variant, F::one()).0)
    }

    /// Loss times `scale` and its gradient with respect to every parameter.
    /// Greedy labels are taken from the same forward pass and treated as
    /// constants.
    pub fn loss_and_grads(&self, tokens: &[u32], kind: LossKind, scale: F) -> Result<(F, Parameters<F>)> {
        let mut grads = Parameters::zeros(&self.config);
        let loss = self.accumulate_grads(tokens, kind, scale, &mut grads)?;
        Ok((loss, grads))
    }

    pub(crate) fn accumulate_grads(
        &self,
        tokens: &[u32],
        kind: LossKind,
        scale: F,
        grads: &mut Parameters<F>,
    ) -> Result<F> {
        self.check_tokens(tokens)?;
        let v = self.config.vocab_size;
        let cache = forward_cached(&self.config, &self.params, tokens);
        let targets = label_sequence(tokens, &cache.logits, v, kind.labels);
        validate_targets(tokens.len(), v, &targets)?;
        let (loss, dlogits) = loss_and_grad(&cache.logits, v, &targets, kind.variant, scale);
        backward_into(&self.config, &self.params, tokens, &cache, &dlogits, grads);
        Ok(loss)
    }
}

impl TinyTransformer<f32> {
    /// Inputs of every linear layer, keyed by weight name, as `[T, in]`.
    pub fn capture_activations(&self, tokens: &[u32]) -> Result<LayerActivations> {
        self.check_tokens(tokens)?;
        let cache = forward_cached(&self.config, &self.params, tokens);
        let (t, d, f) = (tokens.len(), self.config.d_model, self.config.d_ff);
        let mut out = LayerActivations::new();
        let mut put = |name: String, cols: usize, data: &[f32]| -> Result<()> {
            out.insert(name.clone(), Tensor::new(name, vec![t, cols], data.to_vec())?);
            Ok(())
        };
        for (i, c) in cache.layers.iter().enumerate() {
            for p in ["wq", "wk", "wv"] {
                put(format!("layers.{i}.attn.{p}"), d, &c.n1)?;
            }
            put(format!("layers.{i}.attn.wo"), d, &c.attn)?;
            put(format!("layers.{i}.mlp.w_up"), d, &c.n2)?;
            put(format!("layers.{i}.mlp.w_down"), f, &c.act)?;
        }
        put("lm_head".into(), d, &cache.n_final)?;
        Ok(out)
    }

    /// Log-likelihood statistics over a long token stream.
    ///
    /// The stream is cut into windows of `max_seq_len` tokens overlapping by
    /// one, so every token after the first is predicted exactly once from the
    /// preceding tokens of its window.
    pub fn evaluate(&self, tokens: &[u32]) -> Result<EvalStats> {
        if tokens.len() < 2 {
            return Err(GwqError::Input("corpus needs at least 2 tokens".into()));
        }
        let windows = eval_windows(tokens.len(), self.config.max_seq_len);
        let v = self.config.vocab_size;
        let parts: Vec<EvalStats> = windows
            .par_iter()
            .map(|&(start, end)| {
                let w = &tokens[start..end];
                let logits = self.logits(w)?;
                let mut s = EvalStats::default();
                for (t, row) in logits.chunks_exact(v).take(w.len() - 1).enumerate() {
                    let target = w[t + 1] as usize;
                    s.neg_log2_sum -= log2_prob(row, target);
                    s.correct += usize::from(argmax(row) == target);
                    s.predictions += 1;
                }
                Ok(s)
            })
            .collect::<Result<_>>()?;
        Ok(parts.into_iter().fold(EvalStats::default(), |a, b| a.merge(&b)))
    }
}

/// `(start, end)` token ranges covering a stream of `n` tokens.
pub(crate) fn eval_windows(n: usize, max_len: usize) -> Vec<(usize, usize)> {
    let stride = max_len - 1;
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < n {
        out.push((start, (start + max_len).min(n)));
        start += stride;
    }
    out
}

/// Sums from which perplexity and next-token accuracy follow.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalStats {
    /// Total negative log-likelihood in bits.
    pub neg_log2_sum: f64,
    pub predictions: usize,
    pub correct: usize,
}

impl EvalStats {
    fn merge(&self, o: &EvalStats) -> EvalStats {
        EvalStats {
            neg_log2_sum: self.neg_log2_sum + o.neg_log2_sum,
            predictions: self.predictions + o.predictions,
            correct: self.correct + o.correct,
        }
    }

    pub fn mean_nll(&self) -> f64 {
        self.neg_log2_sum / self.predictions as f64 * std::f64::consts::LN_2
    }

    pub fn perplexity(&self) -> f64 {
        (self.neg_log2_sum / self.predictions as f64).exp2()
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.predictions as f64
    }
}

/// `exp` of the mean next-token negative log-likelihood over `tokens`.
pub fn perplexity(model: &TinyTransformer, tokens: &[u32]) -> Result<f64> {
    Ok(model.evaluate(tokens)?.perplexity())
}

/// Fraction of positions whose argmax prediction equals the next token: the
/// last position's logits are dropped and targets are shifted by one.
pub fn next_token_accuracy(model: &TinyTransformer, tokens: &[u32]) -> Result<f64> {
    Ok(model.evaluate(tokens)?.accuracy())
}

/// Logits `[T, vocab]` of the model stored in `weights`.
pub fn forward(weights: &ModelBundle, tokens: &[u32]) -> Result<Tensor> {
    let model = TinyTransformer::<f32>::from_bundle(weights)?;
    let v = model.config.vocab_size;
    Tensor::new("logits", vec![tokens.len(), v], model.logits(tokens)?)
}

/// Gradient of the loss of one sequence with respect to every weight.
/// `weights` is not modified.
pub fn backward(weights: &ModelBundle, tokens: &[u32], kind: LossKind) -> Result<GradientBundle> {
    backward_scaled(weights, tokens, kind, 1.0).map(|(_, g)| g)
}

/// As [`backward`], with the loss multiplied by `scale`; returns the scaled loss.
pub fn backward_scaled(
    weights: &ModelBundle,
    tokens: &[u32],
    kind: LossKind,
    scale: f32,
) -> Result<(f64, GradientBundle)> {
    let model = TinyTransformer::<f32>::from_bundle(weights)?;
    let (loss, grads) = model.loss_and_grads(tokens, kind, scale)?;
    Ok((to_f64(loss), grads.to_gradients(&model.config)?))
}

/// Tokenizer recorded in a model's metadata (byte-level when absent).
pub fn model_tokenizer(bundle: &ModelBundle) -> Result<Tokenizer> {
    Tokenizer::from_metadata(bundle.metadata.get(META_TOKENIZER).map(String::as_str))
}

/// Gradients from the first `samples` windows of `tokens`, one bundle per
/// window, as used for calibration.
pub fn calibration_gradients(
    model: &TinyTransformer,
    tokens: &[u32],
    samples: usize,
    kind: LossKind,
) -> Result<Vec<GradientBundle>> {
    let windows = calibration_windows(tokens.len(), model.config.max_seq_len, samples)?;
    windows
        .par_iter()
        .map(|&(s, e)| {
            let (_, g) = model.loss_and_grads(&tokens[s..e], kind, 1.0)?;
            g.to_gradients(&model.config)
        })
        .collect()
}

/// The first `samples` non-overlapping windows of `max_len` tokens.
pub fn calibration_windows(n: usize, max_len: usize, samples: usize) -> Result<Vec<(usize, usize)>> {
    if samples == 0 {
        return Err(GwqError::Config("calibration needs at least one sample".into()));
    }
    if n < 2 {
        return Err(GwqError::Input("calibration corpus needs at least 2 tokens".into()));
    }
    let out: Vec<(usize, usize)> = (0..samples)
        .map(|i| (i * max_len, ((i + 1) * max_len).min(n)))
        .take_while(|&(s, e)| e >= s + 2)
        .collect();
    if out.len() < samples {
        return Err(GwqError::Input(format!(
            "calibration corpus of {n} tokens holds {} windows of {max_len}, {samples} requested",
            out.len()
        )));
    }
    Ok(out)
}
