use serde::{Deserialize, Serialize};

use crate::error::{GwqError, Result};

/// Shape of the reference decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyTransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    /// Hidden width of the MLP, `4 * d_model` unless set explicitly.
    pub d_ff: usize,
    pub use_bias: bool,
}

impl TinyTransformerConfig {
    pub fn new(
        vocab_size: usize,
        d_model: usize,
        n_heads: usize,
        n_layers: usize,
        max_seq_len: usize,
    ) -> Self {
        TinyTransformerConfig {
            vocab_size,
            d_model,
            n_heads,
            n_layers,
            max_seq_len,
            d_ff: 4 * d_model,
            use_bias: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(GwqError::Config(format!("{field} must be positive")));
            }
        }
        if self.max_seq_len < 2 {
            return Err(GwqError::Config(
                "max_seq_len must be at least 2 to predict anything".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(GwqError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Quantization assumes bias-free linear layers.
    pub fn check_gwq_ready(&self) -> Result<()> {
        self.validate()?;
        if self.use_bias {
            return Err(GwqError::Config(
                "model uses biases; gradient-aware quantization requires bias-free linear layers"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Every parameter tensor with its dims, in canonical order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.max_seq_len, d]),
        ];
        let linear = |out: &mut Vec<(String, Vec<usize>)>, name: String, rows, cols| {
            if self.use_bias {
                out.push((name.clone(), vec![rows, cols]));
                out.push((format!("{name}.bias"), vec![rows]));
            } else {
                out.push((name, vec![rows, cols]));
            }
        };
        for i in 0..self.n_layers {
            out.push((format!("layers.{i}.attn_norm"), vec![d]));
            for p in ["wq", "wk", "wv", "wo"] {
                linear(&mut out, format!("layers.{i}.attn.{p}"), d, d);
            }
            out.push((format!("layers.{i}.mlp_norm"), vec![d]));
            linear(&mut out, format!("layers.{i}.mlp.w_up"), f, d);
            linear(&mut out, format!("layers.{i}.mlp.w_down"), d, f);
        }
        out.push(("final_norm".to_string(), vec![d]));
        linear(&mut out, "lm_head".to_string(), v, d);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, dims)| dims.iter().product::<usize>())
            .sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)
            .map_err(|e| GwqError::Input(format!("bad `arch` metadata: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossVariant {
    #[default]
    CrossEntropy,
    /// Mean squared difference between logits and one-hot targets.
    MseOnLogits,
}

/// Where next-token labels come from during gradient capture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelSource {
    #[default]
    DatasetTokens,
    /// The model's own greedy prediction at each position.
    ModelGreedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LossKind {
    pub variant: LossVariant,
    pub labels: LabelSource,
}

impl LossKind {
    pub fn new(variant: LossVariant, labels: LabelSource) -> Self {
        LossKind { variant, labels }
    }
}
