//! Tiny bias-free decoder-only transformer with a hand-written backward pass.
//!
//! Pre-norm blocks (RMSNorm, causal multi-head attention, GELU MLP), learned
//! positional embeddings and an untied output projection. Weights are stored
//! `[out, in]` under the names listed by [`TinyTransformerConfig::param_specs`].

mod backward;
mod config;
mod forward;
mod loss;
mod model;
mod params;
mod tokenizer;
mod train;

pub use config::{LabelSource, LossKind, LossVariant, TinyTransformerConfig};
pub use loss::loss;
pub use model::{
    backward, backward_scaled, calibration_gradients, calibration_windows, forward,
    model_tokenizer, next_token_accuracy, perplexity, EvalStats, TinyTransformer, META_ARCH,
    META_TOKENIZER,
};
pub use params::{LayerParams, Linear, Parameters, Real};
pub use tokenizer::{Tokenizer, UNKNOWN_WORD};
pub use train::{
    init_parameters, train_reference, train_with, TrainOptions, META_FINAL_LOSS, META_SEED,
    META_STEPS,
};
