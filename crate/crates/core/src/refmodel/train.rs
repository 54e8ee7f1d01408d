use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{LossKind, TinyTransformerConfig};
use super::model::{TinyTransformer, META_TOKENIZER};
use super::params::Parameters;
use super::tokenizer::Tokenizer;
use crate::error::{GwqError, Result};
use crate::io::ModelBundle;

pub const META_SEED: &str = "seed";
pub const META_STEPS: &str = "steps";
pub const META_FINAL_LOSS: &str = "final_loss";

const INIT_STD: f64 = 0.02;

/// Seeded initialization: normal(0, 0.02) weights, residual output
/// projections shrunk by `sqrt(2 * n_layers)`, unit norm gains, zero biases.
pub fn init_parameters(cfg: &TinyTransformerConfig, seed: u64) -> Result<Parameters<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let residual_std = INIT_STD / ((2 * cfg.n_layers) as f64).sqrt();
    let mut p = Parameters::zeros(cfg);
    for (name, data) in p.named_mut() {
        if name.ends_with("norm") {
            data.fill(1.0);
        } else if name.ends_with(".bias") {
            continue;
        } else {
            let std = if name.ends_with("attn.wo") || name.ends_with("mlp.w_down") {
                residual_std
            } else {
                INIT_STD
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in data.iter_mut() {
                *v = normal.sample(&mut rng) as f32;
            }
        }
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Fraction of the peak rate reached at the last step (linear decay).
    pub final_lr_fraction: f32,
    pub grad_clip: f32,
    pub loss: LossKind,
    /// Print a progress line every this many steps; 0 disables logging.
    pub log_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 2000,
            seed: 0,
            batch_size: 8,
            learning_rate: 3e-3,
            final_lr_fraction: 0.1,
            grad_clip: 1.0,
            loss: LossKind::default(),
            log_every: 0,
        }
    }
}

struct Adam {
    m: Parameters<f32>,
    v: Parameters<f32>,
    t: i32,
}

impl Adam {
    const B1: f32 = 0.9;
    const B2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn new(cfg: &TinyTransformerConfig) -> Self {
        Adam {
            m: Parameters::zeros(cfg),
            v: Parameters::zeros(cfg),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut Parameters<f32>, grads: &Parameters<f32>, lr: f32) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let tensors = params
            .named_mut()
            .into_iter()
            .zip(grads.named())
            .zip(self.m.named_mut())
            .zip(self.v.named_mut());
        for ((((_, p), (_, g)), (_, m)), (_, v)) in tensors {
            for i in 0..p.len() {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g[i];
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Train the reference decoder on `tokens` with default options.
pub fn train_reference(
    config: &TinyTransformerConfig,
    tokens: &[u32],
    steps: usize,
    seed: u64,
) -> Result<ModelBundle> {
    let opts = TrainOptions {
        steps,
        seed,
        ..Default::default()
    };
    train_with(config, tokens, &Tokenizer::Byte, &opts)
}

/// Adam on random windows of `tokens`. Single-threaded and fully determined by
/// `opts.seed`; zero steps return the seeded initialization.
pub fn train_with(
    config: &TinyTransformerConfig,
    tokens: &[u32],
    tokenizer: &Tokenizer,
    opts: &TrainOptions,
) -> Result<ModelBundle> {
    config.validate()?;
    let params = init_parameters(config, opts.seed)?;
    let mut model = TinyTransformer::new(*config, params)?;
    let window = config.max_seq_len;
    if opts.steps > 0 {
        if tokens.len() < 2 {
            return Err(GwqError::Input("training corpus needs at least 2 tokens".into()));
        }
        if opts.batch_size == 0 {
            return Err(GwqError::Config("batch size must be positive".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(GwqError::Input(format!(
                "corpus token {bad} outside vocab {}",
                config.vocab_size
            )));
        }
    }
    // A separate stream for batch sampling keeps the initialization identical
    // to `init_parameters(config, seed)`.
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam = Adam::new(config);
    let mut last_loss = None;
    let span = tokens.len().min(window);
    for step in 0..opts.steps {
        let mut grads = Parameters::zeros(config);
        let mut loss = 0.0f64;
        let scale = 1.0 / opts.batch_size as f32;
        for _ in 0..opts.batch_size {
            let start = rng.random_range(0..=tokens.len() - span);
            let l = model.accumulate_grads(&tokens[start..start + span], opts.loss, scale, &mut grads)?;
            loss += l as f64;
        }
        if !loss.is_finite() {
            return Err(GwqError::Training(format!("loss is {loss} at step {step}")));
        }
        let norm = grads.sum_squares().sqrt();
        if !norm.is_finite() {
            return Err(GwqError::Training(format!("gradient norm is {norm} at step {step}")));
        }
        if norm > opts.grad_clip as f64 {
            grads.scale((opts.grad_clip as f64 / norm) as f32);
        }
        let progress = step as f32 / opts.steps.max(2).saturating_sub(1) as f32;
        let lr = opts.learning_rate * (1.0 - (1.0 - opts.final_lr_fraction) * progress);
        adam.step(&mut model.params, &grads, lr);
        last_loss = Some(loss);
        if opts.log_every > 0 && (step % opts.log_every == 0 || step + 1 == opts.steps) {
            eprintln!("step {step} loss {loss:.4} lr {lr:.2e} grad_norm {norm:.3}");
        }
    }
    let mut bundle = model.to_bundle();
    bundle.metadata.insert(META_SEED.into(), opts.seed.to_string());
    bundle.metadata.insert(META_STEPS.into(), opts.steps.to_string());
    bundle.metadata.insert(
        META_FINAL_LOSS.into(),
        last_loss.map_or_else(|| "none".to_string(), |l| format!("{l:.6}")),
    );
    bundle.metadata.insert(META_TOKENIZER.into(), tokenizer.to_metadata());
    Ok(bundle)
}
