#![allow(dead_code)]

use std::path::{Path, PathBuf};

use gwq::io::{read_container, ModelBundle};
use gwq::refmodel::{LossKind, Parameters, TinyTransformer, TinyTransformerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets")
}

pub fn bundled_model_path() -> PathBuf {
    assets().join("tiny_ref.safetensors")
}

pub fn bundled_model() -> ModelBundle {
    read_container(&bundled_model_path()).expect("bundled model")
}

pub fn corpus_path(name: &str) -> PathBuf {
    assets().join("corpus").join(format!("{name}.txt"))
}

/// Byte tokens of a bundled corpus.
pub fn corpus(name: &str) -> Vec<u32> {
    std::fs::read(corpus_path(name))
        .expect("bundled corpus")
        .into_iter()
        .map(u32::from)
        .collect()
}

/// Weights uniform in `[-std, std]` and norm gains in `[0.8, 1.2]`.
pub fn random_model(cfg: TinyTransformerConfig, seed: u64, std: f32) -> TinyTransformer<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Parameters::<f32>::zeros(&cfg);
    for (name, data) in p.named_mut() {
        for v in data.iter_mut() {
            let r: f32 = rng.random_range(-1.0..1.0);
            *v = if name.ends_with("norm") { 1.0 + 0.2 * r } else { std * r };
        }
    }
    TinyTransformer::new(cfg, p).unwrap()
}

pub fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

/// Central difference of `f` at step `h`.
pub fn central(f: &mut impl FnMut(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// One Richardson step on central differences at `h` and `h / 2`, which
/// cancels the `O(h^2)` truncation term.
pub fn richardson(f: &mut impl FnMut(f64) -> f64, h: f64) -> f64 {
    let d1 = central(f, h);
    let d2 = central(f, h / 2.0);
    (4.0 * d2 - d1) / 3.0
}

/// `|a - b| / max(|a|, |b|)`, with two exact zeros counting as agreement.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Worst relative error of the analytic gradient of `model` against
/// Richardson-extrapolated finite differences, with the parameter name and
/// index where it occurs.
pub fn gradient_check(model: &TinyTransformer<f64>, tokens: &[u32], kind: LossKind, h: f64) -> (f64, String) {
    let (_, grads) = model.loss_and_grads(tokens, kind, 1.0).unwrap();
    let mut probe = model.clone();
    let mut worst = (0.0, String::new());
    for (name, analytic) in grads.named() {
        for (i, &a) in analytic.iter().enumerate() {
            let orig = probe.params.get(&name).unwrap()[i];
            let mut f = |d: f64| {
                probe.params.get_mut(&name).unwrap()[i] = orig + d;
                let l = probe.loss(tokens, kind).unwrap();
                probe.params.get_mut(&name).unwrap()[i] = orig;
                l
            };
            let fd = richardson(&mut f, h);
            let e = rel_err(a, fd);
            if e > worst.0 {
                worst = (e, format!("{name}[{i}] analytic {a:e} fd {fd:e}"));
            }
        }
    }
    worst
}
