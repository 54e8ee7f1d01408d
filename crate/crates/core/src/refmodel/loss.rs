use super::config::{LabelSource, LossVariant};
use super::params::{cst, Real};
use crate::error::{GwqError, Result};
use crate::tensor::Tensor;

/// Index of the largest entry; the lowest index wins ties.
pub(crate) fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Label sequence for a loss: position `t` of the logits is scored against
/// `targets[t + 1]`. With greedy labels the model's own argmax at `t` becomes
/// the label for `t + 1`.
pub(crate) fn label_sequence<F: Real>(
    tokens: &[u32],
    logits: &[F],
    vocab: usize,
    source: LabelSource,
) -> Vec<u32> {
    match source {
        LabelSource::DatasetTokens => tokens.to_vec(),
        LabelSource::ModelGreedy => {
            let mut out = Vec::with_capacity(tokens.len());
            out.push(tokens[0]);
            out.extend(
                logits
                    .chunks_exact(vocab)
                    .take(tokens.len() - 1)
                    .map(|row| argmax(row) as u32),
            );
            out
        }
    }
}

fn check_alignment(rows: usize, vocab: usize, targets: &[u32]) -> Result<()> {
    if targets.len() != rows {
        return Err(GwqError::Alignment(format!(
            "{} targets for {rows} logit rows; pass the full token sequence",
            targets.len()
        )));
    }
    if rows < 2 {
        return Err(GwqError::Input("need at least 2 positions to predict a token".into()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(GwqError::Input(format!("target {bad} outside vocab {vocab}")));
    }
    Ok(())
}

/// Loss value and its gradient with respect to the logits, multiplied by
/// `scale`. Only rows `0..T-1` are scored; the last row gets zero gradient.
pub(crate) fn loss_and_grad<F: Real>(
    logits: &[F],
    vocab: usize,
    targets: &[u32],
    variant: LossVariant,
    scale: F,
) -> (F, Vec<F>) {
    let positions = targets.len() - 1;
    let mut grad = vec![F::zero(); logits.len()];
    let mut total = F::zero();
    match variant {
        LossVariant::CrossEntropy => {
            let w = scale / cst(positions as f64);
            for (t, (row, g)) in logits
                .chunks_exact(vocab)
                .zip(grad.chunks_exact_mut(vocab))
                .take(positions)
                .enumerate()
            {
                let target = targets[t + 1] as usize;
                let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for (gi, &l) in g.iter_mut().zip(row) {
                    *gi = (l - max).exp();
                    sum += *gi;
                }
                total += sum.ln() - (row[target] - max);
                for gi in g.iter_mut() {
                    *gi = *gi / sum * w;
                }
                g[target] -= w;
            }
            (total / cst(positions as f64) * scale, grad)
        }
        LossVariant::MseOnLogits => {
            let n: F = cst((positions * vocab) as f64);
            let two: F = cst(2.0);
            for (t, (row, g)) in logits
                .chunks_exact(vocab)
                .zip(grad.chunks_exact_mut(vocab))
                .take(positions)
                .enumerate()
            {
                let target = targets[t + 1] as usize;
                for (j, (gi, &l)) in g.iter_mut().zip(row).enumerate() {
                    let diff = if j == target { l - F::one() } else { l };
                    total += diff * diff;
                    *gi = two * diff / n * scale;
                }
            }
            (total / n * scale, grad)
        }
    }
}

/// Mean loss of `logits` (`[T, V]`) against the token sequence `targets`
/// (length `T`): row `t` predicts `targets[t + 1]`. Computed in `f64`.
pub fn loss(logits: &Tensor, targets: &[u32], variant: LossVariant) -> Result<f64> {
    let (rows, vocab) = logits.matrix_dims()?;
    check_alignment(rows, vocab, targets)?;
    let wide: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
    Ok(loss_and_grad(&wide, vocab, targets, variant, 1.0).0)
}

pub(crate) fn validate_targets(rows: usize, vocab: usize, targets: &[u32]) -> Result<()> {
    check_alignment(rows, vocab, targets)
}

/// Base-2 log-probability of `target` under softmax(`row`), in `f64`.
///
/// Working in base 2 keeps the uniform case exact for power-of-two vocabularies:
/// each term is `-log2(V)` and `2^log2(V) = V` without rounding.
pub(crate) fn log2_prob(row: &[f32], target: usize) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = row.iter().map(|&l| (l as f64 - max).exp()).sum();
    (row[target] as f64 - max) * std::f64::consts::LOG2_E - sum.log2()
}

pub(crate) fn to_f64<F: Real>(v: F) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(rows: usize, vocab: usize, data: Vec<f32>) -> Tensor {
        Tensor::new("logits", vec![rows, vocab], data).unwrap()
    }

    #[test]
    fn uniform_cross_entropy_is_ln_vocab() {
        let l = loss(&tensor(3, 10, vec![0.0; 30]), &[1, 2, 3], LossVariant::CrossEntropy).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0f32, 10.0, 50.0] {
            let mut data = vec![0.0; 8];
            data[1] = margin; // row 0 predicts token 1
            let l = loss(&tensor(2, 4, data), &[0, 1], LossVariant::CrossEntropy).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn matches_per_position_oracle() {
        let (rows, vocab) = (5, 7);
        let data: Vec<f32> = (0..rows * vocab).map(|i| ((i * 13 % 17) as f32 - 8.0) / 3.0).collect();
        let targets = [3u32, 0, 6, 2, 5];
        let logits = tensor(rows, vocab, data.clone());
        let mut ce = 0.0f64;
        let mut mse = 0.0f64;
        for t in 0..rows - 1 {
            let row = &data[t * vocab..(t + 1) * vocab];
            let z: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
            ce -= ((row[targets[t + 1] as usize] as f64).exp() / z).ln();
            for (j, &v) in row.iter().enumerate() {
                let y = if j == targets[t + 1] as usize { 1.0 } else { 0.0 };
                mse += (v as f64 - y).powi(2);
            }
        }
        let got_ce = loss(&logits, &targets, LossVariant::CrossEntropy).unwrap();
        let got_mse = loss(&logits, &targets, LossVariant::MseOnLogits).unwrap();
        assert!((got_ce - ce / 4.0).abs() < 1e-12);
        assert!((got_mse - mse / (4.0 * 7.0)).abs() < 1e-12);
    }

    #[test]
    fn misaligned_targets_rejected() {
        let logits = tensor(3, 4, vec![0.0; 12]);
        assert!(matches!(
            loss(&logits, &[0, 1], LossVariant::CrossEntropy),
            Err(GwqError::Alignment(_))
        ));
    }

    #[test]
    fn gradient_matches_difference_quotient() {
        let logits: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let targets = [1u32, 3, 0];
        for variant in [LossVariant::CrossEntropy, LossVariant::MseOnLogits] {
            let (_, g) = loss_and_grad(&logits, 4, &targets, variant, 1.0);
            for i in 0..12 {
                let mut up = logits.clone();
                let mut dn = logits.clone();
                up[i] += 1e-6;
                dn[i] -= 1e-6;
                let fd = (loss_and_grad(&up, 4, &targets, variant, 1.0).0
                    - loss_and_grad(&dn, 4, &targets, variant, 1.0).0)
                    / 2e-6;
                assert!((fd - g[i]).abs() < 1e-8, "{variant:?} {i}");
            }
        }
    }

    #[test]
    fn greedy_labels_follow_argmax() {
        let logits = [0.0f32, 2.0, 1.0, 5.0, 5.0, 0.0, 0.0, 0.0, 9.0];
        let labels = label_sequence(&[2, 0, 0], &logits, 3, LabelSource::ModelGreedy);
        assert_eq!(labels, vec![2, 1, 0]);
    }

    #[test]
    fn uniform_log2_prob_is_exact() {
        assert_eq!(log2_prob(&[0.0; 256], 17), -8.0);
    }
}
