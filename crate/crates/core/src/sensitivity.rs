//! Turning gradients into outlier masks.
//!
//! Scores are non-negative per-weight sensitivities; the mask keeps the top
//! fraction of them either within every tensor ([`Scope::PerLayer`]) or across
//! all scored tensors at once ([`Scope::Global`]). Ties go to the lower flat
//! index (in global scope: lower position in the concatenation of tensors in
//! score order), which makes masks for growing fractions nest.

use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GwqError, Result};
use crate::io::{write_container, GradientBundle, ModelBundle};
use crate::tensor::{select_top_abs, top_count, DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scope {
    #[default]
    PerLayer,
    Global,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::PerLayer => "per-layer",
            Scope::Global => "global",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMethod {
    /// `|mean_s g_s|`, the default.
    AbsGradientMean,
    /// `mean_s |g_s|`, kept for ablations.
    MeanAbsGradient,
    /// `mean_s g_s^2` (empirical Fisher diagonal).
    HessianDiagFisher,
    /// Second moment of the layer input column, broadcast over output rows.
    HessianDiagInputSq,
    Random,
}

impl ScoreMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMethod::AbsGradientMean => "gradient",
            ScoreMethod::MeanAbsGradient => "gradient-mean-abs",
            ScoreMethod::HessianDiagFisher => "hessian-fisher",
            ScoreMethod::HessianDiagInputSq => "hessian-input-sq",
            ScoreMethod::Random => "random",
        }
    }
}

impl fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityScores {
    pub scores: IndexMap<String, Tensor>,
    pub method: ScoreMethod,
}

impl SensitivityScores {
    fn new(method: ScoreMethod) -> Self {
        SensitivityScores {
            scores: IndexMap::new(),
            method,
        }
    }

    /// Keeps only the tensors accepted by `keep`.
    pub fn restrict(mut self, mut keep: impl FnMut(&str) -> bool) -> Self {
        self.scores.retain(|name, _| keep(name));
        self
    }
}

/// Boolean mask for one tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMask {
    pub dims: Vec<usize>,
    pub flags: Vec<bool>,
}

impl TensorMask {
    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierMask {
    pub masks: IndexMap<String, TensorMask>,
    pub selected_fraction: f64,
    pub scope: Scope,
    /// Smallest selected score per tensor (the global threshold in global
    /// scope). Empty for random masks.
    pub thresholds: IndexMap<String, f32>,
}

impl OutlierMask {
    pub fn get(&self, name: &str) -> Option<&TensorMask> {
        self.masks.get(name)
    }

    pub fn total_selected(&self) -> usize {
        self.masks.values().map(TensorMask::count).sum()
    }

    /// Exports masks as `<weight>.mask` u8 tensors.
    pub fn to_container(&self) -> Result<ModelBundle> {
        let mut out = ModelBundle::new();
        for (name, m) in &self.masks {
            let data = m.flags.iter().map(|&f| f as u8 as f32).collect();
            out.insert(Tensor::with_dtype(
                format!("{name}.mask"),
                m.dims.clone(),
                DType::U8,
                data,
            )?);
        }
        out.metadata
            .insert("selected_fraction".into(), self.selected_fraction.to_string());
        out.metadata.insert("scope".into(), self.scope.to_string());
        Ok(out)
    }
}

pub fn write_masks(mask: &OutlierMask, path: &Path) -> Result<()> {
    write_container(&mask.to_container()?, path)
}

/// How per-sample gradients are combined before ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    MeanThenAbs,
    AbsThenMean,
}

fn check_same_layout(grads: &[GradientBundle]) -> Result<&GradientBundle> {
    let first = grads
        .first()
        .ok_or_else(|| GwqError::Input("no gradient bundles to aggregate".into()))?;
    for (s, b) in grads.iter().enumerate().skip(1) {
        if b.len() != first.len() {
            return Err(GwqError::Alignment(format!(
                "sample {s} has {} gradient tensors, sample 0 has {}",
                b.len(),
                first.len()
            )));
        }
        for (name, g0) in first.iter() {
            let g = b.get(name).ok_or_else(|| {
                GwqError::Alignment(format!("sample {s} lacks gradient for `{name}`"))
            })?;
            if g.dims() != g0.dims() {
                return Err(GwqError::Alignment(format!(
                    "sample {s} gradient `{name}` dims {:?} differ from {:?}",
                    g.dims(),
                    g0.dims()
                )));
            }
        }
    }
    Ok(first)
}

/// Elementwise reduction over samples, accumulated in `f64`.
fn reduce_samples(
    grads: &[GradientBundle],
    method: ScoreMethod,
    per_elem: impl Fn(f32) -> f64,
    finish: impl Fn(f64) -> f64,
) -> Result<SensitivityScores> {
    let first = check_same_layout(grads)?;
    let n = grads.len() as f64;
    let mut out = SensitivityScores::new(method);
    for (name, g0) in first.iter() {
        let mut acc = vec![0.0f64; g0.numel()];
        for b in grads {
            for (a, &v) in acc.iter_mut().zip(b.get(name).expect("checked").data()) {
                *a += per_elem(v);
            }
        }
        let data = acc.into_iter().map(|a| finish(a / n) as f32).collect();
        out.scores
            .insert(name.clone(), Tensor::new(name.clone(), g0.dims().to_vec(), data)?);
    }
    Ok(out)
}

/// Signed elementwise mean of per-sample gradients, ready to store as one
/// gradient file. `aggregate_gradients` of the result equals
/// `aggregate_gradients` of the inputs.
pub fn mean_gradients(grads: &[GradientBundle]) -> Result<GradientBundle> {
    if grads.len() == 1 {
        return Ok(grads[0].clone());
    }
    let means = reduce_samples(grads, ScoreMethod::AbsGradientMean, |v| v as f64, |m| m)?;
    let mut out = GradientBundle::new();
    for (name, t) in means.scores {
        out.insert(&name, t);
    }
    Ok(out)
}

/// `|mean over samples of g|`.
pub fn aggregate_gradients(grads: &[GradientBundle]) -> Result<SensitivityScores> {
    aggregate_gradients_with(grads, Aggregation::MeanThenAbs)
}

pub fn aggregate_gradients_with(
    grads: &[GradientBundle],
    how: Aggregation,
) -> Result<SensitivityScores> {
    if grads.len() == 1 && how == Aggregation::MeanThenAbs {
        // |g| exactly, without the f64 round trip
        let first = &grads[0];
        let mut out = SensitivityScores::new(ScoreMethod::AbsGradientMean);
        for (name, g) in first.iter() {
            let data = g.data().iter().map(|v| v.abs()).collect();
            out.scores
                .insert(name.clone(), Tensor::new(name.clone(), g.dims().to_vec(), data)?);
        }
        return Ok(out);
    }
    match how {
        Aggregation::MeanThenAbs => {
            reduce_samples(grads, ScoreMethod::AbsGradientMean, |v| v as f64, f64::abs)
        }
        Aggregation::AbsThenMean => reduce_samples(
            grads,
            ScoreMethod::MeanAbsGradient,
            |v| (v as f64).abs(),
            |m| m,
        ),
    }
}

/// Inputs seen by each linear layer during calibration, keyed by the weight
/// name: a `[positions, in_features]` matrix.
pub type LayerActivations = IndexMap<String, Tensor>;

pub enum HessianSource<'a> {
    Gradients(&'a [GradientBundle]),
    Activations(&'a LayerActivations),
}

/// Diagonal-Hessian baselines for every tensor in `weights`.
///
/// `Gradients` yields the Fisher variant `mean g^2`; `Activations` yields
/// `score[r, c] = mean_t x_t[c]^2` for each linear weight.
pub fn hessian_diag_scores(
    weights: &ModelBundle,
    source: HessianSource<'_>,
) -> Result<SensitivityScores> {
    match source {
        HessianSource::Gradients(grads) => {
            let scores = reduce_samples(
                grads,
                ScoreMethod::HessianDiagFisher,
                |v| (v as f64) * (v as f64),
                |m| m,
            )?;
            let scores = scores.restrict(|n| weights.get(n).is_some());
            for (name, w) in weights.iter() {
                match scores.scores.get(name) {
                    Some(s) if s.dims() == w.dims() => {}
                    _ => {
                        return Err(GwqError::Alignment(format!(
                            "no aligned gradient for weight `{name}`"
                        )))
                    }
                }
            }
            Ok(scores)
        }
        HessianSource::Activations(acts) => {
            let mut out = SensitivityScores::new(ScoreMethod::HessianDiagInputSq);
            for (name, w) in weights.iter() {
                let (rows, cols) = w.matrix_dims()?;
                let x = acts.get(name).ok_or_else(|| {
                    GwqError::Input(format!("no captured activations for `{name}`"))
                })?;
                let (positions, width) = x.matrix_dims()?;
                if width != cols {
                    return Err(GwqError::Alignment(format!(
                        "activations for `{name}` have width {width}, weight has {cols} columns"
                    )));
                }
                let mut second = vec![0.0f64; cols];
                for t in 0..positions {
                    for (acc, &v) in second.iter_mut().zip(x.row(t)) {
                        *acc += (v as f64) * (v as f64);
                    }
                }
                let col_scores: Vec<f32> =
                    second.iter().map(|s| (s / positions as f64) as f32).collect();
                let data = (0..rows).flat_map(|_| col_scores.iter().copied()).collect();
                out.scores
                    .insert(name.clone(), Tensor::new(name.clone(), vec![rows, cols], data)?);
            }
            Ok(out)
        }
    }
}

/// Keep the top `fraction` of scores under `scope`.
pub fn select_outliers(
    scores: &SensitivityScores,
    fraction: f64,
    scope: Scope,
) -> Result<OutlierMask> {
    let mut masks = IndexMap::new();
    let mut thresholds = IndexMap::new();
    match scope {
        Scope::PerLayer => {
            for (name, s) in &scores.scores {
                let sel = select_top_abs(s.data(), fraction)?;
                let mut flags = vec![false; s.numel()];
                for i in sel.indices {
                    flags[i] = true;
                }
                masks.insert(
                    name.clone(),
                    TensorMask {
                        dims: s.dims().to_vec(),
                        flags,
                    },
                );
                thresholds.insert(name.clone(), sel.threshold);
            }
        }
        Scope::Global => {
            let all: Vec<f32> = scores
                .scores
                .values()
                .flat_map(|t| t.data().iter().copied())
                .collect();
            let sel = select_top_abs(&all, fraction)?;
            let mut flags_all = vec![false; all.len()];
            for i in sel.indices {
                flags_all[i] = true;
            }
            let mut offset = 0;
            for (name, s) in &scores.scores {
                let flags = flags_all[offset..offset + s.numel()].to_vec();
                offset += s.numel();
                masks.insert(
                    name.clone(),
                    TensorMask {
                        dims: s.dims().to_vec(),
                        flags,
                    },
                );
                thresholds.insert(name.clone(), sel.threshold);
            }
        }
    }
    Ok(OutlierMask {
        masks,
        selected_fraction: fraction,
        scope,
        thresholds,
    })
}

/// Uniformly random mask with the same exact cardinality rule as
/// [`select_outliers`].
pub fn random_mask(
    shapes: &IndexMap<String, Vec<usize>>,
    fraction: f64,
    scope: Scope,
    seed: u64,
) -> Result<OutlierMask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(GwqError::Domain(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = IndexMap::new();
    let numels: Vec<usize> = shapes.values().map(|d| d.iter().product()).collect();
    match scope {
        Scope::PerLayer => {
            for ((name, dims), &n) in shapes.iter().zip(&numels) {
                let mut flags = vec![false; n];
                for i in sample(&mut rng, n, top_count(fraction, n)) {
                    flags[i] = true;
                }
                masks.insert(
                    name.clone(),
                    TensorMask {
                        dims: dims.clone(),
                        flags,
                    },
                );
            }
        }
        Scope::Global => {
            let total: usize = numels.iter().sum();
            let mut flags_all = vec![false; total];
            for i in sample(&mut rng, total, top_count(fraction, total)) {
                flags_all[i] = true;
            }
            let mut offset = 0;
            for ((name, dims), &n) in shapes.iter().zip(&numels) {
                masks.insert(
                    name.clone(),
                    TensorMask {
                        dims: dims.clone(),
                        flags: flags_all[offset..offset + n].to_vec(),
                    },
                );
                offset += n;
            }
        }
    }
    Ok(OutlierMask {
        masks,
        selected_fraction: fraction,
        scope,
        thresholds: IndexMap::new(),
    })
}

fn aligned<'a>(
    name: &str,
    g: &Tensor,
    w: &'a ModelBundle,
    wq: &'a ModelBundle,
) -> Result<(&'a Tensor, &'a Tensor)> {
    let a = w
        .get(name)
        .ok_or_else(|| GwqError::Alignment(format!("weights lack `{name}`")))?;
    let b = wq
        .get(name)
        .ok_or_else(|| GwqError::Alignment(format!("quantized weights lack `{name}`")))?;
    if a.dims() != g.dims() || b.dims() != g.dims() {
        return Err(GwqError::Alignment(format!(
            "`{name}`: gradient {:?}, weight {:?}, quantized {:?}",
            g.dims(),
            a.dims(),
            b.dims()
        )));
    }
    Ok((a, b))
}

/// Per-tensor `g . (W - W_Q)`, accumulated in `f64`.
pub fn sensitivity_objective(
    grads: &GradientBundle,
    w: &ModelBundle,
    wq: &ModelBundle,
) -> Result<IndexMap<String, f64>> {
    let mut out = IndexMap::new();
    for (name, g) in grads.iter() {
        let (a, b) = aligned(name, g, w, wq)?;
        let dot = g
            .data()
            .iter()
            .zip(a.data().iter().zip(b.data()))
            .map(|(&gi, (&wi, &qi))| gi as f64 * (wi as f64 - qi as f64))
            .sum();
        out.insert(name.clone(), dot);
    }
    Ok(out)
}

/// First-order estimate of `L(W_Q) - L(W)`: `-g . (W - W_Q)`.
pub fn predicted_loss_delta(
    grads: &GradientBundle,
    w: &ModelBundle,
    wq: &ModelBundle,
) -> Result<f64> {
    Ok(-sensitivity_objective(grads, w, wq)?.values().sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn bundle(entries: &[(&str, Vec<usize>, Vec<f32>)]) -> GradientBundle {
        let mut b = GradientBundle::new();
        for (n, d, v) in entries {
            b.insert(n, Tensor::new(*n, d.clone(), v.clone()).unwrap());
        }
        b
    }

    fn scores_of(name: &str, v: Vec<f32>) -> SensitivityScores {
        let mut s = SensitivityScores::new(ScoreMethod::AbsGradientMean);
        s.scores
            .insert(name.into(), Tensor::new(name, vec![v.len()], v).unwrap());
        s
    }

    #[test]
    fn single_bundle_is_abs() {
        let g = bundle(&[("w", vec![3], vec![-1.5, 0.0, 2.0])]);
        let s = aggregate_gradients(&[g]).unwrap();
        assert_eq!(s.scores["w"].data(), &[1.5, 0.0, 2.0]);
    }

    #[test]
    fn opposite_bundles_cancel() {
        let g = bundle(&[("w", vec![2], vec![0.3, -0.7])]);
        let neg = bundle(&[("w", vec![2], vec![-0.3, 0.7])]);
        let s = aggregate_gradients(&[g.clone(), neg.clone()]).unwrap();
        assert_eq!(s.scores["w"].data(), &[0.0, 0.0]);
        let s = aggregate_gradients_with(&[g, neg], Aggregation::AbsThenMean).unwrap();
        assert_eq!(s.scores["w"].data(), &[0.3, 0.7]);
    }

    #[test]
    fn four_bundles_match_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<Vec<f32>> = (0..4)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let bundles: Vec<_> = samples
            .iter()
            .map(|v| bundle(&[("w", vec![2, 3], v.clone())]))
            .collect();
        let s = aggregate_gradients(&bundles).unwrap();
        for i in 0..6 {
            let mean = samples.iter().map(|v| v[i] as f64).sum::<f64>() / 4.0;
            assert_eq!(s.scores["w"].data()[i], mean.abs() as f32);
        }
    }

    #[test]
    fn aggregation_rejects_misaligned() {
        let a = bundle(&[("w", vec![2], vec![0.0, 1.0])]);
        let b = bundle(&[("w", vec![1, 2], vec![0.0, 1.0])]);
        assert!(matches!(
            aggregate_gradients(&[a.clone(), b]),
            Err(GwqError::Alignment(_))
        ));
        let c = bundle(&[("v", vec![2], vec![0.0, 1.0])]);
        assert!(aggregate_gradients(&[a, c]).is_err());
        assert!(aggregate_gradients(&[]).is_err());
    }

    #[test]
    fn select_examples() {
        let s = scores_of("w", vec![0.1, 0.5, 0.2, 0.9]);
        let m = select_outliers(&s, 0.25, Scope::PerLayer).unwrap();
        assert_eq!(m.masks["w"].flags, vec![false, false, false, true]);
        assert_eq!(m.thresholds["w"], 0.9);
        let all = select_outliers(&s, 1.0, Scope::PerLayer).unwrap();
        assert!(all.masks["w"].flags.iter().all(|&f| f));
    }

    #[test]
    fn global_scope_matches_concatenated_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut s = SensitivityScores::new(ScoreMethod::AbsGradientMean);
        let mut concat = Vec::new();
        for (name, n) in [("a", 300), ("b", 500), ("c", 200)] {
            let v: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            concat.extend(v.iter().copied());
            s.scores
                .insert(name.into(), Tensor::new(name, vec![n], v).unwrap());
        }
        let m = select_outliers(&s, 0.01, Scope::Global).unwrap();
        let mut order: Vec<usize> = (0..concat.len()).collect();
        order.sort_by(|&a, &b| concat[b].partial_cmp(&concat[a]).unwrap());
        let mut expected = vec![false; concat.len()];
        for &i in &order[..10] {
            expected[i] = true;
        }
        let got: Vec<bool> = m
            .masks
            .values()
            .flat_map(|t| t.flags.iter().copied())
            .collect();
        assert_eq!(got, expected);
        assert_eq!(m.total_selected(), 10);
    }

    #[test]
    fn fisher_and_input_sq() {
        let mut w = ModelBundle::new();
        w.insert(Tensor::new("w", vec![2, 3], vec![0.0; 6]).unwrap());
        let g = bundle(&[("w", vec![2, 3], vec![1.0, -2.0, 0.5, 0.0, 3.0, -1.0])]);
        let f = hessian_diag_scores(&w, HessianSource::Gradients(std::slice::from_ref(&g)))
            .unwrap();
        assert_eq!(f.scores["w"].data(), &[1.0, 4.0, 0.25, 0.0, 9.0, 1.0]);

        let mut acts = LayerActivations::new();
        acts.insert("w".into(), Tensor::new("x", vec![4, 3], vec![1.0; 12]).unwrap());
        let h = hessian_diag_scores(&w, HessianSource::Activations(&acts)).unwrap();
        assert!(h.scores["w"].data().iter().all(|&v| v == 1.0));

        let empty = LayerActivations::new();
        assert!(matches!(
            hessian_diag_scores(&w, HessianSource::Activations(&empty)),
            Err(GwqError::Input(_))
        ));
    }

    #[test]
    fn input_sq_matches_accumulation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<f32> = (0..5 * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut w = ModelBundle::new();
        w.insert(Tensor::zeros("w", vec![3, 4]));
        let mut acts = LayerActivations::new();
        acts.insert("w".into(), Tensor::new("x", vec![5, 4], xs.clone()).unwrap());
        let h = hessian_diag_scores(&w, HessianSource::Activations(&acts)).unwrap();
        for c in 0..4 {
            let mut acc = 0.0f64;
            for t in 0..5 {
                acc += (xs[t * 4 + c] as f64).powi(2);
            }
            let expect = (acc / 5.0) as f32;
            for r in 0..3 {
                assert_eq!(h.scores["w"].data()[r * 4 + c], expect);
            }
        }
    }

    #[test]
    fn random_mask_cardinality_and_determinism() {
        let mut shapes = IndexMap::new();
        shapes.insert("a".to_string(), vec![10, 10]);
        shapes.insert("b".to_string(), vec![7, 13]);
        let m1 = random_mask(&shapes, 0.05, Scope::PerLayer, 3).unwrap();
        let m2 = random_mask(&shapes, 0.05, Scope::PerLayer, 3).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.masks["a"].count(), 5);
        assert_eq!(m1.masks["b"].count(), 5);
        let full = random_mask(&shapes, 1.0, Scope::Global, 1).unwrap();
        assert_eq!(full.total_selected(), 191);
    }

    #[test]
    fn loss_prediction_and_objective() {
        let mut w = ModelBundle::new();
        w.insert(Tensor::new("a", vec![2], vec![1.0, 2.0]).unwrap());
        w.insert(Tensor::new("b", vec![1], vec![3.0]).unwrap());
        let mut wq = ModelBundle::new();
        wq.insert(Tensor::new("a", vec![2], vec![0.5, 2.5]).unwrap());
        wq.insert(Tensor::new("b", vec![1], vec![3.0]).unwrap());
        let g = bundle(&[("a", vec![2], vec![2.0, 1.0]), ("b", vec![1], vec![5.0])]);
        let obj = sensitivity_objective(&g, &w, &wq).unwrap();
        assert_eq!(obj["a"], 2.0 * 0.5 + 1.0 * -0.5);
        assert_eq!(obj["b"], 0.0);
        assert_eq!(predicted_loss_delta(&g, &w, &wq).unwrap(), -0.5);
        assert_eq!(predicted_loss_delta(&g, &w, &w).unwrap(), 0.0);
        let zero = bundle(&[("a", vec![2], vec![0.0; 2]), ("b", vec![1], vec![0.0])]);
        assert_eq!(predicted_loss_delta(&zero, &w, &wq).unwrap(), 0.0);
    }
}
