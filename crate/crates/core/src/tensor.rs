//! Dense row-major tensors and the numeric primitives shared by every module.
//!
//! Values are always held as `f32` in memory; the [`DType`] tag records how the
//! tensor is stored on disk. Float16 tensors are rounded on construction so a
//! write/read cycle is lossless.

use std::cmp::Ordering;
use std::ops::Range;

use half::f16;

use crate::error::{GwqError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F16,
    /// Only used for exported outlier masks.
    U8,
}

impl DType {
    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
            DType::U8 => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::U8 => "U8",
        }
    }

    pub fn parse(s: &str) -> Option<DType> {
        match s {
            "F32" => Some(DType::F32),
            "F16" => Some(DType::F16),
            "U8" => Some(DType::U8),
            _ => None,
        }
    }
}

/// Round an `f32` through IEEE half precision.
#[inline]
pub fn round_f16(v: f32) -> f32 {
    f16::from_f32(v).to_f32()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    name: String,
    dims: Vec<usize>,
    dtype: DType,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a float32 tensor, checking length and finiteness.
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::with_dtype(name, dims, DType::F32, data)
    }

    pub fn with_dtype(
        name: impl Into<String>,
        dims: Vec<usize>,
        dtype: DType,
        mut data: Vec<f32>,
    ) -> Result<Self> {
        let name = name.into();
        if dims.contains(&0) {
            return Err(GwqError::Dimension(format!(
                "tensor `{name}` has a zero-sized dimension {dims:?}"
            )));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(GwqError::Dimension(format!(
                "tensor `{name}`: dims {dims:?} imply {numel} elements, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(GwqError::Domain(format!(
                "tensor `{name}` has non-finite element at flat index {pos}"
            )));
        }
        match dtype {
            DType::F32 => {}
            DType::F16 => {
                for v in data.iter_mut() {
                    *v = round_f16(*v);
                }
                if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
                    return Err(GwqError::Domain(format!(
                        "tensor `{name}` overflows float16 at flat index {pos}"
                    )));
                }
            }
            DType::U8 => {
                if let Some(pos) = data
                    .iter()
                    .position(|&v| v.fract() != 0.0 || !(0.0..=255.0).contains(&v))
                {
                    return Err(GwqError::Domain(format!(
                        "tensor `{name}` is not representable as u8 at flat index {pos}"
                    )));
                }
            }
        }
        Ok(Tensor {
            name,
            dims,
            dtype,
            data,
        })
    }

    pub fn zeros(name: impl Into<String>, dims: Vec<usize>) -> Self {
        let numel = dims.iter().product();
        Tensor {
            name: name.into(),
            dims,
            dtype: DType::F32,
            data: vec![0.0; numel],
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Re-tags the tensor, rounding values when narrowing to float16.
    pub fn cast(&self, dtype: DType) -> Result<Tensor> {
        Tensor::with_dtype(self.name.clone(), self.dims.clone(), dtype, self.data.clone())
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(GwqError::Dimension(format!(
                "tensor `{}` is not 2-D (dims {other:?})",
                self.name
            ))),
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let cols = *self.dims.last().unwrap_or(&1);
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Partition every channel (row) into contiguous spans of at most
    /// `group_size` columns. The last span of a row may be shorter.
    pub fn groups(&self, group_size: usize) -> Result<impl Iterator<Item = GroupView<'_>>> {
        if group_size == 0 {
            return Err(GwqError::Config("group size must be positive".into()));
        }
        let (rows, cols) = self.matrix_dims()?;
        Ok((0..rows).flat_map(move |channel| {
            group_spans(cols, group_size)
                .enumerate()
                .map(move |(group_index, span)| GroupView {
                    parent: self,
                    channel,
                    group_index,
                    span,
                })
        }))
    }
}

/// Column ranges of the groups of one channel.
pub fn group_spans(cols: usize, group_size: usize) -> impl Iterator<Item = Range<usize>> {
    (0..cols.div_ceil(group_size)).map(move |g| {
        let start = g * group_size;
        start..(start + group_size).min(cols)
    })
}

pub fn groups_per_channel(cols: usize, group_size: usize) -> usize {
    cols.div_ceil(group_size)
}

/// One quantization group: a contiguous column span of a single channel.
#[derive(Debug, Clone)]
pub struct GroupView<'a> {
    parent: &'a Tensor,
    pub channel: usize,
    pub group_index: usize,
    pub span: Range<usize>,
}

impl<'a> GroupView<'a> {
    pub fn values(&self) -> &'a [f32] {
        let row = self.parent.row(self.channel);
        &row[self.span.clone()]
    }

    /// Flat index of the first element of the group in the parent tensor.
    pub fn flat_start(&self) -> usize {
        let cols = *self.parent.dims.last().unwrap_or(&1);
        self.channel * cols + self.span.start
    }

    pub fn len(&self) -> usize {
        self.span.len()
    }

    pub fn is_empty(&self) -> bool {
        self.span.is_empty()
    }
}

pub fn group_min_max(view: &GroupView<'_>) -> (f32, f32) {
    min_max(view.values().iter().copied()).expect("group spans are never empty")
}

/// Elementwise min and max, `None` for an empty iterator.
pub fn min_max(values: impl IntoIterator<Item = f32>) -> Option<(f32, f32)> {
    values.into_iter().fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

/// Standard matrix product with a fixed k-inner accumulation order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims()?;
    let (k2, n) = b.matrix_dims()?;
    if k != k2 {
        return Err(GwqError::Dimension(format!(
            "matmul inner dims differ: {m}x{k} by {k2}x{n}"
        )));
    }
    if a.dtype != DType::F32 || b.dtype != DType::F32 {
        return Err(GwqError::Input("matmul expects float32 operands".into()));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let mut acc = 0.0f32;
            for (p, &av) in arow.iter().enumerate() {
                acc += av * b.data[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(format!("{}@{}", a.name, b.name), vec![m, n], out)
}

/// Number of elements selected by a top fraction: `ceil(fraction * n)`.
///
/// Products within 1e-6 relative of an integer snap to it, so that a fraction
/// that went through `f32` (e.g. `0.001f32 * 1000 = 1.00000005`) still selects
/// the intended count.
pub fn top_count(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    let nearest = raw.round();
    let count = if nearest >= 1.0 && (raw - nearest).abs() <= 1e-6 * nearest {
        nearest
    } else {
        raw.ceil()
    };
    (count as usize).min(n)
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(GwqError::Domain(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    Ok(())
}

/// Result of ranking magnitudes and keeping the top fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct TopSelection {
    /// Magnitude of the weakest selected element.
    pub threshold: f32,
    /// Selected flat indices in increasing order.
    pub indices: Vec<usize>,
}

/// Keep the `top_count(fraction, N)` largest `|v|`; ties go to the lower
/// flat index.
pub fn select_top_abs(values: &[f32], fraction: f64) -> Result<TopSelection> {
    check_fraction(fraction)?;
    if values.is_empty() {
        return Err(GwqError::Domain("cannot take a quantile of an empty tensor".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(GwqError::Domain("NaN in quantile input".into()));
    }
    let k = top_count(fraction, values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    let cmp = |&a: &usize, &b: &usize| -> Ordering {
        values[b]
            .abs()
            .total_cmp(&values[a].abs())
            .then(a.cmp(&b))
    };
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    let threshold = values[order[k - 1]].abs();
    order.sort_unstable();
    Ok(TopSelection {
        threshold,
        indices: order,
    })
}

/// Magnitude threshold of the top `fraction` of a tensor (see [`select_top_abs`]).
pub fn abs_quantile(values: &Tensor, fraction: f64) -> Result<f32> {
    select_top_abs(values.data(), fraction).map(|s| s.threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(dims: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::new("t", dims, data).unwrap()
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Tensor::new("x", vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new("x", vec![1], vec![f32::NAN]).is_err());
        assert!(Tensor::new("x", vec![0, 2], vec![]).is_err());
        assert!(Tensor::with_dtype("x", vec![1], DType::F16, vec![1e6]).is_err());
        assert!(Tensor::with_dtype("x", vec![1], DType::U8, vec![0.5]).is_err());
    }

    #[test]
    fn f16_tensors_are_rounded() {
        let x = Tensor::with_dtype("x", vec![1], DType::F16, vec![0.1]).unwrap();
        assert_eq!(x.data()[0], f16::from_f32(0.1).to_f32());
    }

    #[test]
    fn matmul_identity_and_selector() {
        let eye = t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let m = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&eye, &m).unwrap().data(), m.data());
        let a = t(vec![1, 2], vec![1.0, 0.0]);
        let b = t(vec![2, 1], vec![0.0, 5.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[0.0]);
        assert!(matches!(
            matmul(&a, &a),
            Err(GwqError::Dimension(_))
        ));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut oracle = [0.0f32; 64];
        for i in 0..8 {
            for j in 0..8 {
                let mut s = 0.0f32;
                for p in 0..8 {
                    s += a[i * 8 + p] * b[p * 8 + j];
                }
                oracle[i * 8 + j] = s;
            }
        }
        let got = matmul(&t(vec![8, 8], a), &t(vec![8, 8], b)).unwrap();
        assert_eq!(got.data(), &oracle);
    }

    #[test]
    fn quantile_single_max() {
        let v = t(vec![4], vec![0.1, -0.5, 0.2, 0.9]);
        assert_eq!(abs_quantile(&v, 0.25).unwrap(), 0.9);
        assert_eq!(select_top_abs(v.data(), 0.25).unwrap().indices, vec![3]);
    }

    #[test]
    fn quantile_ties_break_by_index() {
        let sel = select_top_abs(&[0.3, 0.3, -0.3, 0.3], 0.5).unwrap();
        assert_eq!(sel.threshold, 0.3);
        assert_eq!(sel.indices, vec![0, 1]);
    }

    #[test]
    fn quantile_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v: Vec<f32> = (0..1000).map(|_| rng.random_range(-5.0..5.0)).collect();
        let sel = select_top_abs(&v, 0.01).unwrap();
        let mut sorted: Vec<usize> = (0..v.len()).collect();
        sorted.sort_by(|&a, &b| v[b].abs().partial_cmp(&v[a].abs()).unwrap());
        let mut top10 = sorted[..10].to_vec();
        top10.sort();
        assert_eq!(sel.indices, top10);
    }

    #[test]
    fn quantile_domain_errors() {
        assert!(select_top_abs(&[], 0.5).is_err());
        assert!(select_top_abs(&[1.0], 0.0).is_err());
        assert!(select_top_abs(&[1.0], 1.5).is_err());
    }

    #[test]
    fn top_count_snaps_f32_fractions() {
        assert_eq!(top_count(0.001f32 as f64, 1000), 1);
        assert_eq!(top_count(0.01f32 as f64, 1000), 10);
        assert_eq!(top_count(0.07, 100), 7);
        assert_eq!(top_count(0.01, 1001), 11);
        assert_eq!(top_count(1e-9, 10), 1);
        assert_eq!(top_count(1.0, 10), 10);
    }

    #[test]
    fn group_min_max_cases() {
        let x = t(vec![1, 3], vec![-1.0, 0.0, 1.0]);
        let g = x.groups(16).unwrap().next().unwrap();
        assert_eq!(group_min_max(&g), (-1.0, 1.0));
        let c = t(vec![1, 16], vec![0.7; 16]);
        let g = c.groups(16).unwrap().next().unwrap();
        assert_eq!(group_min_max(&g), (0.7, 0.7));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f32> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
        let r = t(vec![1, 16], vals.clone());
        let g = r.groups(16).unwrap().next().unwrap();
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for v in vals {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        assert_eq!(group_min_max(&g), (lo, hi));
    }

    #[test]
    fn groups_partition_channels() {
        let x = Tensor::zeros("x", vec![3, 37]);
        let groups: Vec<_> = x.groups(16).unwrap().collect();
        assert_eq!(groups.len(), 3 * 3);
        for ch in 0..3 {
            let total: usize = groups
                .iter()
                .filter(|g| g.channel == ch)
                .map(|g| g.len())
                .sum();
            assert_eq!(total, 37);
        }
        assert_eq!(groups[2].span, 32..37);
        assert_eq!(groups[5].flat_start(), 37 + 32);
    }
}
