use half::f16;

use super::config::{max_code, QuantConfig, QuantOptions, StatsMode};
use super::group::{dequantize_value, quantize_value, scale_zero_from_range, ScaleZero};
use super::pack::{pack_codes, packed_len, CodeReader};
use crate::error::{GwqError, Result};
use crate::tensor::{group_spans, groups_per_channel, min_max, Tensor};

/// A 2-D weight in packed mixed-precision form.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    name: String,
    rows: usize,
    cols: usize,
    bits: u8,
    group_size: usize,
    scales: Vec<f16>,
    zeros: Vec<f16>,
    codes: Vec<u8>,
    outlier_indices: Vec<u32>,
    outlier_values: Vec<f16>,
}

impl QuantizedTensor {
    /// Assembles a tensor from stored parts, checking every structural invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        name: String,
        dims: [usize; 2],
        bits: u8,
        group_size: usize,
        scales: Vec<f16>,
        zeros: Vec<f16>,
        codes: Vec<u8>,
        outlier_indices: Vec<u32>,
        outlier_values: Vec<f16>,
    ) -> Result<Self> {
        let [rows, cols] = dims;
        let bad = |detail: String| GwqError::parse(name.clone(), detail);
        if rows == 0 || cols == 0 || group_size == 0 {
            return Err(bad(format!("degenerate layout {rows}x{cols}, group {group_size}")));
        }
        let groups = rows * groups_per_channel(cols, group_size);
        if scales.len() != groups || zeros.len() != groups {
            return Err(bad(format!(
                "expected {groups} scales/zeros, got {}/{}",
                scales.len(),
                zeros.len()
            )));
        }
        if let Some(g) = scales.iter().position(|s| s.is_nan() || s.to_f32() < 0.0 || s.is_infinite()) {
            return Err(bad(format!("scale of group {g} is negative or non-finite")));
        }
        if let Some(g) = zeros.iter().position(|z| !z.is_finite()) {
            return Err(bad(format!("zero point of group {g} is non-finite")));
        }
        let numel = rows * cols;
        if codes.len() != packed_len(numel, bits) {
            return Err(bad(format!(
                "expected {} packed code bytes, got {}",
                packed_len(numel, bits),
                codes.len()
            )));
        }
        if outlier_indices.len() != outlier_values.len() {
            return Err(bad("outlier index/value counts differ".into()));
        }
        if outlier_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("outlier indices are not strictly increasing".into()));
        }
        if outlier_indices.last().is_some_and(|&i| i as usize >= numel) {
            return Err(bad("outlier index out of range".into()));
        }
        if let Some(i) = outlier_values.iter().position(|v| !v.is_finite()) {
            return Err(bad(format!("outlier value {i} is non-finite")));
        }
        Ok(QuantizedTensor {
            name,
            rows,
            cols,
            bits,
            group_size,
            scales,
            zeros,
            codes,
            outlier_indices,
            outlier_values,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn groups_per_row(&self) -> usize {
        groups_per_channel(self.cols, self.group_size)
    }

    pub fn group_count(&self) -> usize {
        self.scales.len()
    }

    pub fn scales(&self) -> &[f16] {
        &self.scales
    }

    pub fn zeros(&self) -> &[f16] {
        &self.zeros
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn code_reader(&self) -> CodeReader<'_> {
        CodeReader::new(&self.codes, self.bits)
    }

    pub fn outlier_indices(&self) -> &[u32] {
        &self.outlier_indices
    }

    pub fn outlier_values(&self) -> &[f16] {
        &self.outlier_values
    }

    pub fn outlier_count(&self) -> usize {
        self.outlier_indices.len()
    }

    /// Scale and zero point of group `g` (row-major over channels) as `f32`.
    #[inline]
    pub fn group_params(&self, g: usize) -> ScaleZero {
        ScaleZero {
            scale: self.scales[g].to_f32(),
            zero: self.zeros[g].to_f32(),
        }
    }

    /// Payload bytes: codes, scales, zeros, outlier indices and values.
    pub fn payload_bytes(&self) -> usize {
        self.codes.len() + 4 * self.scales.len() + 6 * self.outlier_indices.len()
    }
}

/// Scale/zero actually stored for a group: float16-rounded, falling back to
/// the constant-group rule when the rounded pair is unusable (scale
/// underflows to zero or the zero point overflows float16).
fn storable_params(lo: f32, hi: f32, bits: u8, opts: &QuantOptions) -> (f16, f16) {
    let ScaleZero { scale, zero } = scale_zero_from_range(lo, hi, bits, opts.scale_mode);
    let (s16, z16) = (f16::from_f32(scale), f16::from_f32(zero));
    if s16.to_f32() > 0.0 && s16.is_finite() && z16.is_finite() {
        (s16, z16)
    } else {
        (f16::ONE, f16::from_f32(-lo))
    }
}

/// Quantize one 2-D weight. `mask[i]` marks flat index `i` as an FP16 outlier.
///
/// Group statistics ignore outliers under [`StatsMode::ExcludeOutliers`]; a
/// group whose elements are all outliers stores `s = 1, z = 0`. Every
/// element, outlier or not, still receives a code.
pub fn quantize_tensor(
    w: &Tensor,
    mask: &[bool],
    cfg: &QuantConfig,
    opts: &QuantOptions,
) -> Result<QuantizedTensor> {
    cfg.validate()?;
    let (rows, cols) = w.matrix_dims()?;
    if mask.len() != w.numel() {
        return Err(GwqError::Dimension(format!(
            "mask of {} elements for tensor `{}` with {}",
            mask.len(),
            w.name(),
            w.numel()
        )));
    }
    let bits = cfg.bits;
    let group_size = cfg.effective_group(cols);
    let groups = rows * groups_per_channel(cols, group_size);
    let mut scales = Vec::with_capacity(groups);
    let mut zeros = Vec::with_capacity(groups);
    let mut codes = Vec::with_capacity(w.numel());
    for r in 0..rows {
        let row = w.row(r);
        let row_mask = &mask[r * cols..(r + 1) * cols];
        for span in group_spans(cols, group_size) {
            let vals = &row[span.clone()];
            let flags = &row_mask[span];
            let stats = vals
                .iter()
                .zip(flags)
                .filter(|(_, &m)| !(m && opts.stats == StatsMode::ExcludeOutliers))
                .map(|(&v, _)| v);
            let all_outliers = flags.iter().all(|&m| m);
            let (s16, z16) = match min_max(stats) {
                Some((lo, hi)) if !all_outliers => storable_params(lo, hi, bits, opts),
                _ => (f16::ONE, f16::ZERO),
            };
            let (s, z) = (s16.to_f32(), z16.to_f32());
            for &v in vals {
                codes.push(if all_outliers {
                    0
                } else {
                    quantize_value(v, s, z, bits).0
                });
            }
            scales.push(s16);
            zeros.push(z16);
        }
    }
    let (outlier_indices, outlier_values): (Vec<u32>, Vec<f16>) = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| (i as u32, f16::from_f32(w.data()[i])))
        .unzip();
    if let Some(i) = outlier_values.iter().position(|v| !v.is_finite()) {
        return Err(GwqError::Domain(format!(
            "outlier {} of `{}` overflows float16",
            outlier_indices[i],
            w.name()
        )));
    }
    QuantizedTensor::from_parts(
        w.name().to_string(),
        [rows, cols],
        bits,
        group_size,
        scales,
        zeros,
        pack_codes(&codes, bits)?,
        outlier_indices,
        outlier_values,
    )
    .map_err(|e| GwqError::Invariant(e.to_string()))
}

/// Dense `f32` reconstruction: `s * (q - z)` per element, then stored outlier
/// values scattered over their slots.
pub fn dequantize_tensor(qt: &QuantizedTensor) -> Tensor {
    let reader = qt.code_reader();
    let gpr = qt.groups_per_row();
    let mut data = Vec::with_capacity(qt.numel());
    for r in 0..qt.rows {
        for (gi, span) in group_spans(qt.cols, qt.group_size).enumerate() {
            let ScaleZero { scale, zero } = qt.group_params(r * gpr + gi);
            let base = r * qt.cols;
            for c in span {
                data.push(dequantize_value(reader.get(base + c), scale, zero));
            }
        }
    }
    for (&i, v) in qt.outlier_indices.iter().zip(&qt.outlier_values) {
        data[i as usize] = v.to_f32();
    }
    Tensor::new(qt.name.clone(), vec![qt.rows, qt.cols], data)
        .expect("stored parameters are finite")
}

/// Number of non-outlier elements of `original` whose code was clamped.
pub fn clamp_count(qt: &QuantizedTensor, original: &Tensor) -> Result<usize> {
    if original.dims() != qt.dims() {
        return Err(GwqError::Dimension(format!(
            "`{}` dims {:?} differ from quantized {:?}",
            original.name(),
            original.dims(),
            qt.dims()
        )));
    }
    let gpr = qt.groups_per_row();
    let mut outliers = qt.outlier_indices.iter().peekable();
    let mut count = 0;
    let top = max_code(qt.bits) as f32;
    for r in 0..qt.rows {
        for (gi, span) in group_spans(qt.cols, qt.group_size).enumerate() {
            let ScaleZero { scale, zero } = qt.group_params(r * gpr + gi);
            for c in span {
                let flat = r * qt.cols + c;
                if outliers.peek().is_some_and(|&&i| i as usize == flat) {
                    outliers.next();
                    continue;
                }
                let raw = (original.data()[flat] / scale + zero).round();
                if !(0.0..=top).contains(&raw) {
                    count += 1;
                }
            }
        }
    }
    Ok(count)
}
