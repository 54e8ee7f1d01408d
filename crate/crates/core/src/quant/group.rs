use super::config::{max_code, ScaleMode};
use crate::tensor::min_max;

/// Affine parameters of one group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleZero {
    pub scale: f32,
    pub zero: f32,
}

/// `s = (max - min) / levels`, `z = -min / s`.
///
/// A constant group (`max == min`) gets `s = 1, z = -min`, so every element
/// maps to code 0 and dequantizes back to `min`.
pub fn compute_scale_zero(values: &[f32], bits: u8, mode: ScaleMode) -> ScaleZero {
    let (lo, hi) = min_max(values.iter().copied()).expect("group must be non-empty");
    scale_zero_from_range(lo, hi, bits, mode)
}

pub(crate) fn scale_zero_from_range(lo: f32, hi: f32, bits: u8, mode: ScaleMode) -> ScaleZero {
    if hi == lo {
        return ScaleZero {
            scale: 1.0,
            zero: -lo,
        };
    }
    let scale = (hi - lo) / mode.levels(bits);
    ScaleZero {
        scale,
        zero: -lo / scale,
    }
}

/// `clamp(round(v / s + z), 0, 2^b - 1)` with half-away-from-zero rounding.
/// The second value reports whether clamping changed the code.
#[inline]
pub fn quantize_value(v: f32, s: f32, z: f32, bits: u8) -> (u8, bool) {
    let raw = (v / s + z).round();
    let top = max_code(bits) as f32;
    if raw < 0.0 {
        (0, true)
    } else if raw > top {
        (top as u8, true)
    } else {
        (raw as u8, false)
    }
}

pub fn quantize_group(values: &[f32], s: f32, z: f32, bits: u8) -> Vec<u8> {
    values
        .iter()
        .map(|&v| quantize_value(v, s, z, bits).0)
        .collect()
}

/// `s * (q - z)`.
#[inline]
pub fn dequantize_value(q: u8, s: f32, z: f32) -> f32 {
    s * (q as f32 - z)
}

pub fn dequantize_group(codes: &[u8], s: f32, z: f32) -> Vec<f32> {
    codes.iter().map(|&q| dequantize_value(q, s, z)).collect()
}
