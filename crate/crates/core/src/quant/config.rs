use crate::error::{GwqError, Result};
use crate::sensitivity::Scope;
use crate::tensor::Tensor;

pub const SUPPORTED_BITS: [u8; 4] = [2, 3, 4, 8];

/// Parameters that travel with a quantized model in its file header.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    pub bits: u8,
    /// Columns per group; `0` means one group spanning the whole channel.
    pub group_size: u16,
    pub outlier_fraction: f32,
    pub scope: Scope,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            bits: 4,
            group_size: 16,
            outlier_fraction: 0.01,
            scope: Scope::PerLayer,
        }
    }
}

impl QuantConfig {
    pub fn new(bits: u8, group_size: u16, outlier_fraction: f32) -> Result<Self> {
        let cfg = QuantConfig {
            bits,
            group_size,
            outlier_fraction,
            scope: Scope::PerLayer,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_scope(mut self, scope: Scope) -> Self {
        self.scope = scope;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_BITS.contains(&self.bits) {
            return Err(GwqError::Config(format!(
                "unsupported bit width {} (expected one of {SUPPORTED_BITS:?})",
                self.bits
            )));
        }
        if !(self.outlier_fraction >= 0.0 && self.outlier_fraction <= 1.0) {
            return Err(GwqError::Config(format!(
                "outlier fraction {} outside [0, 1]",
                self.outlier_fraction
            )));
        }
        Ok(())
    }

    pub fn max_code(&self) -> u8 {
        max_code(self.bits)
    }

    /// Group span actually used for a channel of `cols` columns.
    pub fn effective_group(&self, cols: usize) -> usize {
        if self.group_size == 0 {
            cols
        } else {
            self.group_size as usize
        }
    }
}

pub(crate) fn max_code(bits: u8) -> u8 {
    ((1u16 << bits) - 1) as u8
}

/// Denominator of the scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleMode {
    /// `range / 2^(b-1)`.
    #[default]
    Verbatim,
    /// `range / (2^b - 1)`, the usual full-range asymmetric grid.
    FullRange,
}

impl ScaleMode {
    pub fn levels(self, bits: u8) -> f32 {
        match self {
            ScaleMode::Verbatim => (1u32 << (bits - 1)) as f32,
            ScaleMode::FullRange => ((1u32 << bits) - 1) as f32,
        }
    }
}

/// Which elements feed a group's min/max.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StatsMode {
    #[default]
    ExcludeOutliers,
    IncludeOutliers,
}

/// Selects the tensors that get quantized; the rest pass through at FP16.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum QuantizeSet {
    /// 2-D attention and MLP projection weights (`layers.N.attn.*`, `layers.N.mlp.*`).
    #[default]
    Projections,
    /// Every 2-D tensor.
    AllMatrices,
    Names(Vec<String>),
}

impl QuantizeSet {
    pub fn contains(&self, t: &Tensor) -> bool {
        if t.rank() != 2 {
            return false;
        }
        let name = t.name();
        match self {
            QuantizeSet::Projections => {
                name.starts_with("layers.")
                    && (name.contains(".attn.") || name.contains(".mlp."))
            }
            QuantizeSet::AllMatrices => true,
            QuantizeSet::Names(names) => names.iter().any(|n| n == name),
        }
    }
}

/// Quantization-time knobs that the dequantizer never needs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuantOptions {
    pub scale_mode: ScaleMode,
    pub stats: StatsMode,
    pub quantize_set: QuantizeSet,
}
