use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use indexmap::IndexMap;
use rayon::prelude::*;

use super::config::{QuantConfig, QuantOptions};
use super::qtensor::{clamp_count, dequantize_tensor, quantize_tensor, QuantizedTensor};
use crate::error::{GwqError, Result};
use crate::io::ModelBundle;
use crate::sensitivity::OutlierMask;
use crate::tensor::{DType, Tensor};

/// A whole model after quantization: packed projections plus FP16 passthrough
/// tensors and the source metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub config: QuantConfig,
    pub quantized: IndexMap<String, QuantizedTensor>,
    pub passthrough: IndexMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl QuantizedModel {
    pub fn empty(config: QuantConfig) -> Self {
        QuantizedModel {
            config,
            quantized: IndexMap::new(),
            passthrough: IndexMap::new(),
            metadata: BTreeMap::new(),
        }
    }

    /// Dense reconstruction usable wherever a [`ModelBundle`] is expected.
    pub fn to_bundle(&self) -> ModelBundle {
        let mut out = ModelBundle::new();
        for qt in self.quantized.values() {
            out.insert(dequantize_tensor(qt));
        }
        for t in self.passthrough.values() {
            out.insert(t.clone());
        }
        out.metadata = self.metadata.clone();
        out
    }

    pub fn quantized_elements(&self) -> usize {
        self.quantized.values().map(QuantizedTensor::numel).sum()
    }

    pub fn passthrough_elements(&self) -> usize {
        self.passthrough.values().map(Tensor::numel).sum()
    }
}

/// Quantize every tensor of `weights` selected by `opts.quantize_set`; the
/// rest are stored at FP16. `mask` supplies the outliers of each quantized
/// tensor; `None` means no outliers.
pub fn quantize_model(
    weights: &ModelBundle,
    mask: Option<&OutlierMask>,
    cfg: &QuantConfig,
    opts: &QuantOptions,
) -> Result<QuantizedModel> {
    cfg.validate()?;
    let selected: Vec<&Tensor> = weights
        .tensors
        .values()
        .filter(|t| opts.quantize_set.contains(t))
        .collect();
    if let Some(m) = mask {
        for name in m.masks.keys() {
            if !selected.iter().any(|t| t.name() == name) {
                return Err(GwqError::Alignment(format!(
                    "mask covers `{name}`, which is not a quantized tensor"
                )));
            }
        }
    }
    let quantized: Vec<QuantizedTensor> = selected
        .par_iter()
        .map(|t| {
            let flags = match mask {
                None => vec![false; t.numel()],
                Some(m) => {
                    let tm = m.get(t.name()).ok_or_else(|| {
                        GwqError::Alignment(format!("mask has no entry for `{}`", t.name()))
                    })?;
                    if tm.dims != t.dims() {
                        return Err(GwqError::Alignment(format!(
                            "mask for `{}` has dims {:?}, weight has {:?}",
                            t.name(),
                            tm.dims,
                            t.dims()
                        )));
                    }
                    tm.flags.clone()
                }
            };
            quantize_tensor(t, &flags, cfg, opts)
        })
        .collect::<Result<_>>()?;
    let mut model = QuantizedModel::empty(*cfg);
    model.metadata = weights.metadata.clone();
    for qt in quantized {
        model.quantized.insert(qt.name().to_string(), qt);
    }
    for t in weights.tensors.values() {
        if !model.quantized.contains_key(t.name()) {
            model.passthrough.insert(t.name().to_string(), t.cast(DType::F16)?);
        }
    }
    Ok(model)
}

/// Which payload components count towards the average.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccountingOptions {
    pub include_stats: bool,
    pub include_outliers: bool,
}

impl Default for AccountingOptions {
    fn default() -> Self {
        AccountingOptions {
            include_stats: true,
            include_outliers: true,
        }
    }
}

/// Bit budget of the quantized tensors of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct BitsReport {
    /// Packed code bits, including the zero padding of each tensor's last byte.
    pub code_bits: u64,
    pub scale_bits: u64,
    pub zero_bits: u64,
    pub outlier_index_bits: u64,
    pub outlier_value_bits: u64,
    pub quantized_elements: u64,
    pub options: AccountingOptions,
}

impl BitsReport {
    pub fn payload_bits(&self) -> u64 {
        let mut total = self.code_bits;
        if self.options.include_stats {
            total += self.scale_bits + self.zero_bits;
        }
        if self.options.include_outliers {
            total += self.outlier_index_bits + self.outlier_value_bits;
        }
        total
    }

    pub fn average(&self) -> f64 {
        if self.quantized_elements == 0 {
            return 0.0;
        }
        self.payload_bits() as f64 / self.quantized_elements as f64
    }

    pub fn included(&self) -> Vec<&'static str> {
        let mut parts = vec!["codes"];
        if self.options.include_stats {
            parts.extend(["scales(f16)", "zeros(f16)"]);
        }
        if self.options.include_outliers {
            parts.extend(["outlier_indices(u32)", "outlier_values(f16)"]);
        }
        parts
    }
}

impl fmt::Display for BitsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "avg_bits={:.4} payload_bits={} quantized_elements={} includes=[{}] excludes=[passthrough tensors]",
            self.average(),
            self.payload_bits(),
            self.quantized_elements,
            self.included().join(",")
        )
    }
}

pub fn average_bits(model: &QuantizedModel) -> BitsReport {
    average_bits_with(model, AccountingOptions::default())
}

pub fn average_bits_with(model: &QuantizedModel, options: AccountingOptions) -> BitsReport {
    let mut r = BitsReport {
        code_bits: 0,
        scale_bits: 0,
        zero_bits: 0,
        outlier_index_bits: 0,
        outlier_value_bits: 0,
        quantized_elements: 0,
        options,
    };
    for qt in model.quantized.values() {
        r.code_bits += 8 * qt.packed_codes().len() as u64;
        r.scale_bits += 16 * qt.group_count() as u64;
        r.zero_bits += 16 * qt.group_count() as u64;
        r.outlier_index_bits += 32 * qt.outlier_count() as u64;
        r.outlier_value_bits += 16 * qt.outlier_count() as u64;
        r.quantized_elements += qt.numel() as u64;
    }
    r
}

/// One line per tensor: name, dims, groups, clamp rate, outliers and bit contribution.
///
/// The clamp rate needs the original weights; without them it prints `-`.
pub fn inspect(model: &QuantizedModel, originals: Option<&ModelBundle>) -> Result<String> {
    let mut out = String::new();
    let total_elems = model.quantized_elements().max(1) as f64;
    for qt in model.quantized.values() {
        let [r, c] = qt.dims();
        let clamp = match originals.and_then(|b| b.get(qt.name())) {
            Some(orig) => {
                let n = clamp_count(qt, orig)?;
                let eligible = (qt.numel() - qt.outlier_count()).max(1);
                format!("{:.6}", n as f64 / eligible as f64)
            }
            None => "-".to_string(),
        };
        let bits = 8 * qt.payload_bytes();
        writeln!(
            out,
            "{} dims={r}x{c} groups={} clamp_rate={clamp} outliers={} bits_per_weight={:.4} avg_bits_contribution={:.4}",
            qt.name(),
            qt.group_count(),
            qt.outlier_count(),
            bits as f64 / qt.numel() as f64,
            bits as f64 / total_elems,
        )
        .expect("writing to a String");
    }
    for t in model.passthrough.values() {
        writeln!(out, "{} dims={:?} passthrough=f16", t.name(), t.dims()).expect("writing to a String");
    }
    writeln!(out, "{}", average_bits(model)).expect("writing to a String");
    Ok(out)
}
