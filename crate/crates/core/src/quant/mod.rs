//! Group-wise asymmetric round-to-nearest quantization with an FP16 outlier
//! store.
//!
//! Each 2-D weight is split per output channel into groups of `group_size`
//! consecutive input columns. A group gets one scale and one zero point
//! (both kept as float16); every element gets a `bits`-wide code, and
//! elements flagged by the outlier mask are additionally stored verbatim at
//! float16 and override their code on dequantization.

mod config;
mod group;
mod model;
mod pack;
mod qtensor;

pub use config::{QuantConfig, QuantOptions, QuantizeSet, ScaleMode, StatsMode, SUPPORTED_BITS};
pub use group::{
    compute_scale_zero, dequantize_group, dequantize_value, quantize_group, quantize_value,
    ScaleZero,
};
pub use model::{
    average_bits, average_bits_with, inspect, quantize_model, AccountingOptions, BitsReport,
    QuantizedModel,
};
pub use pack::{pack_codes, packed_len, unpack_codes, CodeReader};
pub use qtensor::{clamp_count, dequantize_tensor, quantize_tensor, QuantizedTensor};
