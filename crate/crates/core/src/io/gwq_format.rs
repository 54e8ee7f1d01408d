//! The packed `GWQ1` file format. All integers are little-endian.
//!
//! ```text
//! magic "GWQ1" | version u32
//! bits u8 | group_size u16 | outlier_fraction f32 | per_layer u8
//! tensor count u32, then per quantized tensor:
//!   name (u16 len + UTF-8) | rank u8 + u32 dims | group count u32
//!   scales f16 x G | zeros f16 x G | packed codes (LSB-first, zero-padded)
//!   outlier count u32 | indices u32 x n (strictly increasing) | values f16 x n
//!   CRC32 of the record
//! passthrough count u32, then per tensor:
//!   name | rank + dims | values f16 x numel | CRC32 of the record
//! metadata count u32, then per entry: key (u16 len + UTF-8) | value (u32 len + UTF-8)
//! CRC32 of the metadata block
//! ```
//!
//! A `group_size` of 0 means one group per channel.

use std::collections::BTreeMap;
use std::path::Path;

use half::f16;

use super::{atomic_write, read_file};
use crate::error::{GwqError, Result};
use crate::quant::{packed_len, QuantConfig, QuantizedModel, QuantizedTensor};
use crate::sensitivity::Scope;
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"GWQ1";
pub const VERSION: u32 = 1;

/// Byte accounting of an encoded file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GwqLayout {
    pub total_bytes: usize,
    /// Codes, scales, zeros, outlier indices and values of quantized tensors.
    pub payload_bytes: usize,
    /// FP16 data of passthrough tensors.
    pub passthrough_bytes: usize,
    /// Everything else: header, names, dims, counts, CRCs, metadata.
    pub overhead_bytes: usize,
}

pub fn write_gwq(model: &QuantizedModel, path: &Path) -> Result<()> {
    atomic_write(path, &encode_gwq(model)?.0)
}

pub fn read_gwq(path: &Path) -> Result<QuantizedModel> {
    decode_gwq(&read_file(path)?)
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    let len = u16::try_from(name.len())
        .map_err(|_| GwqError::Encoding(format!("name `{name}` longer than 65535 bytes")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

fn put_dims(out: &mut Vec<u8>, name: &str, dims: &[usize]) -> Result<()> {
    let rank = u8::try_from(dims.len())
        .map_err(|_| GwqError::Encoding(format!("`{name}` has too many dims")))?;
    out.push(rank);
    for &d in dims {
        let d = u32::try_from(d)
            .map_err(|_| GwqError::Encoding(format!("`{name}` dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

fn put_f16s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f16>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| GwqError::Encoding(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn seal(out: &mut Vec<u8>, start: usize) {
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
}

pub fn encode_gwq(model: &QuantizedModel) -> Result<(Vec<u8>, GwqLayout)> {
    let cfg = &model.config;
    cfg.validate()?;
    let mut out = Vec::new();
    let mut layout = GwqLayout::default();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(cfg.bits);
    out.extend_from_slice(&cfg.group_size.to_le_bytes());
    out.extend_from_slice(&cfg.outlier_fraction.to_le_bytes());
    out.push((cfg.scope == Scope::PerLayer) as u8);
    put_u32(&mut out, model.quantized.len(), "tensor count")?;

    for (name, qt) in &model.quantized {
        if name != qt.name() {
            return Err(GwqError::Encoding(format!("key `{name}` names tensor `{}`", qt.name())));
        }
        let [_, cols] = qt.dims();
        if qt.bits() != cfg.bits || qt.group_size() != cfg.effective_group(cols) {
            return Err(GwqError::Encoding(format!(
                "`{name}` was quantized with {} bits / group {}, header says {} / {}",
                qt.bits(),
                qt.group_size(),
                cfg.bits,
                cfg.effective_group(cols)
            )));
        }
        let start = out.len();
        put_name(&mut out, name)?;
        put_dims(&mut out, name, &qt.dims())?;
        put_u32(&mut out, qt.group_count(), "group count")?;
        put_f16s(&mut out, qt.scales().iter().copied());
        put_f16s(&mut out, qt.zeros().iter().copied());
        out.extend_from_slice(qt.packed_codes());
        put_u32(&mut out, qt.outlier_count(), "outlier count")?;
        for &i in qt.outlier_indices() {
            out.extend_from_slice(&i.to_le_bytes());
        }
        put_f16s(&mut out, qt.outlier_values().iter().copied());
        seal(&mut out, start);
        layout.payload_bytes += qt.payload_bytes();
    }

    put_u32(&mut out, model.passthrough.len(), "passthrough count")?;
    for (name, t) in &model.passthrough {
        let start = out.len();
        put_name(&mut out, name)?;
        put_dims(&mut out, name, t.dims())?;
        put_f16s(&mut out, t.data().iter().map(|&v| f16::from_f32(v)));
        seal(&mut out, start);
        layout.passthrough_bytes += 2 * t.numel();
    }

    let start = out.len();
    put_u32(&mut out, model.metadata.len(), "metadata count")?;
    for (k, v) in &model.metadata {
        put_name(&mut out, k)?;
        put_u32(&mut out, v.len(), "metadata value length")?;
        out.extend_from_slice(v.as_bytes());
    }
    seal(&mut out, start);

    layout.total_bytes = out.len();
    layout.overhead_bytes = layout.total_bytes - layout.payload_bytes - layout.passthrough_bytes;
    Ok((out, layout))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                GwqError::Format(format!(
                    "truncated file: {what} needs {n} bytes at offset {}, {} remain",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_bits(self.u32(what)?))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16("name length")? as usize;
        let raw = self.take(len, "name")?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| GwqError::Format("name is not valid UTF-8".into()))
    }

    fn dims(&mut self, name: &str) -> Result<Vec<usize>> {
        let rank = self.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32("dim")? as usize);
        }
        if dims.contains(&0) {
            return Err(GwqError::parse(name, format!("zero-sized dims {dims:?}")));
        }
        Ok(dims)
    }

    fn f16s(&mut self, n: usize, what: &str) -> Result<Vec<f16>> {
        let bytes = n
            .checked_mul(2)
            .ok_or_else(|| GwqError::Format(format!("{what} count overflows")))?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]))
            .collect())
    }

    fn check_crc(&mut self, start: usize, what: &str) -> Result<()> {
        let computed = crc32fast::hash(&self.bytes[start..self.pos]);
        let stored = self.u32("CRC32")?;
        if computed != stored {
            return Err(GwqError::Format(format!(
                "CRC mismatch in {what}: stored {stored:08x}, computed {computed:08x}"
            )));
        }
        Ok(())
    }
}

pub fn decode_gwq(bytes: &[u8]) -> Result<QuantizedModel> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(GwqError::Format(format!("bad magic {magic:02x?}, expected \"GWQ1\"")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(GwqError::Format(format!(
            "unsupported format version {version} (this build reads {VERSION})"
        )));
    }
    let bits = r.u8("bits")?;
    let group_size = r.u16("group size")?;
    let outlier_fraction = r.f32("outlier fraction")?;
    let scope = match r.u8("scope flag")? {
        1 => Scope::PerLayer,
        0 => Scope::Global,
        other => return Err(GwqError::Format(format!("bad scope flag {other}"))),
    };
    let config = QuantConfig {
        bits,
        group_size,
        outlier_fraction,
        scope,
    };
    config
        .validate()
        .map_err(|e| GwqError::Format(format!("header: {e}")))?;
    let mut model = QuantizedModel::empty(config);

    let count = r.u32("tensor count")?;
    for _ in 0..count {
        let start = r.pos;
        let name = r.name()?;
        let in_record = |e: GwqError| match e {
            GwqError::Format(d) => GwqError::parse(&name, d),
            other => other,
        };
        let dims = r.dims(&name)?;
        let [rows, cols] = <[usize; 2]>::try_from(dims.as_slice())
            .map_err(|_| GwqError::parse(&name, format!("quantized tensor must be 2-D, got {dims:?}")))?;
        let groups = r.u32("group count").map_err(in_record)? as usize;
        let scales = r.f16s(groups, "scales").map_err(in_record)?;
        let zeros = r.f16s(groups, "zeros").map_err(in_record)?;
        let numel = rows
            .checked_mul(cols)
            .ok_or_else(|| GwqError::parse(&name, "element count overflows"))?;
        let codes = r.take(packed_len(numel, bits), "codes").map_err(in_record)?.to_vec();
        let n_out = r.u32("outlier count").map_err(in_record)? as usize;
        let idx_bytes = r
            .take(n_out.saturating_mul(4), "outlier indices")
            .map_err(in_record)?;
        let indices = idx_bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let values = r.f16s(n_out, "outlier values").map_err(in_record)?;
        r.check_crc(start, &format!("tensor `{name}`")).map_err(in_record)?;
        let qt = QuantizedTensor::from_parts(
            name.clone(),
            [rows, cols],
            bits,
            config.effective_group(cols),
            scales,
            zeros,
            codes,
            indices,
            values,
        )?;
        if model.quantized.insert(name.clone(), qt).is_some() {
            return Err(GwqError::parse(&name, "duplicate tensor name"));
        }
    }

    let count = r.u32("passthrough count")?;
    for _ in 0..count {
        let start = r.pos;
        let name = r.name()?;
        let dims = r.dims(&name)?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| GwqError::parse(&name, "element count overflows"))?;
        let values = r
            .f16s(numel, "passthrough values")
            .map_err(|e| GwqError::parse(&name, e.to_string()))?;
        r.check_crc(start, &format!("tensor `{name}`"))
            .map_err(|e| GwqError::parse(&name, e.to_string()))?;
        let t = Tensor::with_dtype(
            name.clone(),
            dims,
            DType::F16,
            values.iter().map(|v| v.to_f32()).collect(),
        )
        .map_err(|e| GwqError::parse(&name, e.to_string()))?;
        if model.quantized.contains_key(&name)
            || model.passthrough.insert(name.clone(), t).is_some()
        {
            return Err(GwqError::parse(&name, "duplicate tensor name"));
        }
    }

    let start = r.pos;
    let count = r.u32("metadata count")?;
    let mut metadata = BTreeMap::new();
    for _ in 0..count {
        let key = r.name()?;
        let len = r.u32("metadata value length")? as usize;
        let value = String::from_utf8(r.take(len, "metadata value")?.to_vec())
            .map_err(|_| GwqError::Format(format!("metadata `{key}` is not UTF-8")))?;
        metadata.insert(key, value);
    }
    r.check_crc(start, "metadata")?;
    model.metadata = metadata;

    if r.pos != bytes.len() {
        return Err(GwqError::Format(format!(
            "{} trailing bytes after metadata",
            bytes.len() - r.pos
        )));
    }
    Ok(model)
}
