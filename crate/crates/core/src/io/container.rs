//! Tensor container: `u64` little-endian header length `N`, `N` bytes of UTF-8
//! JSON mapping names to `{dtype, shape, data_offsets}`, then the raw data.
//! An optional `__metadata__` entry carries string key/value pairs.

use std::collections::BTreeMap;
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{atomic_write, read_file, ModelBundle};
use crate::error::{GwqError, Result};
use crate::tensor::{DType, Tensor};

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryHeader {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

pub fn read_container(path: &Path) -> Result<ModelBundle> {
    decode_container(&read_file(path)?)
}

pub fn write_container(bundle: &ModelBundle, path: &Path) -> Result<()> {
    atomic_write(path, &encode_container(bundle)?)
}

pub fn encode_container(bundle: &ModelBundle) -> Result<Vec<u8>> {
    let mut header = serde_json::Map::new();
    if !bundle.metadata.is_empty() {
        header.insert(
            METADATA_KEY.to_string(),
            serde_json::to_value(&bundle.metadata).expect("string map serializes"),
        );
    }
    let mut data = Vec::new();
    for (name, t) in &bundle.tensors {
        if name == METADATA_KEY {
            return Err(GwqError::Encoding(format!("`{METADATA_KEY}` is reserved")));
        }
        let begin = data.len();
        for &v in t.data() {
            match t.dtype() {
                DType::F32 => data.extend_from_slice(&v.to_le_bytes()),
                DType::F16 => data.extend_from_slice(&f16::from_f32(v).to_le_bytes()),
                DType::U8 => data.push(v as u8),
            }
        }
        let entry = EntryHeader {
            dtype: t.dtype().as_str().to_string(),
            shape: t.dims().to_vec(),
            data_offsets: [begin, data.len()],
        };
        header.insert(
            name.clone(),
            serde_json::to_value(entry).expect("entry serializes"),
        );
    }
    let mut json = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
    // Pad so the data section starts 8-byte aligned.
    while !(json.len() + 8).is_multiple_of(8) {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + json.len() + data.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<ModelBundle> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| GwqError::Format("container shorter than its 8-byte header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes);
    let header_end = 8u64
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| {
            GwqError::Format(format!(
                "header length {header_len} exceeds file size {}",
                bytes.len()
            ))
        })? as usize;
    let header: serde_json::Map<String, Value> = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| GwqError::Format(format!("invalid container header: {e}")))?;
    let data = &bytes[header_end..];

    let mut metadata = BTreeMap::new();
    let mut entries = Vec::new();
    for (name, value) in header {
        if name == METADATA_KEY {
            metadata = serde_json::from_value(value).map_err(|e| {
                GwqError::Format(format!("`{METADATA_KEY}` must map strings to strings: {e}"))
            })?;
            continue;
        }
        let entry: EntryHeader = serde_json::from_value(value)
            .map_err(|e| GwqError::parse(&name, format!("bad header entry: {e}")))?;
        entries.push((name, entry));
    }
    entries.sort_by_key(|(_, e)| e.data_offsets);

    let mut bundle = ModelBundle {
        tensors: Default::default(),
        metadata,
    };
    let mut prev_end = 0usize;
    let mut prev_name: Option<String> = None;
    for (name, entry) in entries {
        let dtype = DType::parse(&entry.dtype)
            .ok_or_else(|| GwqError::parse(&name, format!("unknown dtype `{}`", entry.dtype)))?;
        let [begin, end] = entry.data_offsets;
        if begin > end {
            return Err(GwqError::parse(&name, format!("inverted data range [{begin}, {end})")));
        }
        if end > data.len() {
            return Err(GwqError::parse(
                &name,
                format!("data range [{begin}, {end}) runs past the {} data bytes (truncated file?)", data.len()),
            ));
        }
        if begin < prev_end {
            return Err(GwqError::parse(
                &name,
                format!(
                    "data range [{begin}, {end}) overlaps tensor `{}`",
                    prev_name.as_deref().unwrap_or("?")
                ),
            ));
        }
        let numel = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| GwqError::parse(&name, "shape overflows"))?;
        if numel.checked_mul(dtype.size_in_bytes()) != Some(end - begin) {
            return Err(GwqError::parse(
                &name,
                format!(
                    "dims {:?} of {} need {} bytes, data range holds {}",
                    entry.shape,
                    dtype.as_str(),
                    numel.saturating_mul(dtype.size_in_bytes()),
                    end - begin
                ),
            ));
        }
        let raw = &data[begin..end];
        let values: Vec<f32> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            DType::F16 => raw
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            DType::U8 => raw.iter().map(|&b| b as f32).collect(),
        };
        let tensor = Tensor::with_dtype(name.clone(), entry.shape, dtype, values)
            .map_err(|e| GwqError::parse(&name, e.to_string()))?;
        if bundle.tensors.contains_key(&name) {
            return Err(GwqError::parse(&name, "duplicate tensor name"));
        }
        bundle.insert(tensor);
        prev_end = end;
        prev_name = Some(name);
    }
    Ok(bundle)
}
