//! LSB-first bit packing of `bits`-wide codes.
//!
//! Code `i` occupies bits `[i*b, (i+1)*b)` of the stream, where bit `p` is bit
//! `p % 8` of byte `p / 8`. The final byte is zero-padded.

use super::config::max_code;
use crate::error::{GwqError, Result};

pub fn packed_len(n: usize, bits: u8) -> usize {
    (n * bits as usize).div_ceil(8)
}

pub fn pack_codes(codes: &[u8], bits: u8) -> Result<Vec<u8>> {
    if !(1..=8).contains(&bits) {
        return Err(GwqError::Encoding(format!("cannot pack {bits}-bit codes")));
    }
    let top = max_code(bits);
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    for (i, &c) in codes.iter().enumerate() {
        if c > top {
            return Err(GwqError::Encoding(format!(
                "code {c} at position {i} does not fit in {bits} bits"
            )));
        }
        let bit = i * bits as usize;
        let (byte, off) = (bit / 8, bit % 8);
        let wide = (c as u16) << off;
        out[byte] |= wide as u8;
        if off + bits as usize > 8 {
            out[byte + 1] |= (wide >> 8) as u8;
        }
    }
    Ok(out)
}

pub fn unpack_codes(bytes: &[u8], bits: u8, n: usize) -> Result<Vec<u8>> {
    if !(1..=8).contains(&bits) {
        return Err(GwqError::Encoding(format!("cannot unpack {bits}-bit codes")));
    }
    let need = packed_len(n, bits);
    if bytes.len() < need {
        return Err(GwqError::Encoding(format!(
            "{n} codes of {bits} bits need {need} bytes, got {}",
            bytes.len()
        )));
    }
    let reader = CodeReader::new(bytes, bits);
    Ok((0..n).map(|i| reader.get(i)).collect())
}

/// Random access into a packed code stream.
#[derive(Debug, Clone, Copy)]
pub struct CodeReader<'a> {
    bytes: &'a [u8],
    bits: u8,
    mask: u16,
}

impl<'a> CodeReader<'a> {
    pub fn new(bytes: &'a [u8], bits: u8) -> Self {
        CodeReader {
            bytes,
            bits,
            mask: (1u16 << bits) - 1,
        }
    }

    #[inline]
    pub fn get(&self, i: usize) -> u8 {
        match self.bits {
            8 => self.bytes[i],
            4 => (self.bytes[i / 2] >> ((i % 2) * 4)) & 0x0f,
            2 => (self.bytes[i / 4] >> ((i % 4) * 2)) & 0x03,
            b => {
                let bit = i * b as usize;
                let (byte, off) = (bit / 8, bit % 8);
                let lo = self.bytes[byte] as u16;
                let hi = if off + b as usize > 8 {
                    (self.bytes[byte + 1] as u16) << 8
                } else {
                    0
                };
                (((lo | hi) >> off) & self.mask) as u8
            }
        }
    }

    /// Decodes codes `start..start + out.len()` into `out`.
    #[inline]
    pub fn read_into(&self, start: usize, out: &mut [u8]) {
        for (k, slot) in out.iter_mut().enumerate() {
            *slot = self.get(start + k);
        }
    }
}
