//! Reading and writing weight collections.
//!
//! Two formats live here: the tensor container (an 8-byte header length, a
//! JSON header and raw little-endian data, interoperable with the common
//! `safetensors` layout) and the packed mixed-precision `GWQ1` format.

mod bundle;
pub mod container;
pub mod gwq_format;

use std::io::Write;
use std::path::Path;

pub use bundle::{read_gradients, write_gradients, GradientBundle, ModelBundle, GRAD_SUFFIX};
pub use container::{decode_container, encode_container, read_container, write_container};
pub use gwq_format::{decode_gwq, encode_gwq, read_gwq, write_gwq, GwqLayout};

use crate::error::{GwqError, Result};

/// Write `bytes` to a temporary sibling of `path` and rename it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| GwqError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| GwqError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| GwqError::io(path, e))?;
    tmp.persist(path).map_err(|e| GwqError::io(path, e.error))?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| GwqError::io(path, e))
}
