//! SLMF feature files.
//!
//! Layout (little-endian):
//!
//! ```text
//! offset 0   b"SLMF"
//! offset 4   u32 version (= 1)
//! offset 8   u32 T   (frames)
//! offset 12  u32 d   (feature dim)
//! offset 16  T·d f32, row-major
//! ```
//!
//! Values are always stored as f32; readers widen to the compute precision.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const FEATURE_MAGIC: &[u8; 4] = b"SLMF";
pub const FEATURE_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

pub fn encode_features<E: Element>(t: &Tensor<E>) -> Result<Vec<u8>> {
    let (rows, cols) = t.dims2()?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for &x in t.data() {
        out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn write_features<E: Element>(path: &Path, t: &Tensor<E>) -> Result<()> {
    let bytes = encode_features(t)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Header fields without reading the payload.
pub fn read_header(path: &Path) -> Result<(usize, usize)> {
    use std::io::Read;
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = Vec::with_capacity(HEADER_LEN);
    f.by_ref()
        .take(HEADER_LEN as u64)
        .read_to_end(&mut head)
        .map_err(|e| Error::io(path, e))?;
    parse_header(path, &head)
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<(usize, usize)> {
    let fmt = |offset: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fmt(
            bytes.len(),
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(fmt(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != FEATURE_VERSION {
        return Err(fmt(4, format!("unsupported version {version}")));
    }
    Ok((u32_at(8) as usize, u32_at(12) as usize))
}

pub fn parse_features<E: Element>(path: &Path, bytes: &[u8]) -> Result<Tensor<E>> {
    let (t, d) = parse_header(path, bytes)?;
    let expected = HEADER_LEN + 4 * t * d;
    if bytes.len() != expected {
        let (offset, what) = if bytes.len() < expected {
            (bytes.len(), "truncated payload")
        } else {
            (expected, "trailing bytes after payload")
        };
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            msg: format!(
                "{what}: header says {t}x{d} so expected length is {expected} bytes, file has {}",
                bytes.len()
            ),
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| E::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect();
    Tensor::new(vec![t, d], data)
}

pub fn read_features<E: Element>(path: &Path) -> Result<Tensor<E>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_features(path, &bytes)
}
