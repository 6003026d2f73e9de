//! SLMC checkpoint container plus a JSON sidecar.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"SLMC" | u32 version | u32 element width (4 or 8) | u32 record count
//! per record: u32 name length | UTF-8 name | u32 rank | rank × u32 dims | payload
//! ```
//!
//! The sidecar lives next to the container as `<file>.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SLMC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub type NamedTensors<E> = Vec<(String, Tensor<E>)>;

/// Sidecar metadata. `model` carries whatever the loader needs to rebuild the
/// object (an LM config, a projector config, …).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: String,
    pub step: u64,
    pub val_loss: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default)]
    pub model: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_checkpoint<E: Element>(named: &[(String, &Tensor<E>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(E::DTYPE.byte_width() as u32).to_le_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    out
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.at as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(self.fail(format!(
                "truncated {what}: need {n} bytes, {} remain",
                self.bytes.len() - self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Decodes a container, widening or narrowing to `E` when the stored element
/// width differs.
pub fn decode_checkpoint<E: Element>(path: &Path, bytes: &[u8]) -> Result<NamedTensors<E>> {
    let mut c = Cursor { path, bytes, at: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        c.at = 0;
        return Err(c.fail("bad magic"));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        c.at = 4;
        return Err(c.fail(format!("unsupported version {version}")));
    }
    let width = c.u32("element width")?;
    let dtype =
        DType::from_byte_width(width).ok_or_else(|| c.fail(format!("element width {width}")))?;
    let width = width as usize;
    let count = c.u32("record count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let n = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(n, "name")?)
            .map_err(|_| c.fail("name is not UTF-8"))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("dims")? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = c.take(len * width, "payload")?;
        let data: Vec<E> = match dtype {
            DType::F64 => raw
                .chunks_exact(8)
                .map(|b| E::of(f64::read_le(b).as_f64()))
                .collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|b| E::of(f32::read_le(b).as_f64()))
                .collect(),
        };
        out.push((name, Tensor::new(shape, data)?));
    }
    if c.at != bytes.len() {
        return Err(c.fail(format!("{} trailing bytes", bytes.len() - c.at)));
    }
    Ok(out)
}

pub fn write_checkpoint<E: Element>(
    path: &Path,
    named: &[(String, &Tensor<E>)],
    meta: &CheckpointMeta,
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_checkpoint(named)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(meta).map_err(|e| Error::json(&side, e))?;
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn read_checkpoint<E: Element>(path: &Path) -> Result<(NamedTensors<E>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let named = decode_checkpoint(path, &bytes)?;
    Ok((named, read_meta(path)?))
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&side, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Borrowed view for [`encode_checkpoint`] from owned pairs.
pub fn borrow_named<E: Element>(named: &[(String, Tensor<E>)]) -> Vec<(String, &Tensor<E>)> {
    named.iter().map(|(n, t)| (n.clone(), t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            kind: "test".into(),
            step: 3,
            val_loss: Some(0.5),
            config_hash: "abc".into(),
            seed: 7,
            model: serde_json::Value::Null,
        }
    }

    #[test]
    fn roundtrip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.slmc");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::scalar(2.5);
        write_checkpoint(&p, &[("a".into(), &a), ("b".into(), &b)], &meta()).unwrap();
        let (named, m) = read_checkpoint::<f64>(&p).unwrap();
        assert_eq!(
            named,
            vec![("a".to_string(), a.clone()), ("b".to_string(), b)]
        );
        assert_eq!(m, meta());
        let narrow: NamedTensors<f32> = decode_checkpoint(&p, &std::fs::read(&p).unwrap()).unwrap();
        assert_eq!(narrow[0].1.shape(), &[3, 4]);
    }

    #[test]
    fn truncation_reports_offset() {
        let t = Tensor::<f64>::ones(&[2]);
        let bytes = encode_checkpoint(&[("x".into(), &t)]);
        let err = decode_checkpoint::<f64>(Path::new("m"), &bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset == (bytes.len() - 16) as u64));
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(decode_checkpoint::<f64>(Path::new("m"), &bad).is_err());
    }

    #[test]
    fn identical_content_identical_hash() {
        let t = Tensor::<f64>::ones(&[2]);
        let a = encode_checkpoint(&[("x".into(), &t)]);
        let b = encode_checkpoint(&[("x".into(), &t.clone())]);
        assert_eq!(sha256_hex(&a), sha256_hex(&b));
    }
}
