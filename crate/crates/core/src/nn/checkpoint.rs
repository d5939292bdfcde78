//! Single-file checkpoint format.
//!
//! ```text
//! magic        8 bytes   "FCTNCKPT"
//! version      u32 LE    1
//! manifest_len u64 LE
//! manifest     UTF-8 JSON {format_version, precision, params:[{name, shape}], metadata}
//! buffers      raw little-endian values, one per manifest entry, in manifest order
//! ```
//!
//! Manifest entries are sorted by parameter name.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 8] = b"FCTNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    precision: String,
    params: Vec<Entry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

/// Parameters plus free-form metadata (architecture, trainer state, ...).
#[derive(Clone, Debug)]
pub struct Checkpoint<T = f32> {
    pub params: ParamStore<T>,
    pub metadata: serde_json::Value,
}

pub fn encode_checkpoint<T: Element>(store: &ParamStore<T>, metadata: &serde_json::Value) -> Vec<u8> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        precision: T::TAG.to_string(),
        params: store
            .iter()
            .map(|(name, t)| Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        metadata: metadata.clone(),
    };
    let text = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(20 + text.len() + store.num_values() * T::WIDTH);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    for (_, t) in store.iter() {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn decode_checkpoint<T: Element>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let truncated = || Error::Checkpoint("truncated file".into());
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes.get(8..12).ok_or_else(truncated)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(bytes.get(12..20).ok_or_else(truncated)?.try_into().unwrap()) as usize;
    let text = bytes.get(20..20 + len).ok_or_else(truncated)?;
    let manifest: Manifest = serde_json::from_slice(text)
        .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "manifest format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.precision != T::TAG {
        return Err(Error::Checkpoint(format!(
            "checkpoint precision {} cannot be read as {}",
            manifest.precision,
            T::TAG
        )));
    }
    let mut offset = 20 + len;
    let mut store = ParamStore::new();
    for entry in manifest.params {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + n * T::WIDTH)
            .ok_or_else(truncated)?;
        let data = raw.chunks_exact(T::WIDTH).map(T::read_le).collect();
        store.insert(entry.name, Tensor::new(&entry.shape, data)?)?;
        offset += n * T::WIDTH;
    }
    if offset != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last buffer",
            bytes.len() - offset
        )));
    }
    Ok(Checkpoint {
        params: store,
        metadata: manifest.metadata,
    })
}

/// Writes atomically (temp file + rename).
pub fn save_checkpoint<T: Element>(
    store: &ParamStore<T>,
    metadata: &serde_json::Value,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(store, metadata);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Element>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("z.bias", Tensor::new(&[2], vec![0.5, -0.0]).unwrap()).unwrap();
        s.insert(
            "a.kernel",
            Tensor::new(&[1, 1, 2, 2], vec![1.0, f32::MIN_POSITIVE, -3.25, 7e-8]).unwrap(),
        )
        .unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let meta = serde_json::json!({"note": "x"});
        let ck: Checkpoint<f32> = decode_checkpoint(&encode_checkpoint(&s, &meta)).unwrap();
        for ((n1, a), (n2, b)) in s.iter().zip(ck.params.iter()) {
            assert_eq!(n1, n2);
            let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(ck.metadata, meta);
    }

    #[test]
    fn manifest_is_sorted_by_name() {
        let bytes = encode_checkpoint(&store(), &serde_json::Value::Null);
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let m: Manifest = serde_json::from_slice(&bytes[20..20 + len]).unwrap();
        let names: Vec<_> = m.params.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["a.kernel", "z.bias"]);
        assert_eq!(m.precision, "f32");
    }

    #[test]
    fn rejects_truncation_version_and_precision() {
        let bytes = encode_checkpoint(&store(), &serde_json::Value::Null);
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint(m)) if m.contains("truncated")
        ));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(
            decode_checkpoint::<f32>(&v2),
            Err(Error::Checkpoint(m)) if m.contains("version")
        ));
        assert!(decode_checkpoint::<f64>(&bytes).is_err());
        assert!(decode_checkpoint::<f32>(b"NOTACKPT").is_err());
    }
}
