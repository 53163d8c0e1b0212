//! Parameter checkpoints.
//!
//! Layout: `b"XNT1"`, a little-endian `u64` manifest length, the JSON
//! manifest, then the raw little-endian value blobs. Manifest offsets are
//! relative to the first byte after the manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DType, Real, Result, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"XNT1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<CheckpointEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
    pub meta: serde_json::Value,
    blob: Vec<u8>,
}

fn ckpt_err(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn encode_checkpoint<R: Real>(
    tensors: &[(String, &Tensor<R>)],
    meta: serde_json::Value,
) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(CheckpointEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: R::DTYPE,
            offset: blob.len() as u64,
        });
        for v in t.data() {
            v.write_le(&mut blob);
        }
    }
    let manifest = serde_json::to_vec(&Manifest {
        tensors: entries,
        meta,
    })
    .map_err(|e| ckpt_err(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + manifest.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn save_checkpoint<R: Real>(
    path: &Path,
    tensors: &[(String, &Tensor<R>)],
    meta: serde_json::Value,
) -> Result<()> {
    fs::write(path, encode_checkpoint(tensors, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&fs::read(path)?)
}

impl Checkpoint {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(ckpt_err("missing XNT1 header"));
        }
        let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(12..12 + len)
            .ok_or_else(|| ckpt_err("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(body).map_err(|e| ckpt_err(format!("manifest: {e}")))?;
        let blob = bytes[12 + len..].to_vec();
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset as usize + n * e.dtype.size();
            if end > blob.len() {
                return Err(ckpt_err(format!("tensor {} runs past end of file", e.name)));
            }
        }
        Ok(Checkpoint {
            entries: manifest.tensors,
            meta: manifest.meta,
            blob,
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Reads tensor `name`, converting to precision `R` if needed.
    pub fn get<R: Real>(&self, name: &str) -> Result<Tensor<R>> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| ckpt_err(format!("no tensor named {name}")))?;
        let n: usize = e.shape.iter().product();
        let size = e.dtype.size();
        let start = e.offset as usize;
        let data = (0..n)
            .map(|i| {
                let b = &self.blob[start + i * size..start + (i + 1) * size];
                match e.dtype {
                    DType::F32 => R::of(f32::read_le(b) as f64),
                    DType::F64 => R::of(f64::read_le(b)),
                }
            })
            .collect();
        Tensor::new(e.shape.clone(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_preserves_bits(vals in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
            let t = Tensor::<f64>::new([vals.len()], vals.clone()).unwrap();
            let s = Tensor::<f64>::scalar(3.5);
            let bytes = encode_checkpoint(
                &[("a.w".to_string(), &t), ("b".to_string(), &s)],
                serde_json::json!({"k": 1}),
            ).unwrap();
            let ck = Checkpoint::decode(&bytes).unwrap();
            prop_assert_eq!(ck.get::<f64>("a.w").unwrap(), t);
            prop_assert_eq!(ck.get::<f64>("b").unwrap().item(), 3.5);
            prop_assert_eq!(&ck.meta["k"], &serde_json::json!(1));
        }
    }

    #[test]
    fn header_is_magic() {
        let t = Tensor::<f32>::ones([2]);
        let bytes = encode_checkpoint(&[("x".into(), &t)], serde_json::Value::Null).unwrap();
        assert_eq!(&bytes[..4], b"XNT1");
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::decode(b"NOPE0000000000").is_err());
        let ck = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(ck.entries[0].dtype, DType::F32);
        assert_eq!(ck.get::<f64>("x").unwrap().data(), &[1.0, 1.0]);
    }
}
