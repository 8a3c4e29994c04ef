//! Single-file tensor container.
//!
//! Layout:
//!
//! ```text
//! b"HYTNASCK"                 8 bytes
//! manifest length             u64 little-endian
//! manifest                    UTF-8 JSON
//! tensor buffers              little-endian scalars, in manifest order
//! ```
//!
//! The manifest lists every tensor with its name, kind, shape and the byte
//! range of its buffer relative to the end of the manifest, plus a free-form
//! `meta` object for run records.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"HYTNASCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Weight,
    Arch,
    Buffer,
    /// Anything that is not part of a network, such as exported attention maps.
    Data,
}

impl From<ParamGroup> for TensorKind {
    fn from(g: ParamGroup) -> Self {
        match g {
            ParamGroup::Weight => TensorKind::Weight,
            ParamGroup::Arch => TensorKind::Arch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// A loaded container. Values are widened to f64, which is lossless for
/// both supported dtypes.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor<f64>>,
}

/// Serializes named tensors into container bytes.
pub fn encode<T: Scalar>(tensors: &[(&str, TensorKind, &Tensor<T>)], meta: serde_json::Value) -> Vec<u8> {
    let mut body = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for &(name, kind, t) in tensors {
        let offset = body.len() as u64;
        for &x in t.data() {
            x.write_le(&mut body);
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            kind,
            shape: t.shape().to_vec(),
            offset,
            nbytes: body.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        dtype: T::DTYPE.to_string(),
        tensors: entries,
        meta,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&body);
    out
}

/// Writes `bytes` through a temporary sibling file so a crash never leaves a
/// truncated file under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_tensors<T: Scalar>(
    path: &Path,
    tensors: &[(&str, TensorKind, &Tensor<T>)],
    meta: serde_json::Value,
) -> Result<()> {
    write_atomic(path, &encode(tensors, meta))
}

/// Saves every parameter and buffer of `store`.
pub fn save_store<T: Scalar>(path: &Path, store: &ParamStore<T>, meta: serde_json::Value) -> Result<()> {
    let mut list: Vec<(&str, TensorKind, &Tensor<T>)> = store
        .params()
        .map(|(_, p)| (p.name.as_str(), TensorKind::from(p.group), &*p.tensor))
        .collect();
    list.extend(store.buffers().map(|(_, b)| (b.name.as_str(), TensorKind::Buffer, &b.tensor)));
    save_tensors(path, &list, meta)
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a checkpoint file (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            Error::format(
                path,
                format!("manifest length {len} exceeds file size {} at byte 8", bytes.len()),
            )
        })?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..body_start]).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::SchemaVersion {
            what: "checkpoint",
            found: manifest.version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let width = match manifest.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::format(path, format!("unknown dtype {other:?}"))),
    };
    let body = &bytes[body_start..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let count: usize = e.shape.iter().product();
        if e.shape.contains(&0) || (count * width) as u64 != e.nbytes {
            return Err(Error::format(
                path,
                format!("tensor {}: shape {:?} does not match {} bytes", e.name, e.shape, e.nbytes),
            ));
        }
        let (start, end) = (e.offset as usize, (e.offset + e.nbytes) as usize);
        if end > body.len() {
            return Err(Error::format(
                path,
                format!(
                    "tensor {}: bytes {}..{} past end of data ({} bytes after byte {body_start})",
                    e.name,
                    start,
                    end,
                    body.len()
                ),
            ));
        }
        let raw = &body[start..end];
        let data: Vec<f64> = if width == 4 {
            raw.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect()
        } else {
            raw.chunks_exact(8).map(f64::read_le).collect()
        };
        tensors.push(Tensor::new(&e.shape, data));
    }
    Ok(Checkpoint { manifest, tensors })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.manifest
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
    }

    pub fn meta(&self) -> &serde_json::Value {
        &self.manifest.meta
    }

    /// Overwrites every parameter and buffer of `store` from this checkpoint.
    /// Every name in `store` must be present with a matching shape.
    pub fn restore_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.params().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = self.expect(&name, store.value(id).shape())?;
            store.set(id, t.cast());
        }
        let ids: Vec<_> = store.buffers().map(|(id, b)| (id, b.name.clone())).collect();
        for (id, name) in ids {
            let t = self.expect(&name, store.buffer(id).shape())?;
            *store.buffer_mut(id) = t.cast();
        }
        Ok(())
    }

    fn expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor<f64>> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Contract(format!("checkpoint has no tensor named {name}")))?;
        if t.shape() != shape {
            return Err(Error::Contract(format!(
                "checkpoint tensor {name} has shape {:?}, network expects {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.weight", ParamGroup::Weight, Tensor::new(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-7, 7.0]));
        s.add("a.omega", ParamGroup::Arch, Tensor::new(&[4], vec![0.1, 0.2, 0.3, 0.4]));
        s.add_buffer("a.running_var", Tensor::new(&[1], vec![0.5]));
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let src = sample_store();
        let bytes = encode(
            &src.params()
                .map(|(_, p)| (p.name.as_str(), TensorKind::from(p.group), &*p.tensor))
                .chain(src.buffers().map(|(_, b)| (b.name.as_str(), TensorKind::Buffer, &b.tensor)))
                .collect::<Vec<_>>(),
            serde_json::json!({"epoch": 3}),
        );
        let ck = decode(Path::new("mem"), &bytes).unwrap();
        assert_eq!(ck.manifest.dtype, "f32");
        assert_eq!(ck.meta()["epoch"], 3);
        let mut dst = sample_store();
        let ids: Vec<_> = dst.params().map(|(id, _)| id).collect();
        for id in ids {
            dst.value_mut(id).data_mut().fill(9.0);
        }
        ck.restore_into(&mut dst).unwrap();
        for ((_, a), (_, b)) in src.params().zip(dst.params()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
        assert_eq!(dst.checksum(ParamGroup::Arch), src.checksum(ParamGroup::Arch));
    }

    #[test]
    fn offsets_follow_manifest_order() {
        let a = Tensor::<f64>::from_f64(&[2], &[1.0, 2.0]);
        let b = Tensor::<f64>::from_f64(&[1], &[3.0]);
        let bytes = encode(&[("a", TensorKind::Data, &a), ("b", TensorKind::Data, &b)], serde_json::Value::Null);
        let ck = decode(Path::new("mem"), &bytes).unwrap();
        assert_eq!(ck.manifest.tensors[1].offset, 16);
        assert_eq!(ck.manifest.tensors[1].nbytes, 8);
        assert_eq!(ck.get("b").unwrap().data(), &[3.0]);
    }

    #[test]
    fn truncation_and_bad_magic_are_rejected() {
        let a = Tensor::<f32>::ones(&[8]);
        let bytes = encode(&[("a", TensorKind::Data, &a)], serde_json::Value::Null);
        let err = decode(Path::new("x"), &bytes[..bytes.len() - 4]).unwrap_err();
        assert!(err.to_string().contains("past end"), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(Path::new("x"), &bad).is_err());
    }

    #[test]
    fn missing_tensor_is_a_contract_error() {
        let bytes = encode::<f32>(&[], serde_json::Value::Null);
        let ck = decode(Path::new("x"), &bytes).unwrap();
        assert!(matches!(ck.restore_into(&mut sample_store()), Err(Error::Contract(_))));
    }
}
