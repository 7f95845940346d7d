//! The `CMDQ` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CMDQ" | u32 version | u64 manifest_len | manifest (UTF-8 JSON) | payload
//! ```
//!
//! The manifest is a JSON object mapping tensor name to
//! `{"dtype", "shape", "offset", "length"}` (plus optional `"attrs"`), with
//! offsets relative to the start of the payload. An optional reserved
//! `"__metadata__"` key holds a string→string map for file-level metadata.
//! Entries are written in name order and their byte ranges tile the payload
//! exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::tensor::DenseMatrix;

pub const MAGIC: &[u8; 4] = b"CMDQ";
pub const VERSION: u32 = 1;
const METADATA_KEY: &str = "__metadata__";
const HEADER_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"CMDQ\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {found} (expected {VERSION})")]
    VersionMismatch { found: u32 },
    #[error("truncated container: {0}")]
    Truncated(String),
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("invalid tensor {name:?}: {reason}")]
    InvalidTensor { name: String, reason: String },
    #[error("missing tensor {0:?}")]
    Missing(String),
    #[error("tensor {name:?} has dtype {found}, expected {expected}")]
    WrongDtype {
        name: String,
        found: DType,
        expected: DType,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
    U32,
    I32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::U32 | DType::I32 => 4,
            DType::F16 => 2,
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
            DType::U32 => "u32",
            DType::I32 => "i32",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F16(Vec<f16>),
    U32(Vec<u32>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F16(_) => DType::F16,
            TensorData::U32(_) => DType::U32,
            TensorData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F16(v) => v.len(),
            TensorData::U32(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F16 => TensorData::F16(
                bytes
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U32 => TensorData::U32(
                bytes
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I32 => TensorData::I32(
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }
}

/// A typed 1-D or 2-D tensor with optional JSON attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
    attrs: BTreeMap<String, Value>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self, String> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(format!("rank {} unsupported (1 or 2 only)", shape.len()));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(format!("shape {shape:?} holds {numel} values, data has {}", data.len()));
        }
        Ok(Self {
            shape,
            data,
            attrs: BTreeMap::new(),
        })
    }

    pub fn with_attr(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.attrs.insert(key.to_string(), value.into());
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn attrs(&self) -> &BTreeMap<String, Value> {
        &self.attrs
    }

    pub fn attr(&self, key: &str) -> Option<&Value> {
        self.attrs.get(key)
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * self.dtype().size()
    }

    /// Interprets the tensor as a matrix; vectors become a single row.
    pub fn to_matrix(&self) -> Option<DenseMatrix> {
        let TensorData::F32(v) = &self.data else {
            return None;
        };
        let (rows, cols) = match self.shape[..] {
            [n] => (1, n),
            [r, c] => (r, c),
            _ => return None,
        };
        DenseMatrix::new(rows, cols, v.clone()).ok()
    }
}

impl From<&DenseMatrix> for Tensor {
    fn from(m: &DenseMatrix) -> Self {
        Tensor::new(vec![m.rows(), m.cols()], TensorData::F32(m.data().to_vec()))
            .expect("matrix shape is always consistent")
    }
}

/// Name-ordered collection of tensors plus file-level metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), ContainerError> {
        let name = name.into();
        if name.is_empty() || name == METADATA_KEY {
            return Err(ContainerError::InvalidTensor {
                name,
                reason: "reserved or empty name".into(),
            });
        }
        if self.tensors.contains_key(&name) {
            return Err(ContainerError::DuplicateName(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn insert_matrix(&mut self, name: impl Into<String>, m: &DenseMatrix) -> Result<(), ContainerError> {
        self.insert(name, Tensor::from(m))
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, ContainerError> {
        self.get(name).ok_or_else(|| ContainerError::Missing(name.to_string()))
    }

    pub fn matrix(&self, name: &str) -> Result<DenseMatrix, ContainerError> {
        let t = self.require(name)?;
        t.to_matrix().ok_or_else(|| ContainerError::WrongDtype {
            name: name.to_string(),
            found: t.dtype(),
            expected: DType::F32,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    attrs: BTreeMap<String, Value>,
}

/// Serializes `map` into container bytes.
pub fn to_bytes(map: &TensorMap) -> Vec<u8> {
    let mut manifest = Map::new();
    if !map.metadata.is_empty() {
        manifest.insert(
            METADATA_KEY.to_string(),
            serde_json::to_value(&map.metadata).expect("string map serializes"),
        );
    }
    let mut payload = Vec::new();
    for (name, t) in &map.tensors {
        let offset = payload.len() as u64;
        t.data.write_le(&mut payload);
        let entry = ManifestEntry {
            dtype: t.dtype(),
            shape: t.shape.clone(),
            offset,
            length: payload.len() as u64 - offset,
            attrs: t.attrs.clone(),
        };
        manifest.insert(name.clone(), serde_json::to_value(entry).expect("entry serializes"));
    }
    let manifest = serde_json::to_vec(&Value::Object(manifest)).expect("manifest serializes");

    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    out
}

/// Parses container bytes, validating the header and that the manifest
/// ranges tile the payload exactly.
pub fn from_bytes(bytes: &[u8]) -> Result<TensorMap, ContainerError> {
    if bytes.len() < 4 {
        return Err(ContainerError::Truncated("missing magic".into()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(ContainerError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(ContainerError::Truncated("incomplete header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(ContainerError::VersionMismatch { found: version });
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let manifest_end = usize::try_from(manifest_len)
        .ok()
        .and_then(|l| l.checked_add(HEADER_LEN))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| ContainerError::Truncated("manifest extends past end of file".into()))?;
    let manifest: Map<String, Value> = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])
        .map_err(|e| ContainerError::MalformedManifest(e.to_string()))?;
    let payload = &bytes[manifest_end..];

    let mut map = TensorMap::new();
    let mut entries = Vec::with_capacity(manifest.len());
    for (name, value) in manifest {
        if name == METADATA_KEY {
            map.metadata = serde_json::from_value(value)
                .map_err(|e| ContainerError::MalformedManifest(format!("{METADATA_KEY}: {e}")))?;
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_value(value).map_err(|e| ContainerError::MalformedManifest(format!("{name}: {e}")))?;
        let numel = entry.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        if numel.and_then(|n| n.checked_mul(entry.dtype.size() as u64)) != Some(entry.length) {
            return Err(ContainerError::MalformedManifest(format!(
                "{name}: length {} inconsistent with {} shape {:?}",
                entry.length, entry.dtype, entry.shape
            )));
        }
        entries.push((name, entry));
    }

    // ranges must tile [0, payload_end) in offset order
    entries.sort_by_key(|(_, e)| e.offset);
    let mut cursor = 0u64;
    for (name, e) in &entries {
        if e.offset != cursor {
            return Err(ContainerError::MalformedManifest(format!(
                "{name}: offset {} leaves a gap or overlap at {cursor}",
                e.offset
            )));
        }
        cursor = e.offset + e.length;
    }
    let payload_len = payload.len() as u64;
    if cursor > payload_len {
        return Err(ContainerError::Truncated(format!(
            "payload has {payload_len} bytes, manifest requires {cursor}"
        )));
    }
    if cursor < payload_len {
        return Err(ContainerError::MalformedManifest(format!(
            "{} trailing payload bytes",
            payload_len - cursor
        )));
    }

    for (name, e) in entries {
        let bytes = &payload[e.offset as usize..(e.offset + e.length) as usize];
        let mut tensor = Tensor::new(e.shape, TensorData::read_le(e.dtype, bytes)).map_err(|reason| {
            ContainerError::InvalidTensor {
                name: name.clone(),
                reason,
            }
        })?;
        tensor.attrs = e.attrs;
        map.insert(name, tensor)?;
    }
    Ok(map)
}

pub fn write_container(path: impl AsRef<Path>, map: &TensorMap) -> Result<(), ContainerError> {
    fs::write(path, to_bytes(map))?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<TensorMap, ContainerError> {
    from_bytes(&fs::read(path)?)
}
