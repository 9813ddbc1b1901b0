//! Single-file tensor containers.
//!
//! Layout: an 8-byte little-endian `u64` header length `N`, followed by `N`
//! bytes of UTF-8 JSON mapping tensor names to `{dtype, shape, data_offsets}`
//! (plus an optional `"__metadata__"` string map), followed by the packed
//! little-endian tensor data. Offsets in the header are relative to the start
//! of the data region.
//!
//! Writes are canonical: tensors are laid out in ascending name order and the
//! header is serialized with sorted keys and no insignificant whitespace, so
//! the same [`TensorMap`] always produces byte-identical files. The reader is
//! more tolerant (arbitrary data order, trailing whitespace padding inside
//! the header, as some third-party writers produce) but verifies structural
//! invariants: offsets must not overlap and must tile the data region
//! contiguously from zero, and every length must match `dtype` × `shape`.

mod cast;
mod container;

pub use cast::{cast_tensor, decode_f32, encode_f32};
pub use container::{
    read_container, read_container_bytes, write_container, write_container_bytes,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Element type of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    F16,
    BF16,
}

impl DType {
    /// Bytes per element.
    pub fn byte_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    /// Header spelling of the dtype.
    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    /// Parse the header spelling.
    pub fn parse(s: &str) -> Result<Self, TensorStoreError> {
        match s {
            "F32" => Ok(DType::F32),
            "F16" => Ok(DType::F16),
            "BF16" => Ok(DType::BF16),
            other => Err(TensorStoreError::MalformedHeader(format!(
                "unknown dtype string {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Errors raised by container encoding, decoding, and casting.
#[derive(Debug, Error)]
pub enum TensorStoreError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensors {a:?} and {b:?} have overlapping data offsets")]
    OverlappingOffsets { a: String, b: String },
    #[error("file truncated: need {needed} bytes, have {actual}")]
    TruncatedData { needed: usize, actual: usize },
    #[error("tensor {name:?}: buffer holds {actual} bytes, {expected} required for {dtype} × {count} elements")]
    LengthMismatch {
        name: String,
        dtype: DType,
        count: usize,
        expected: usize,
        actual: usize,
    },
    #[error("tensor {0:?} already present in map")]
    DuplicateName(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Header entry for one tensor: where its bytes live and how to decode them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// `(begin, end)` byte offsets into the data region, `begin <= end`.
    pub data_offsets: (usize, usize),
}

impl TensorMeta {
    /// Number of elements implied by the shape (empty shape = scalar = 1).
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    /// Number of data bytes implied by dtype and shape.
    pub fn byte_len(&self) -> usize {
        self.element_count() * self.dtype.byte_width()
    }
}

/// One tensor's payload: dtype, shape, and raw little-endian bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorData {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl TensorData {
    /// Build a tensor, verifying that the buffer length matches the shape.
    pub fn new(dtype: DType, shape: Vec<usize>, data: Vec<u8>) -> Result<Self, TensorStoreError> {
        let count: usize = shape.iter().product();
        let expected = count * dtype.byte_width();
        if data.len() != expected {
            return Err(TensorStoreError::LengthMismatch {
                name: String::new(),
                dtype,
                count,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { dtype, shape, data })
    }

    /// Convenience constructor from `f32` values (stored as `F32`).
    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Result<Self, TensorStoreError> {
        Self::new(DType::F32, shape, encode_f32(values, DType::F32))
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    /// Decode to `f32` working precision regardless of storage dtype.
    pub fn to_f32(&self) -> Vec<f32> {
        decode_f32(&self.data, self.dtype).expect("length verified at construction")
    }
}

/// String metadata carried in the header's `"__metadata__"` entry.
pub type Metadata = BTreeMap<String, String>;

/// An in-memory container: named tensors plus optional string metadata.
///
/// Tensor names are unique and iteration is always in ascending name order,
/// which is also the canonical on-disk layout order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    tensors: BTreeMap<String, TensorData>,
    metadata: Option<Metadata>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a tensor; rejects duplicate names.
    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tensor: TensorData,
    ) -> Result<(), TensorStoreError> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(TensorStoreError::DuplicateName(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    /// Insert or replace a tensor.
    pub fn replace(&mut self, name: impl Into<String>, tensor: TensorData) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Tensor names in ascending (canonical) order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// `(name, tensor)` pairs in ascending name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorData)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn metadata(&self) -> Option<&Metadata> {
        self.metadata.as_ref()
    }

    pub fn set_metadata(&mut self, metadata: Option<Metadata>) {
        self.metadata = metadata;
    }

    /// Total data-region size in bytes under the canonical layout.
    pub fn data_len(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    /// Header entries with canonical (ascending-name, contiguous) offsets.
    pub fn metas(&self) -> Vec<TensorMeta> {
        let mut cursor = 0usize;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let begin = cursor;
                cursor += t.data.len();
                TensorMeta {
                    name: name.clone(),
                    dtype: t.dtype,
                    shape: t.shape.clone(),
                    data_offsets: (begin, cursor),
                }
            })
            .collect()
    }
}

impl FromIterator<(String, TensorData)> for TensorMap {
    fn from_iter<I: IntoIterator<Item = (String, TensorData)>>(iter: I) -> Self {
        let mut map = TensorMap::new();
        for (name, tensor) in iter {
            map.replace(name, tensor);
        }
        map
    }
}
