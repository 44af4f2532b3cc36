//! Checkpoint tensor blob: tensors packed back to back as little-endian,
//! row-major values, described by a table of [`TensorEntry`].

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum BlobError {
    #[error("tensor `{0}` not present in the table")]
    Missing(String),
    #[error("tensor `{name}` has dtype {found}, expected {expected}")]
    Dtype { name: String, found: String, expected: &'static str },
    #[error("tensor `{name}`: byte range {offset}+{length} exceeds blob of {blob} bytes")]
    OutOfRange { name: String, offset: u64, length: u64, blob: usize },
    #[error("tensor `{name}`: {length} bytes do not hold shape {shape:?}")]
    Length { name: String, length: u64, shape: Vec<usize> },
    #[error("tensor `{0}` appears more than once")]
    Duplicate(String),
}

#[derive(Default)]
pub struct BlobWriter {
    entries: Vec<TensorEntry>,
    bytes: Vec<u8>,
}

impl BlobWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<T: Real>(&mut self, name: &str, t: &Tensor<T>) -> Result<(), BlobError> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(BlobError::Duplicate(name.to_string()));
        }
        let start = self.bytes.len();
        for &x in t.data() {
            x.write_le(&mut self.bytes);
        }
        self.entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            byte_offset: start as u64,
            byte_length: (self.bytes.len() - start) as u64,
        });
        Ok(())
    }

    pub fn finish(self) -> (Vec<TensorEntry>, Vec<u8>) {
        (self.entries, self.bytes)
    }
}

pub fn find<'a>(entries: &'a [TensorEntry], name: &str) -> Result<&'a TensorEntry, BlobError> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| BlobError::Missing(name.to_string()))
}

pub fn read_tensor<T: Real>(entry: &TensorEntry, blob: &[u8]) -> Result<Tensor<T>, BlobError> {
    if entry.dtype != T::DTYPE {
        return Err(BlobError::Dtype {
            name: entry.name.clone(),
            found: entry.dtype.clone(),
            expected: T::DTYPE,
        });
    }
    let end = entry.byte_offset.checked_add(entry.byte_length);
    if end.map_or(true, |e| e > blob.len() as u64) {
        return Err(BlobError::OutOfRange {
            name: entry.name.clone(),
            offset: entry.byte_offset,
            length: entry.byte_length,
            blob: blob.len(),
        });
    }
    let count: usize = entry.shape.iter().product();
    if entry.byte_length != (count * T::BYTES) as u64 {
        return Err(BlobError::Length {
            name: entry.name.clone(),
            length: entry.byte_length,
            shape: entry.shape.clone(),
        });
    }
    let bytes = &blob[entry.byte_offset as usize..(entry.byte_offset + entry.byte_length) as usize];
    let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
    Ok(Tensor::new(&entry.shape, data))
}
