use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::blob::{find, read_tensor, BlobError, BlobWriter, TensorEntry};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum ParamStoreError {
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// Named, ordered model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn add(&mut self, name: &str, t: Tensor<T>) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter {}", name);
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn write_blob(&self, w: &mut BlobWriter) -> Result<(), BlobError> {
        for (n, t) in self.names.iter().zip(&self.tensors) {
            w.push(n, t)?;
        }
        Ok(())
    }

    /// Overwrites every parameter from a blob; names and shapes must match.
    pub fn load_blob(&mut self, entries: &[TensorEntry], blob: &[u8]) -> Result<(), ParamStoreError> {
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let loaded: Tensor<T> = read_tensor(find(entries, n)?, blob)?;
            if loaded.shape() != t.shape() {
                return Err(ParamStoreError::Shape {
                    name: n.clone(),
                    expected: t.shape().to_vec(),
                    found: loaded.shape().to_vec(),
                });
            }
            *t = loaded;
        }
        Ok(())
    }
}

/// Glorot-uniform `fan_in x fan_out` matrix.
pub(crate) fn glorot<T: Real>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = num_traits::Float::sqrt(6.0 / (fan_in + fan_out) as f64);
    Tensor::from_fn(&[fan_in, fan_out], |_| T::of(rng.gen_range(-a..a)))
}

/// He-uniform convolution kernel `out x (in * k * k)`.
pub(crate) fn he_conv<T: Real>(rng: &mut ChaCha8Rng, out: usize, patch: usize) -> Tensor<T> {
    let a = num_traits::Float::sqrt(6.0 / patch as f64);
    Tensor::from_fn(&[out, patch], |_| T::of(rng.gen_range(-a..a)))
}
