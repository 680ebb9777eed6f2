//! Named parameter storage, gradient buffers and the checkpoint file format.
//!
//! Checkpoint layout (single file):
//!
//! ```text
//! [0]        format version byte
//! [1..9]     manifest length in bytes, u64 little-endian
//! [9..9+n]   manifest JSON: {"metadata": ..., "frozen": [..], "params": [{"name", "shape", "offset"}, ..]}
//! [9+n..]    payload: every parameter as little-endian f64, concatenated in manifest order
//! ```
//!
//! `offset` counts bytes from the start of the payload.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tensor};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    index: BTreeMap<String, ParamId>,
    frozen: BTreeSet<String>,
}

/// `true` when `name` is `prefix` itself or lies in the dotted subtree below it.
fn in_subtree(name: &str, prefix: &str) -> bool {
    name == prefix || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: BTreeMap::new(), frozen: BTreeSet::new() }
    }

    pub fn register(&mut self, name: &str, value: Tensor<S>) -> Result<ParamId, AutodiffError> {
        if self.index.contains_key(name) {
            return Err(AutodiffError::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Returns the existing parameter of that name, or registers one
    /// initialized by `init`. An existing parameter must have `shape`.
    pub fn get_or_register(
        &mut self,
        name: &str,
        shape: &[usize],
        init: impl FnOnce() -> Tensor<S>,
    ) -> Result<ParamId, AutodiffError> {
        if let Some(&id) = self.index.get(name) {
            if self.values[id.0].shape() != shape {
                return Err(AutodiffError::Shape {
                    context: name.to_string(),
                    expected: shape.to_vec(),
                    got: self.values[id.0].shape().to_vec(),
                });
            }
            return Ok(id);
        }
        self.register(name, init())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Ids of every parameter under `prefix`.
    pub fn subtree(&self, prefix: &str) -> Vec<ParamId> {
        self.iter().filter(|(_, n, _)| in_subtree(n, prefix)).map(|(id, _, _)| id).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn freeze(&mut self, prefix: &str) {
        self.frozen.insert(prefix.to_string());
    }

    pub fn unfreeze(&mut self, prefix: &str) {
        self.frozen.remove(prefix);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        let name = &self.names[id.0];
        self.frozen.iter().any(|p| in_subtree(name, p))
    }

    pub fn frozen_prefixes(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_identical(&self, other: &ParamStore<S>) -> bool {
        self.names == other.names
            && self.values.iter().zip(&other.values).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }

    pub fn to_bytes(&self, metadata: &serde_json::Value) -> Result<Vec<u8>, AutodiffError> {
        let mut offset = 0usize;
        let params = self
            .iter()
            .map(|(_, name, value)| {
                let entry = ManifestEntry { name: name.to_string(), shape: value.shape().to_vec(), offset };
                offset += value.numel() * 8;
                entry
            })
            .collect();
        let manifest = Manifest { metadata: metadata.clone(), frozen: self.frozen.iter().cloned().collect(), params };
        let json = serde_json::to_vec(&manifest).map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        let mut bytes = Vec::with_capacity(9 + json.len() + offset);
        bytes.push(CHECKPOINT_VERSION);
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        for value in &self.values {
            for x in value.data() {
                bytes.extend_from_slice(&x.as_f64().to_le_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, serde_json::Value), AutodiffError> {
        let corrupt = |msg: &str| AutodiffError::Checkpoint(msg.to_string());
        let &version = bytes.first().ok_or_else(|| corrupt("empty checkpoint"))?;
        if version != CHECKPOINT_VERSION {
            return Err(AutodiffError::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
        }
        let len_bytes: [u8; 8] = bytes.get(1..9).and_then(|s| s.try_into().ok()).ok_or_else(|| corrupt("truncated header"))?;
        let manifest_len = u64::from_le_bytes(len_bytes) as usize;
        let manifest_end = 9usize.checked_add(manifest_len).ok_or_else(|| corrupt("bad manifest length"))?;
        let json = bytes.get(9..manifest_end).ok_or_else(|| corrupt("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        let payload = &bytes[manifest_end..];
        let mut store = ParamStore::new();
        for entry in manifest.params {
            let n: usize = entry.shape.iter().product();
            let raw = payload
                .get(entry.offset..entry.offset + n * 8)
                .ok_or_else(|| AutodiffError::Checkpoint(format!("payload of {} out of range", entry.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| S::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
                .collect();
            store.register(&entry.name, Tensor::new(entry.shape, data)?)?;
        }
        store.frozen = manifest.frozen.into_iter().collect();
        Ok((store, manifest.metadata))
    }

    pub fn save(&self, path: &Path, metadata: &serde_json::Value) -> Result<(), AutodiffError> {
        let bytes = self.to_bytes(metadata)?;
        std::fs::write(path, bytes).map_err(|e| AutodiffError::Io { path: path.display().to_string(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value), AutodiffError> {
        let bytes =
            std::fs::read(path).map_err(|e| AutodiffError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    metadata: serde_json::Value,
    frozen: Vec<String>,
    params: Vec<ManifestEntry>,
}

/// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))` entries.
pub fn uniform_init<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<S> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64_lossy(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Per-parameter gradient buffers, dense and zero-initialized.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: Vec<Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(store: &ParamStore<S>) -> Self {
        Self { grads: store.values.iter().map(|v| Tensor::zeros(v.shape().to_vec())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.grads[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<S>) {
        self.grads[id.0].add_assign(g);
    }

    /// Elementwise `self += other`, parameter by parameter in id order.
    pub fn add_assign(&mut self, other: &Gradients<S>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: S) {
        for g in &mut self.grads {
            g.scale_assign(s);
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.grads.iter().all(|g| g.data().iter().all(|x| *x == S::zero()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }
}
