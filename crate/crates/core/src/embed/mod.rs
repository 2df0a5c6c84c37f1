//! Instance and proposal embeddings.
//!
//! All neural backbones live behind this module: features arrive through the
//! CDFE file format (see [`store`]) and are only normalized and compared here.

pub mod store;
mod synth;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::detcore::{BBox, CategoryId, ImageId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use store::{read_store, sidecar_path, write_store};
pub use synth::{synth_clusters, SynthClusters};

/// Dense feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T>(Vec<T>);

impl<T: Scalar> Embedding<T> {
    pub fn new(v: Vec<T>) -> Result<Self> {
        if v.iter().all(|x| x.is_finite()) {
            Ok(Embedding(v))
        } else {
            Err(Error::InvalidParameter("embedding has non-finite entries".into()))
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding(vec![T::zero(); dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        check_dim(self.dim(), other.dim())?;
        Ok(self.0.iter().zip(&other.0).map(|(&a, &b)| a * b).sum())
    }

    pub fn norm(&self) -> T {
        self.0.iter().map(|&a| a * a).sum::<T>().sqrt()
    }

    pub fn scaled(&self, k: T) -> Self {
        Embedding(self.0.iter().map(|&a| a * k).collect())
    }

    /// `self + k * other`.
    pub fn axpy(&self, k: T, other: &Self) -> Result<Self> {
        check_dim(self.dim(), other.dim())?;
        Ok(Embedding(
            self.0.iter().zip(&other.0).map(|(&a, &b)| a + k * b).collect(),
        ))
    }

    pub fn l2_normalize(&self) -> Result<Self> {
        l2_normalize(self)
    }

    pub fn cast<U: Scalar>(&self) -> Embedding<U> {
        Embedding(self.0.iter().map(|v| U::lit(v.to_f64_lossy())).collect())
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimMismatch { expected, got })
    }
}

pub fn l2_normalize<T: Scalar>(e: &Embedding<T>) -> Result<Embedding<T>> {
    let n = e.norm();
    if !(n > T::zero()) {
        return Err(Error::ZeroVector);
    }
    Ok(Embedding(e.0.iter().map(|&a| a / n).collect()))
}

/// Cosine similarity in `[-1, 1]`.
pub fn cosine<T: Scalar>(a: &Embedding<T>, b: &Embedding<T>) -> Result<T> {
    let dot = a.dot(b)?;
    let (na, nb) = (a.norm(), b.norm());
    if !(na > T::zero()) || !(nb > T::zero()) {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (na * nb)).max(-T::one()).min(T::one()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreKind {
    Support,
    Proposal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreEntry<T> {
    pub entry_id: u64,
    pub image_id: ImageId,
    pub bbox: Option<BBox<T>>,
    pub category_id: Option<CategoryId>,
    pub vector: Embedding<T>,
}

/// Id-indexed embeddings of one kind, all of the same dimension.
#[derive(Debug, Clone)]
pub struct EmbeddingStore<T> {
    dim: usize,
    kind: StoreKind,
    entries: Vec<StoreEntry<T>>,
    index: HashMap<u64, usize>,
    /// Free-form exporter manifest carried through the sidecar untouched.
    pub metadata: Option<serde_json::Value>,
}

impl<T: Scalar> EmbeddingStore<T> {
    pub fn new(dim: usize, kind: StoreKind) -> Self {
        EmbeddingStore {
            dim,
            kind,
            entries: Vec::new(),
            index: HashMap::new(),
            metadata: None,
        }
    }

    pub fn from_entries(dim: usize, kind: StoreKind, entries: Vec<StoreEntry<T>>) -> Result<Self> {
        let mut s = Self::new(dim, kind);
        for e in entries {
            s.push(e)?;
        }
        Ok(s)
    }

    pub fn push(&mut self, entry: StoreEntry<T>) -> Result<()> {
        check_dim(self.dim, entry.vector.dim())?;
        if self.index.contains_key(&entry.entry_id) {
            return Err(Error::DuplicateId(format!("embedding entry {}", entry.entry_id)));
        }
        self.index.insert(entry.entry_id, self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> StoreKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[StoreEntry<T>] {
        &self.entries
    }

    pub fn get(&self, entry_id: u64) -> Option<&StoreEntry<T>> {
        self.index.get(&entry_id).map(|&i| &self.entries[i])
    }

    pub fn vector(&self, entry_id: u64) -> Result<&Embedding<T>> {
        self.get(entry_id)
            .map(|e| &e.vector)
            .ok_or(Error::MissingEmbedding(entry_id))
    }
}

impl<T: PartialEq> PartialEq for EmbeddingStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.kind == other.kind
            && self.entries == other.entries
            && self.metadata == other.metadata
    }
}

/// Image-pyramid scale factors.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSet<T>(Vec<T>);

impl<T: Scalar> ScaleSet<T> {
    pub fn new(scales: Vec<T>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(s) = scales.iter().find(|s| !(**s > T::zero())) {
            return Err(Error::InvalidParameter(format!("scale {s} is not positive")));
        }
        Ok(ScaleSet(scales))
    }

    pub fn scales(&self) -> &[T] {
        &self.0
    }
}

impl<T: Scalar> Default for ScaleSet<T> {
    fn default() -> Self {
        ScaleSet([0.9, 1.0, 1.1, 1.2].into_iter().map(T::lit).collect())
    }
}
