//! CDFE embedding files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic  "CDFE"       4 bytes
//! version u32 = 1
//! count   u32
//! dim     u32
//! payload count * dim f32
//! ```
//!
//! Entry metadata sits in a JSON sidecar at `<file>.idx.json`:
//!
//! ```json
//! {"kind": "support", "dim": 4, "metadata": {...},
//!  "entries": {"0": {"entry_id": 17, "image_id": 3, "bbox": [x, y, w, h], "category_id": 2}}}
//! ```
//!
//! `entries` is keyed by ordinal; `bbox`, `category_id` and `metadata` are
//! optional.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Embedding, EmbeddingStore, StoreEntry, StoreKind};
use crate::detcore::{BBox, CategoryId, ImageId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"CDFE";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Serialize, Deserialize)]
struct SidecarEntry {
    entry_id: u64,
    image_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category_id: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    kind: StoreKind,
    #[serde(default)]
    dim: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata: Option<serde_json::Value>,
    entries: BTreeMap<u32, SidecarEntry>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".idx.json");
    PathBuf::from(s)
}

/// Encode the binary payload. Values are narrowed to `f32`.
pub fn encode_payload<T: Scalar>(store: &EmbeddingStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * store.len() * store.dim());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    out.extend_from_slice(&(store.dim() as u32).to_le_bytes());
    for e in store.entries() {
        for &v in e.vector.as_slice() {
            let f = v.to_f32().unwrap_or(f32::NAN);
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    out
}

pub fn encode_sidecar<T: Scalar>(store: &EmbeddingStore<T>) -> Result<Vec<u8>> {
    let entries = store
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| {
            (
                i as u32,
                SidecarEntry {
                    entry_id: e.entry_id,
                    image_id: e.image_id.0,
                    bbox: e.bbox.map(|b| b.as_array().map(|v| v.to_f64_lossy())),
                    category_id: e.category_id.map(|c| c.0),
                },
            )
        })
        .collect();
    let sc = Sidecar {
        kind: store.kind(),
        dim: Some(store.dim() as u32),
        metadata: store.metadata.clone(),
        entries,
    };
    Ok(serde_json::to_vec_pretty(&sc)?)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

/// Decode payload + sidecar into a store.
pub fn decode<T: Scalar>(payload: &[u8], sidecar: &[u8]) -> Result<EmbeddingStore<T>> {
    if payload.len() >= 4 && &payload[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if payload.len() < HEADER_LEN {
        return Err(Error::TruncatedFile {
            expected: HEADER_LEN,
            got: payload.len(),
        });
    }
    let version = read_u32(payload, 4);
    if version != VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let count = read_u32(payload, 8) as usize;
    let dim = read_u32(payload, 12) as usize;
    let expected = HEADER_LEN + 4 * count * dim;
    if payload.len() != expected {
        return Err(Error::TruncatedFile {
            expected,
            got: payload.len(),
        });
    }

    let sc: Sidecar = serde_json::from_slice(sidecar)?;
    if let Some(d) = sc.dim {
        if d as usize != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: d as usize,
            });
        }
    }
    if sc.entries.len() != count || sc.entries.keys().enumerate().any(|(i, &k)| i as u32 != k) {
        return Err(Error::Sidecar(format!(
            "expected ordinals 0..{count}, found {} entries",
            sc.entries.len()
        )));
    }

    let mut store = EmbeddingStore::new(dim, sc.kind);
    store.metadata = sc.metadata;
    for (ordinal, meta) in sc.entries.into_values().enumerate() {
        let start = HEADER_LEN + 4 * ordinal * dim;
        let vector = payload[start..start + 4 * dim]
            .chunks_exact(4)
            .map(|c| T::lit(f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk")))))
            .collect();
        let bbox = meta
            .bbox
            .map(|b| BBox::new(T::lit(b[0]), T::lit(b[1]), T::lit(b[2]), T::lit(b[3])))
            .transpose()?;
        store.push(StoreEntry {
            entry_id: meta.entry_id,
            image_id: ImageId(meta.image_id),
            bbox,
            category_id: meta.category_id.map(CategoryId),
            vector: Embedding::new(vector)?,
        })?;
    }
    Ok(store)
}

pub fn write_store<T: Scalar>(store: &EmbeddingStore<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_payload(store))?;
    std::fs::write(sidecar_path(path), encode_sidecar(store)?)?;
    Ok(())
}

pub fn read_store<T: Scalar>(path: &Path) -> Result<EmbeddingStore<T>> {
    let payload = std::fs::read(path)?;
    let sidecar = std::fs::read(sidecar_path(path))?;
    decode(&payload, &sidecar)
}
