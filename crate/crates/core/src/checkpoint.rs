//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"STEGCKPT"  u32 version  u64 header_len  header (JSON)
//! u64 value_count  value_count × f32
//! 32-byte SHA-256 of everything above
//! ```
//!
//! The header names every section and parameter with its shape, so the blob
//! can be split without knowing the network in advance.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, StegoError};
use crate::nn::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"STEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionHeader {
    pub name: String,
    /// SHA-256 of the section's parameters, see [`ParamStore::content_hash`].
    pub hash: String,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// `"codec"` or `"system"`.
    pub kind: String,
    pub codec_id: String,
    /// Architecture hyperparameters, one object per section.
    pub arch: serde_json::Value,
    #[serde(default)]
    pub d: Option<usize>,
    #[serde(default)]
    pub image_size: Option<[usize; 2]>,
    /// Free-form metadata such as the training iteration.
    #[serde(default)]
    pub meta: serde_json::Value,
    pub sections: Vec<SectionHeader>,
}

/// A loaded checkpoint: the header and one parameter store per section.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub sections: Vec<(String, ParamStore<f32>)>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Result<&ParamStore<f32>> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| StegoError::Checkpoint(format!("missing section {name:?}")))
    }
}

fn checkpoint_err(path: &Path, msg: impl std::fmt::Display) -> StegoError {
    StegoError::Checkpoint(format!("{}: {msg}", path.display()))
}

/// Serializes a checkpoint to bytes. The section list inside `header` is
/// rebuilt from `sections`.
pub fn to_bytes(mut header: CheckpointHeader, sections: &[(&str, &ParamStore<f32>)]) -> Vec<u8> {
    header.sections = sections
        .iter()
        .map(|(name, store)| SectionHeader {
            name: name.to_string(),
            hash: store.content_hash(),
            params: store
                .names()
                .iter()
                .zip(store.tensors())
                .map(|(n, t)| ParamEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        })
        .collect();
    let json = serde_json::to_vec(&header).expect("header serializes");
    let count: usize = sections.iter().map(|(_, s)| s.num_values()).sum();
    let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + 8 + count * 4 + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for (_, store) in sections {
        for t in store.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn save(path: impl AsRef<Path>, header: CheckpointHeader, sections: &[(&str, &ParamStore<f32>)]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| StegoError::io(dir, e))?;
    }
    let bytes = to_bytes(header, sections);
    // write then rename so readers never observe a partial file
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| StegoError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| StegoError::io(path, e))
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let err = |m: &str| checkpoint_err(path, m);
    if bytes.len() < 8 + 4 + 8 + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(err("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(checkpoint_err(
            path,
            format!("unsupported format version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(err("content hash mismatch"));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e + 8 <= body.len())
        .ok_or_else(|| err("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&body[20..header_end]).map_err(|e| checkpoint_err(path, e))?;
    let count = u64::from_le_bytes(body[header_end..header_end + 8].try_into().expect("8 bytes")) as usize;
    let blob = &body[header_end + 8..];
    if blob.len() != count * 4 {
        return Err(err("parameter blob length mismatch"));
    }
    let mut values = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut sections = Vec::new();
    let mut used = 0usize;
    for sec in &header.sections {
        let mut store = ParamStore::new();
        for p in &sec.params {
            let n: usize = p.shape.iter().product();
            used += n;
            if used > count {
                return Err(err("parameter blob shorter than header"));
            }
            let data: Vec<f32> = values.by_ref().take(n).collect();
            store.add(p.name.clone(), Tensor::new(&p.shape, data));
        }
        if store.content_hash() != sec.hash {
            return Err(checkpoint_err(path, format!("section {:?} hash mismatch", sec.name)));
        }
        sections.push((sec.name.clone(), store));
    }
    if used != count {
        return Err(err("parameter blob longer than header"));
    }
    Ok(Checkpoint { header, sections })
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| StegoError::io(path, e))?;
    from_bytes(&bytes, path)
}

/// Copies parameter values from `src` into `dst`, requiring identical names
/// and shapes in the same order.
pub fn restore_into(dst: &mut ParamStore<f32>, src: &ParamStore<f32>, what: &str) -> Result<()> {
    if dst.names() != src.names() {
        return Err(StegoError::Checkpoint(format!(
            "{what}: parameter names do not match the architecture"
        )));
    }
    for (a, b) in dst.tensors_mut().iter_mut().zip(src.tensors()) {
        if a.shape() != b.shape() {
            return Err(StegoError::Checkpoint(format!(
                "{what}: shape {:?} does not match architecture shape {:?}",
                b.shape(),
                a.shape()
            )));
        }
        a.data_mut().copy_from_slice(b.data());
    }
    Ok(())
}
