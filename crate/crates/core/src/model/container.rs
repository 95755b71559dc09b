//! Portable weight container (`.mdnw`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MDNW" | version: u16 | manifest_len: u32 | manifest (UTF-8 JSON)
//!        | tensor payloads (f32 LE, row-major, in manifest order)
//!        | crc32 of every preceding byte: u32
//! ```
//!
//! Manifest offsets are relative to the first payload byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::weights::ModelWeights;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"MDNW";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub version: u16,
    pub entries: Vec<ManifestEntry>,
    pub payload_bytes: usize,
}

/// Serialize weights (as f32) to container bytes.
pub fn encode<T: Real>(weights: &ModelWeights<T>) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(weights.len());
    let mut offset = 0;
    for (name, t) in weights.iter() {
        let length = t.len() * 4;
        entries.push(ManifestEntry {
            name: name.clone(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset,
            length,
        });
        offset += length;
    }
    let manifest = WeightManifest { version: VERSION, entries, payload_bytes: offset };
    let json = serde_json::to_vec(&manifest)?;
    let manifest_len = u32::try_from(json.len())
        .map_err(|_| Error::Container("manifest exceeds 4 GiB".into()))?;

    let mut out = Vec::with_capacity(4 + 2 + 4 + json.len() + offset + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&manifest_len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in weights.iter() {
        for &v in t.data() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Stored whole-file checksum, after verifying it.
pub fn checksum(bytes: &[u8]) -> Result<u32> {
    if bytes.len() < 14 {
        return Err(Error::Container(format!("{} bytes is too short for a container", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4-byte tail"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(stored)
}

/// Parse and fully validate container bytes. Nothing is returned unless the
/// checksum, version and every entry check out.
pub fn decode(bytes: &[u8]) -> Result<(WeightManifest, BTreeMap<String, Tensor<f32>>)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Container("bad magic bytes (expected MDNW)".into()));
    }
    checksum(bytes)?;
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Container(format!("unknown container version {version}")));
    }
    let manifest_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let body = &bytes[..bytes.len() - 4];
    let json_end = 10usize
        .checked_add(manifest_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Container("manifest length out of bounds".into()))?;
    let manifest: WeightManifest = serde_json::from_slice(&body[10..json_end])?;
    let payload = &body[json_end..];
    if payload.len() != manifest.payload_bytes {
        return Err(Error::Container(format!(
            "payload is {} bytes, manifest declares {}",
            payload.len(),
            manifest.payload_bytes
        )));
    }

    let mut spans: Vec<(usize, usize)> = Vec::with_capacity(manifest.entries.len());
    let mut tensors = BTreeMap::new();
    for e in &manifest.entries {
        if e.dtype != "f32" {
            return Err(Error::Container(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let count: usize = e.shape.iter().product();
        if e.length != count * 4 {
            return Err(Error::Container(format!("{}: length does not match shape", e.name)));
        }
        let end = e
            .offset
            .checked_add(e.length)
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| Error::Container(format!("{}: payload out of bounds", e.name)))?;
        spans.push((e.offset, end));
        let data = payload[e.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?).is_some() {
            return Err(Error::Container(format!("duplicate entry {}", e.name)));
        }
    }
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[1].0 < w[0].1) {
        return Err(Error::Container("overlapping payload entries".into()));
    }
    Ok((manifest, tensors))
}

/// Write `weights` to `path`; returns the container checksum.
pub fn save_weights<T: Real>(weights: &ModelWeights<T>, path: impl AsRef<Path>) -> Result<u32> {
    let path = path.as_ref();
    let bytes = encode(weights)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    checksum(&bytes)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Strict load: names and shapes must match `config` exactly.
pub fn load_weights(path: impl AsRef<Path>, config: &ModelConfig) -> Result<ModelWeights<f32>> {
    weights_from_bytes(&read(path.as_ref())?, config)
}

pub fn weights_from_bytes(bytes: &[u8], config: &ModelConfig) -> Result<ModelWeights<f32>> {
    config.validate()?;
    let (_, tensors) = decode(bytes)?;
    let weights = ModelWeights::from_map(tensors);
    weights.check_against(config)?;
    Ok(weights)
}

/// What a permissive load did with each parameter.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ImportReport {
    /// Parameters taken from the container.
    pub loaded: Vec<String>,
    /// Parameters left at fresh initialization (absent or shape-conflicting).
    pub fresh: Vec<String>,
    /// Container entries with no counterpart in the config.
    pub ignored: Vec<String>,
}

impl ImportReport {
    /// Layer stems (`head_1`, `block5_conv3`, ...) that were freshly initialized.
    pub fn fresh_layers(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .fresh
            .iter()
            .map(|n| n.rsplit_once('.').map_or(n.as_str(), |(s, _)| s).to_string())
            .collect();
        v.dedup();
        v
    }
}

/// Transfer-learning load: copy every parameter whose name and shape match,
/// initialize the rest from `init_rng`.
pub fn load_weights_permissive(
    path: impl AsRef<Path>,
    config: &ModelConfig,
    init_rng: &mut RngState,
) -> Result<(ModelWeights<f32>, ImportReport)> {
    let (_, mut tensors) = decode(&read(path.as_ref())?)?;
    let mut weights = ModelWeights::<f32>::init(config, init_rng)?;
    let mut report = ImportReport::default();
    for spec in config.param_specs() {
        match tensors.remove(&spec.name) {
            Some(t) if t.shape() == spec.shape.as_slice() => {
                weights.insert(spec.name.clone(), t);
                report.loaded.push(spec.name);
            }
            _ => report.fresh.push(spec.name),
        }
    }
    report.ignored = tensors.into_keys().collect();
    Ok((weights, report))
}
