//! Single-file weights container.
//!
//! Layout: an 8-byte magic, a little-endian `u32` format version, a
//! length-prefixed JSON manifest, then the raw little-endian `f32` data of
//! every named array in manifest order. Contents are fully deterministic —
//! no timestamps — so identical runs write byte-identical checkpoints.
//!
//! The same container holds plain model weights ("phatnet", "dehazer") and
//! full training snapshots (model weights plus optimizer arrays and resume
//! metadata), distinguished by the manifest `kind`.

use crate::error::{PhatError, Result};
use crate::manifest::atomic_write;
use crate::nn::ParamStore;
use crate::phatnet::PhatnetWeights;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PHATCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Manifest `kind` for haze-transfer network weights.
pub const KIND_PHATNET: &str = "phatnet";
/// Manifest `kind` for a full training snapshot (weights + optimizer +
/// RNG position + history), resumable bit-exactly.
pub const KIND_PHATNET_TRAIN: &str = "phatnet-train-state";
/// Manifest `kind` for baseline dehazer weights.
pub const KIND_DEHAZER: &str = "dehazer";

/// One named array and its logical shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl LayerSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Checkpoint self-description, serialized as JSON inside the container.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    /// Model family; see the `KIND_*` constants.
    pub kind: String,
    /// Mirrors the binary header version for JSON-level readers.
    pub format_version: u32,
    pub tool_version: String,
    pub channels: usize,
    pub stage_count: usize,
    /// Seed the weights were originally initialized from.
    pub seed: u64,
    pub layers: Vec<LayerSpec>,
    /// Deterministic free-form metadata (training step, RNG position...).
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

/// An in-memory checkpoint: manifest plus one `f32` array per layer, in
/// manifest order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub arrays: Vec<Vec<f32>>,
}

fn corrupt(path: &Path, what: impl std::fmt::Display) -> PhatError {
    PhatError::Checkpoint(format!("{}: {what}", path.display()))
}

impl Checkpoint {
    /// The array stored under `name`, if present.
    pub fn array(&self, name: &str) -> Option<&[f32]> {
        self.manifest
            .layers
            .iter()
            .position(|l| l.name == name)
            .map(|i| self.arrays[i].as_slice())
    }

    fn check_consistency(&self) -> Result<()> {
        if self.arrays.len() != self.manifest.layers.len() {
            return Err(PhatError::Checkpoint(format!(
                "{} layers declared but {} arrays present",
                self.manifest.layers.len(),
                self.arrays.len()
            )));
        }
        for (spec, arr) in self.manifest.layers.iter().zip(&self.arrays) {
            if spec.len() != arr.len() {
                return Err(PhatError::Checkpoint(format!(
                    "layer {} declares shape {:?} but holds {} values",
                    spec.name,
                    spec.shape,
                    arr.len()
                )));
            }
        }
        Ok(())
    }

    /// Serializes the container and writes it atomically.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.check_consistency()?;
        let manifest_json = serde_json::to_vec(&self.manifest)
            .map_err(|e| PhatError::Checkpoint(format!("manifest serialization failed: {e}")))?;
        let data_len: usize = self.arrays.iter().map(|a| a.len() * 4).sum();
        let mut bytes =
            Vec::with_capacity(8 + 4 + 8 + manifest_json.len() + data_len);
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&manifest_json);
        for arr in &self.arrays {
            for v in arr {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        atomic_write(path, &bytes)
    }

    /// Reads and validates a container. A missing or unopenable file is an
    /// I/O error; everything past `open` is reported as a checkpoint error.
    pub fn load(path: &Path) -> Result<Self> {
        let mut file = fs::File::open(path).map_err(|source| PhatError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)
            .map_err(|e| corrupt(path, format!("read failed: {e}")))?;
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt(path, "not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(
                path,
                format!("format version {version}, expected {CHECKPOINT_VERSION}"),
            ));
        }
        let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let data_start = 20usize
            .checked_add(manifest_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt(path, "truncated manifest"))?;
        let manifest: CheckpointManifest = serde_json::from_slice(&bytes[20..data_start])
            .map_err(|e| corrupt(path, format!("malformed manifest: {e}")))?;
        if manifest.format_version != version {
            return Err(corrupt(path, "manifest/header version disagree"));
        }

        let mut arrays = Vec::with_capacity(manifest.layers.len());
        let mut offset = data_start;
        for spec in &manifest.layers {
            let nbytes = spec.len() * 4;
            let end = offset
                .checked_add(nbytes)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| corrupt(path, format!("truncated data for layer {}", spec.name)))?;
            let arr: Vec<f32> = bytes[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push(arr);
            offset = end;
        }
        if offset != bytes.len() {
            return Err(corrupt(path, "trailing bytes after last layer"));
        }
        let ckpt = Self { manifest, arrays };
        ckpt.check_consistency()?;
        Ok(ckpt)
    }
}

/// Snapshot of a parameter store as manifest layers + arrays.
pub(crate) fn store_layers(store: &ParamStore<f32>) -> (Vec<LayerSpec>, Vec<Vec<f32>>) {
    let layers = store
        .segments()
        .iter()
        .map(|s| LayerSpec {
            name: s.name.clone(),
            shape: s.shape.clone(),
        })
        .collect();
    let arrays = store
        .segment_ids()
        .map(|id| store.slice(id).to_vec())
        .collect();
    (layers, arrays)
}

/// Copies checkpoint arrays into a parameter store by name, requiring
/// exact one-to-one coverage. Layers matching `skip` are left to the
/// caller (optimizer state in training snapshots).
pub(crate) fn restore_store(
    ckpt: &Checkpoint,
    store: &mut ParamStore<f32>,
    skip: impl Fn(&str) -> bool,
) -> Result<()> {
    let mut covered = vec![false; store.segments().len()];
    for (spec, arr) in ckpt.manifest.layers.iter().zip(&ckpt.arrays) {
        if skip(&spec.name) {
            continue;
        }
        let pos = store
            .segments()
            .iter()
            .position(|s| s.name == spec.name)
            .ok_or_else(|| {
                PhatError::Checkpoint(format!("unknown parameter {}", spec.name))
            })?;
        // Duplicate names would silently shadow; reject them.
        if covered[pos] {
            return Err(PhatError::Checkpoint(format!(
                "duplicate parameter {}",
                spec.name
            )));
        }
        let id = store.find(&spec.name).expect("position found above");
        let seg = store.segment(id);
        if seg.shape != spec.shape {
            return Err(PhatError::Checkpoint(format!(
                "parameter {} has shape {:?}, expected {:?}",
                spec.name, spec.shape, seg.shape
            )));
        }
        covered[pos] = true;
        store.slice_mut(id).copy_from_slice(arr);
    }
    for (seg, done) in store.segments().iter().zip(&covered) {
        if !done {
            return Err(PhatError::Checkpoint(format!(
                "parameter {} missing from checkpoint",
                seg.name
            )));
        }
    }
    Ok(())
}

/// Builds the in-memory checkpoint of a haze-transfer network.
pub(crate) fn phatnet_to_checkpoint(
    w: &PhatnetWeights,
    seed: u64,
    meta: BTreeMap<String, String>,
) -> Checkpoint {
    let (layers, arrays) = store_layers(w.store());
    Checkpoint {
        manifest: CheckpointManifest {
            kind: KIND_PHATNET.into(),
            format_version: CHECKPOINT_VERSION,
            tool_version: crate::TOOL_VERSION.into(),
            channels: w.channels(),
            stage_count: w.stage_count(),
            seed,
            layers,
            meta,
        },
        arrays,
    }
}

/// Rebuilds network weights from a loaded checkpoint, verifying kind,
/// geometry, and complete parameter coverage.
pub(crate) fn phatnet_from_checkpoint(ckpt: &Checkpoint) -> Result<PhatnetWeights> {
    let m = &ckpt.manifest;
    if m.kind != KIND_PHATNET && m.kind != KIND_PHATNET_TRAIN {
        return Err(PhatError::Checkpoint(format!(
            "kind {:?}, expected {KIND_PHATNET:?}",
            m.kind
        )));
    }
    let mut w = PhatnetWeights::init(m.stage_count, m.channels, m.seed)
        .map_err(|e| PhatError::Checkpoint(format!("incompatible geometry: {e}")))?;
    restore_store(ckpt, w.store_mut(), |name| !name.starts_with("st"))?;
    Ok(w)
}

/// Writes a weights-only checkpoint.
pub fn save_phatnet(path: &Path, w: &PhatnetWeights, seed: u64) -> Result<()> {
    phatnet_to_checkpoint(w, seed, BTreeMap::new()).save(path)
}

/// Loads network weights, accepting both weights-only checkpoints and full
/// training snapshots.
pub fn load_phatnet(path: &Path) -> Result<PhatnetWeights> {
    phatnet_from_checkpoint(&Checkpoint::load(path)?)
}

/// Hex SHA-256 of a file's bytes, as recorded in run manifests.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).map_err(|source| PhatError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher).map_err(|source| PhatError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(hex::encode(hasher.finalize()))
}

/// Hex SHA-256 of an in-memory buffer.
pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
