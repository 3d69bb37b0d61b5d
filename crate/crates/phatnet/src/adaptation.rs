//! Test-time domain adaptation.
//!
//! Given a handful of hazy images from an unseen target domain, the
//! trained transfer network re-renders each source-domain clean image
//! under every target haze pattern (optionally with transmission edits
//! as augmentation). The resulting transferred/clean pairs form a
//! domain-specific fine-tuning set on which a baseline dehazer is
//! fine-tuned — by default for exactly one epoch at a small constant
//! learning rate. Adaptation is entirely offline: the adapted dehazer
//! has the same architecture and parameter count as the baseline, so
//! per-image inference cost is unchanged.
//!
//! The full M×N×edits enumeration is kept as an index of lazy entries;
//! images are rendered on demand (all at once only when materializing
//! or persisting the set). On disk a set is a directory of 16-bit PNGs
//! with a JSON manifest carrying content hashes for every file.

use crate::checkpoint::{sha256_bytes, sha256_file};
use crate::dehazer::{
    train_dehazer_from, DehazeHistoryRow, DehazeTrainConfig, DehazerWeights,
};
use crate::error::{PhatError, Result};
use crate::image::ImageTensor;
use crate::manifest::atomic_write;
use crate::phatnet::{transfer, PhatnetWeights, TmEdit};
use crate::pngio::{load_png, save_png16};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Augmentation edits used when none are specified: the plain transfer
/// plus two gamma remaps of the transmission latent and a vertical flip.
pub fn default_edits() -> Vec<TmEdit> {
    vec![
        TmEdit::None,
        TmEdit::Gamma(0.7),
        TmEdit::Gamma(1.5),
        TmEdit::Vflip,
    ]
}

/// One planned (target, source, edit) rendering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneEntry {
    pub target_idx: usize,
    pub source_idx: usize,
    pub edit: TmEdit,
}

/// One skipped rendering and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneFailure {
    pub target_idx: usize,
    pub source_idx: usize,
    pub edit: String,
    pub message: String,
}

/// The fine-tuning set: inputs, frozen weights, and the entry index.
/// Rendering happens lazily in [`FinetuneSet::materialize`] and friends.
pub struct FinetuneSet {
    target_hazy: Vec<ImageTensor>,
    source_clean: Vec<ImageTensor>,
    weights: PhatnetWeights,
    edits: Vec<TmEdit>,
    entries: Vec<FinetuneEntry>,
    failures: Vec<FinetuneFailure>,
}

/// Enumerates target-major, then source, then edit; incompatible
/// combinations land on the failure list instead of aborting the build.
pub fn build_finetune_set(
    target_hazy: Vec<ImageTensor>,
    source_clean: Vec<ImageTensor>,
    weights: PhatnetWeights,
    edits: &[TmEdit],
) -> Result<FinetuneSet> {
    if target_hazy.is_empty() || source_clean.is_empty() {
        return Err(PhatError::Config(
            "fine-tune set needs at least one target and one source image".into(),
        ));
    }
    if edits.is_empty() {
        return Err(PhatError::Config("edit list is empty".into()));
    }
    for e in edits {
        e.validate()?;
    }
    let divisor = weights.required_divisor();
    let mut entries = Vec::with_capacity(target_hazy.len() * source_clean.len() * edits.len());
    let mut failures = Vec::new();
    for (i, hazy) in target_hazy.iter().enumerate() {
        for (j, clean) in source_clean.iter().enumerate() {
            let problem = if hazy.data().dim() != clean.data().dim() {
                Some(format!(
                    "target {}x{} vs source {}x{}",
                    hazy.height(),
                    hazy.width(),
                    clean.height(),
                    clean.width()
                ))
            } else if hazy.height() % divisor != 0 || hazy.width() % divisor != 0 {
                Some(format!(
                    "resolution {}x{} not divisible by {divisor}",
                    hazy.height(),
                    hazy.width()
                ))
            } else {
                None
            };
            for &edit in edits {
                match &problem {
                    None => entries.push(FinetuneEntry {
                        target_idx: i,
                        source_idx: j,
                        edit,
                    }),
                    Some(msg) => failures.push(FinetuneFailure {
                        target_idx: i,
                        source_idx: j,
                        edit: edit.tag(),
                        message: msg.clone(),
                    }),
                }
            }
        }
    }
    Ok(FinetuneSet {
        target_hazy,
        source_clean,
        weights,
        edits: edits.to_vec(),
        entries,
        failures,
    })
}

impl FinetuneSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[FinetuneEntry] {
        &self.entries
    }

    pub fn failures(&self) -> &[FinetuneFailure] {
        &self.failures
    }

    pub fn source_clean(&self, j: usize) -> &ImageTensor {
        &self.source_clean[j]
    }

    /// Renders entry `k`: the transferred image and its clean reference.
    pub fn materialize(&self, k: usize) -> Result<(ImageTensor, &ImageTensor)> {
        let entry = self.entries.get(k).ok_or_else(|| {
            PhatError::Parameter(format!("entry {k} out of range ({})", self.entries.len()))
        })?;
        let transferred = transfer(
            &self.target_hazy[entry.target_idx],
            &self.source_clean[entry.source_idx],
            &self.weights,
            &entry.edit,
        )?;
        Ok((transferred, &self.source_clean[entry.source_idx]))
    }

    /// Renders every entry (in parallel) into training pairs, index order.
    pub fn materialize_all(&self) -> Result<Vec<(ImageTensor, ImageTensor)>> {
        (0..self.entries.len())
            .into_par_iter()
            .map(|k| {
                let (t, c) = self.materialize(k)?;
                Ok((t, c.clone()))
            })
            .collect()
    }

    /// Persists the set: `transferred/{i:04}_{j:04}_{edit}.png` and
    /// `clean/{j:04}.png` under `dir`, plus `manifest.json` with a
    /// content hash for every file.
    pub fn write_dir(
        &self,
        dir: &Path,
        phatnet_checkpoint_sha256: Option<String>,
    ) -> Result<FinetuneDirManifest> {
        let io_err = |p: &Path, e: std::io::Error| PhatError::Io {
            path: p.to_path_buf(),
            source: e,
        };
        let trans_dir = dir.join("transferred");
        let clean_dir = dir.join("clean");
        std::fs::create_dir_all(&trans_dir).map_err(|e| io_err(&trans_dir, e))?;
        std::fs::create_dir_all(&clean_dir).map_err(|e| io_err(&clean_dir, e))?;

        // Clean references: each used source image exactly once.
        let mut used: Vec<usize> = self.entries.iter().map(|e| e.source_idx).collect();
        used.sort_unstable();
        used.dedup();
        let mut clean_files = BTreeMap::new();
        for j in used {
            let file = format!("clean/{j:04}.png");
            let path = dir.join(&file);
            save_png16(&path, &self.source_clean[j])?;
            clean_files.insert(j, (file.clone(), sha256_file(&path)?));
        }

        // Transferred images, rendered and written in parallel.
        let rendered: Vec<FinetuneManifestEntry> = (0..self.entries.len())
            .into_par_iter()
            .map(|k| -> Result<FinetuneManifestEntry> {
                let entry = self.entries[k];
                let (transferred, _) = self.materialize(k)?;
                let file = format!(
                    "transferred/{:04}_{:04}_{}.png",
                    entry.target_idx,
                    entry.source_idx,
                    entry.edit.tag()
                );
                let path = dir.join(&file);
                save_png16(&path, &transferred)?;
                let (clean_file, clean_sha) = &clean_files[&entry.source_idx];
                Ok(FinetuneManifestEntry {
                    target_idx: entry.target_idx,
                    source_idx: entry.source_idx,
                    edit: entry.edit.tag(),
                    file: file.clone(),
                    sha256: sha256_file(&path)?,
                    clean_file: clean_file.clone(),
                    clean_sha256: clean_sha.clone(),
                })
            })
            .collect::<Result<_>>()?;

        let manifest = FinetuneDirManifest {
            kind: "finetune-set".into(),
            tool_version: crate::TOOL_VERSION.into(),
            phatnet_checkpoint_sha256,
            target_count: self.target_hazy.len(),
            source_count: self.source_clean.len(),
            edits: self.edits.iter().map(TmEdit::tag).collect(),
            target_hazy_sha256: self.target_hazy.iter().map(tensor_sha256).collect(),
            entries: rendered,
            failures: self.failures.clone(),
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)
            .map_err(|e| PhatError::Config(format!("manifest encoding: {e}")))?;
        bytes.push(b'\n');
        atomic_write(&dir.join("manifest.json"), &bytes)?;
        Ok(manifest)
    }
}

/// Content hash of an in-memory image: dimensions plus raw sample bytes.
fn tensor_sha256(img: &ImageTensor) -> String {
    let (h, w, c) = img.data().dim();
    let mut bytes = Vec::with_capacity(24 + img.data().len() * 8);
    for dim in [h, w, c] {
        bytes.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    for v in img.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    sha256_bytes(&bytes)
}

/// One rendered pair in a persisted set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneManifestEntry {
    pub target_idx: usize,
    pub source_idx: usize,
    pub edit: String,
    pub file: String,
    pub sha256: String,
    pub clean_file: String,
    pub clean_sha256: String,
}

/// `manifest.json` of a persisted fine-tuning set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneDirManifest {
    pub kind: String,
    pub tool_version: String,
    pub phatnet_checkpoint_sha256: Option<String>,
    pub target_count: usize,
    pub source_count: usize,
    pub edits: Vec<String>,
    /// Hashes of the in-memory target images the set was rendered from.
    pub target_hazy_sha256: Vec<String>,
    pub entries: Vec<FinetuneManifestEntry>,
    #[serde(default)]
    pub failures: Vec<FinetuneFailure>,
}

/// Loads a persisted set back into training pairs (manifest order),
/// verifying every file hash.
pub fn load_finetune_dir(dir: &Path) -> Result<(Vec<(ImageTensor, ImageTensor)>, FinetuneDirManifest)> {
    let manifest_path = dir.join("manifest.json");
    let bytes = std::fs::read(&manifest_path).map_err(|e| PhatError::Io {
        path: manifest_path.clone(),
        source: e,
    })?;
    let manifest: FinetuneDirManifest = serde_json::from_slice(&bytes)
        .map_err(|e| PhatError::Dataset(format!("bad fine-tune manifest: {e}")))?;
    if manifest.kind != "finetune-set" {
        return Err(PhatError::Dataset(format!(
            "manifest kind {:?}, expected \"finetune-set\"",
            manifest.kind
        )));
    }

    let verified = |file: &str, want: &str| -> Result<ImageTensor> {
        let path = dir.join(file);
        let got = sha256_file(&path)?;
        if got != want {
            return Err(PhatError::Dataset(format!(
                "content hash mismatch for {file}: manifest {want}, file {got}"
            )));
        }
        load_png(&path)
    };

    let mut clean_cache: BTreeMap<&str, ImageTensor> = BTreeMap::new();
    let mut pairs = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let transferred = verified(&e.file, &e.sha256)?;
        if !clean_cache.contains_key(e.clean_file.as_str()) {
            clean_cache.insert(&e.clean_file, verified(&e.clean_file, &e.clean_sha256)?);
        }
        pairs.push((transferred, clean_cache[e.clean_file.as_str()].clone()));
    }
    Ok((pairs, manifest))
}

/// Fine-tuning configuration; the learning rate is constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// `None` fine-tunes on full frames (the usual case: the rendered
    /// pairs are already desk-sized).
    pub crop_size: Option<usize>,
    pub grad_clip: Option<f64>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 1,
            lr: 1e-5,
            seed: 0,
            crop_size: None,
            grad_clip: None,
        }
    }
}

/// Fine-tunes a baseline dehazer on transferred/clean pairs. One epoch
/// over K pairs performs exactly ⌈K/batch⌉ update steps. The adapted
/// net keeps the baseline's architecture and parameter count.
pub fn adapt_dehazer(
    baseline: &DehazerWeights,
    pairs: &[(ImageTensor, ImageTensor)],
    cfg: &AdaptConfig,
) -> Result<(DehazerWeights, Vec<DehazeHistoryRow>)> {
    if pairs.is_empty() {
        return Err(PhatError::Config("fine-tuning set is empty".into()));
    }
    let mut adapted = baseline.clone();
    let history = train_dehazer_from(
        &mut adapted,
        pairs,
        &DehazeTrainConfig {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr_init: cfg.lr,
            lr_final: cfg.lr,
            seed: cfg.seed,
            crop_size: cfg.crop_size,
            grad_clip: cfg.grad_clip,
        },
    )?;
    assert_eq!(
        adapted.param_count(),
        baseline.param_count(),
        "adaptation must not change the architecture"
    );
    Ok((adapted, history))
}
