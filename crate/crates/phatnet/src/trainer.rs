//! Optimization loop for the haze-transfer network.
//!
//! Adam at batch size 1 (configurable), a per-step cosine-annealed
//! learning rate, random square crops, and a two-branch objective: the
//! haze-transfer-consistency loss on each paired hazy/clean example plus
//! the content-leakage loss on a uniformly drawn unpaired clean image.
//!
//! Everything is driven by one seeded RNG with a fixed draw order
//! (epoch shuffle; then per example: crop row, crop column, unpaired
//! index, unpaired crop row, unpaired crop column), so a seed pins the
//! entire run bit-for-bit, and a training snapshot — weights, optimizer
//! moments, RNG position, permutation cursor, history — resumes it
//! exactly.

use crate::checkpoint::{
    restore_store, store_layers, Checkpoint, CheckpointManifest, LayerSpec, CHECKPOINT_VERSION,
    KIND_PHATNET_TRAIN,
};
use crate::error::{PhatError, Result};
use crate::image::ImageTensor;
use crate::losses::multiscale_l1_with_grad;
use crate::nn::{Adam, Grads};
use crate::phatnet::{train_backward, train_forward, PhatnetWeights};
use crate::phdt::hwc_to_chw;
use ndarray::{s, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Full training configuration; serialized into snapshots and manifests.
/// Config files may omit fields (defaults apply) but unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub seed: u64,
    pub stage_count: usize,
    pub channels: usize,
    /// Epochs between periodic snapshots; 0 disables them.
    pub checkpoint_every: usize,
    /// Side of the random square crop; `None` trains on full frames.
    pub crop_size: Option<usize>,
    /// How many random crops each pair contributes per epoch; with crops
    /// smaller than the frames, one pass over the data covers only a
    /// fraction of each image, so epochs sample several windows per pair.
    pub crops_per_pair: usize,
    /// Content-leakage branch toggle (ablation switch).
    pub cl_enabled: bool,
    /// Optional global L2 gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Where periodic and divergence-diagnostic snapshots go.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 1,
            lr_init: 3e-4,
            lr_final: 1e-7,
            seed: 0,
            stage_count: crate::phatnet::DEFAULT_STAGES,
            channels: crate::phdt::DEFAULT_CHANNELS,
            checkpoint_every: 0,
            crop_size: Some(128),
            crops_per_pair: 1,
            cl_enabled: true,
            grad_clip: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self, dataset: &[(ImageTensor, ImageTensor)]) -> Result<()> {
        if dataset.len() < 2 {
            return Err(PhatError::Config(format!(
                "training needs at least 2 pairs (unpaired branch), got {}",
                dataset.len()
            )));
        }
        if self.batch_size == 0 {
            return Err(PhatError::Config("batch size must be ≥ 1".into()));
        }
        if self.crops_per_pair == 0 {
            return Err(PhatError::Config("crops per pair must be ≥ 1".into()));
        }
        if !(self.lr_init.is_finite() && self.lr_final.is_finite())
            || self.lr_init < 0.0
            || self.lr_final < 0.0
            || self.lr_final > self.lr_init
        {
            return Err(PhatError::Config(format!(
                "learning rates must satisfy 0 ≤ final ≤ init, got init {} final {}",
                self.lr_init, self.lr_final
            )));
        }
        let divisor = crate::phdt::LATENT_FACTOR << (self.stage_count.max(1) - 1);
        if let Some(crop) = self.crop_size {
            if crop == 0 || crop % divisor != 0 {
                return Err(PhatError::Config(format!(
                    "crop size {crop} not divisible by {divisor}"
                )));
            }
        }
        for (idx, (hazy, clean)) in dataset.iter().enumerate() {
            if hazy.data().dim() != clean.data().dim() {
                return Err(PhatError::Config(format!(
                    "pair {idx}: hazy and clean resolutions differ"
                )));
            }
            match self.crop_size {
                Some(crop) => {
                    if hazy.height() < crop || hazy.width() < crop {
                        return Err(PhatError::Config(format!(
                            "pair {idx}: image {}x{} smaller than crop {crop}",
                            hazy.height(),
                            hazy.width()
                        )));
                    }
                }
                None => {
                    if hazy.height() % divisor != 0 || hazy.width() % divisor != 0 {
                        return Err(PhatError::Config(format!(
                            "pair {idx}: full-frame training needs sides divisible by {divisor}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One recorded training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: u64,
    pub lr: f64,
    pub htc: f64,
    pub cl: f64,
    pub total: f64,
}

/// Cosine-annealed learning rate, evaluated per step.
///
/// Algebraically `lr_final + ½·(lr_init − lr_final)·(1 + cos(π·step/total))`,
/// computed in the lerp form `lr_init·w + lr_final·(1 − w)` so both
/// endpoints are reproduced bit-exactly.
pub fn cosine_lr(step: u64, total_steps: u64, lr_init: f64, lr_final: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(PhatError::Parameter(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    let w = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos());
    Ok(lr_init * w + lr_final * (1.0 - w))
}

/// A resumable training run over an in-memory paired dataset.
pub struct Trainer {
    cfg: TrainConfig,
    data: Vec<(Array3<f32>, Array3<f32>)>,
    weights: PhatnetWeights,
    opt: Adam<f32>,
    grads: Grads<f32>,
    rng: ChaCha8Rng,
    step: u64,
    total_steps: u64,
    steps_per_epoch: u64,
    perm: Vec<usize>,
    cursor: usize,
    history: Vec<HistoryRow>,
}

impl Trainer {
    pub fn new(dataset: &[(ImageTensor, ImageTensor)], cfg: TrainConfig) -> Result<Self> {
        cfg.validate(dataset)?;
        let weights = PhatnetWeights::init(cfg.stage_count, cfg.channels, cfg.seed)?;
        let data = dataset
            .iter()
            .map(|(h, c)| (hwc_to_chw::<f32>(h.data()), hwc_to_chw::<f32>(c.data())))
            .collect::<Vec<_>>();
        let draws_per_epoch = dataset.len() as u64 * cfg.crops_per_pair as u64;
        let steps_per_epoch = draws_per_epoch.div_ceil(cfg.batch_size as u64);
        let total_steps = cfg.epochs as u64 * steps_per_epoch;
        let opt = Adam::new(weights.param_count());
        let grads = Grads::zeros_like(weights.store());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            cfg,
            data,
            weights,
            opt,
            grads,
            rng,
            step: 0,
            total_steps,
            steps_per_epoch,
            perm: Vec::new(),
            cursor: 0,
            history: Vec::new(),
        })
    }

    pub fn weights(&self) -> &PhatnetWeights {
        &self.weights
    }

    pub fn into_weights(self) -> PhatnetWeights {
        self.weights
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.history
    }

    /// Loss history as CSV with a header row.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("step,lr,htc,cl,total\n");
        for r in &self.history {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.lr, r.htc, r.cl, r.total
            ));
        }
        out
    }

    fn draw_crop(&mut self, h: usize, w: usize) -> (usize, usize) {
        match self.cfg.crop_size {
            Some(c) => (
                self.rng.random_range(0..h - c + 1),
                self.rng.random_range(0..w - c + 1),
            ),
            None => (0, 0),
        }
    }

    fn crop(&self, x: &Array3<f32>, y0: usize, x0: usize) -> Array3<f32> {
        match self.cfg.crop_size {
            Some(c) => x.slice(s![.., y0..y0 + c, x0..x0 + c]).to_owned(),
            None => x.clone(),
        }
    }

    /// Runs one optimization step (one batch). Caller guarantees
    /// `self.step < self.total_steps`.
    fn one_step(&mut self) -> Result<()> {
        if self.cursor >= self.perm.len() {
            self.perm = (0..self.data.len())
                .flat_map(|i| std::iter::repeat_n(i, self.cfg.crops_per_pair))
                .collect();
            self.perm.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let batch_end = (self.cursor + self.cfg.batch_size).min(self.perm.len());
        let batch: Vec<usize> = self.perm[self.cursor..batch_end].to_vec();
        self.cursor = batch_end;

        self.grads.reset();
        let mut htc_acc = 0f64;
        let mut cl_acc = 0f64;
        for &i in &batch {
            let (h, w) = {
                let d = self.data[i].0.dim();
                (d.1, d.2)
            };
            let (cy, cx) = self.draw_crop(h, w);
            let hazy = self.crop(&self.data[i].0, cy, cx);
            let clean = self.crop(&self.data[i].1, cy, cx);

            let pass = train_forward(self.weights.stages(), self.weights.store(), &hazy, &clean);
            let (scales, gouts) = multiscale_l1_with_grad(&pass.outs, &hazy);
            train_backward(
                self.weights.stages(),
                self.weights.store(),
                &pass,
                &gouts,
                &mut self.grads,
            );
            htc_acc += scales.iter().map(|v| *v as f64).sum::<f64>();

            if self.cfg.cl_enabled {
                // Unpaired clean content image j ≠ i, uniform.
                let mut j = self.rng.random_range(0..self.data.len() - 1);
                if j >= i {
                    j += 1;
                }
                let (jh, jw) = {
                    let d = self.data[j].1.dim();
                    (d.1, d.2)
                };
                let (jy, jx) = self.draw_crop(jh, jw);
                let clean_j = self.crop(&self.data[j].1, jy, jx);

                // The clean input reuses image i's window; only j gets a
                // fresh one.
                let pass = train_forward(
                    self.weights.stages(),
                    self.weights.store(),
                    &clean,
                    &clean_j,
                );
                let (scales, gouts) = multiscale_l1_with_grad(&pass.outs, &clean_j);
                train_backward(
                    self.weights.stages(),
                    self.weights.store(),
                    &pass,
                    &gouts,
                    &mut self.grads,
                );
                cl_acc += scales.iter().map(|v| *v as f64).sum::<f64>();
            }
        }

        let n = batch.len() as f64;
        if batch.len() > 1 {
            self.grads.scale((1.0 / n) as f32);
        }
        htc_acc /= n;
        cl_acc /= n;
        let total = htc_acc + cl_acc;
        if !total.is_finite() {
            return self.diverged(format!("non-finite loss at step {}", self.step));
        }
        if let Some(clip) = self.cfg.grad_clip {
            let norm = self
                .grads
                .data()
                .iter()
                .map(|&g| (g as f64) * (g as f64))
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                self.grads.scale((clip / norm) as f32);
            }
        }

        let lr = cosine_lr(self.step, self.total_steps, self.cfg.lr_init, self.cfg.lr_final)?;
        self.opt.step(lr, self.weights.store_mut(), &self.grads);
        if !self.weights.store().all_finite() {
            return self.diverged(format!("non-finite weights after step {}", self.step));
        }
        self.history.push(HistoryRow {
            step: self.step,
            lr,
            htc: htc_acc,
            cl: cl_acc,
            total,
        });
        self.step += 1;
        Ok(())
    }

    fn diverged(&self, message: String) -> Result<()> {
        if let Some(dir) = &self.cfg.checkpoint_dir {
            // Best-effort diagnostic snapshot; the divergence error wins.
            let _ = self.save_snapshot(&dir.join("diverged.ckpt"));
        }
        Err(PhatError::NumericDivergence(message))
    }

    /// Advances up to `n` steps (stops at the schedule end).
    pub fn run_steps(&mut self, n: u64) -> Result<()> {
        let stop = (self.step + n).min(self.total_steps);
        while self.step < stop {
            self.one_step()?;
            self.maybe_periodic_snapshot()?;
        }
        Ok(())
    }

    /// Runs the remaining schedule to completion.
    pub fn run(&mut self) -> Result<()> {
        self.run_steps(self.total_steps)
    }

    fn maybe_periodic_snapshot(&self) -> Result<()> {
        let every = self.cfg.checkpoint_every as u64;
        if every == 0 || self.step % (every * self.steps_per_epoch) != 0 {
            return Ok(());
        }
        if let Some(dir) = &self.cfg.checkpoint_dir {
            let epoch = self.step / self.steps_per_epoch;
            self.save_snapshot(&dir.join(format!("snapshot-e{epoch:04}.ckpt")))?;
        }
        Ok(())
    }

    /// Writes a full training snapshot (weights, optimizer, RNG position,
    /// permutation cursor, history) resumable bit-exactly.
    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let (mut layers, mut arrays) = store_layers(self.weights.store());
        layers.push(LayerSpec {
            name: "opt.m".into(),
            shape: vec![self.opt.first_moment().len()],
        });
        arrays.push(self.opt.first_moment().to_vec());
        layers.push(LayerSpec {
            name: "opt.v".into(),
            shape: vec![self.opt.second_moment().len()],
        });
        arrays.push(self.opt.second_moment().to_vec());

        let mut meta = BTreeMap::new();
        let json_err =
            |e: serde_json::Error| PhatError::Checkpoint(format!("snapshot encoding: {e}"));
        meta.insert("step".into(), self.step.to_string());
        meta.insert("total_steps".into(), self.total_steps.to_string());
        meta.insert("adam_steps".into(), self.opt.steps.to_string());
        meta.insert("rng_word_pos".into(), self.rng.get_word_pos().to_string());
        meta.insert("perm_cursor".into(), self.cursor.to_string());
        meta.insert(
            "perm".into(),
            serde_json::to_string(&self.perm).map_err(json_err)?,
        );
        meta.insert("dataset_len".into(), self.data.len().to_string());
        meta.insert(
            "config".into(),
            serde_json::to_string(&self.cfg).map_err(json_err)?,
        );
        meta.insert(
            "history".into(),
            serde_json::to_string(&self.history).map_err(json_err)?,
        );

        Checkpoint {
            manifest: CheckpointManifest {
                kind: KIND_PHATNET_TRAIN.into(),
                format_version: CHECKPOINT_VERSION,
                tool_version: crate::TOOL_VERSION.into(),
                channels: self.cfg.channels,
                stage_count: self.cfg.stage_count,
                seed: self.cfg.seed,
                layers,
                meta,
            },
            arrays,
        }
        .save(path)
    }

    /// Rebuilds a trainer from a snapshot; `dataset` must be the same
    /// paired set the snapshot was taken with.
    pub fn load_snapshot(path: &Path, dataset: &[(ImageTensor, ImageTensor)]) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.manifest.kind != KIND_PHATNET_TRAIN {
            return Err(PhatError::Checkpoint(format!(
                "kind {:?}, expected {KIND_PHATNET_TRAIN:?}",
                ckpt.manifest.kind
            )));
        }
        let meta = &ckpt.manifest.meta;
        let get = |key: &str| -> Result<&String> {
            meta.get(key)
                .ok_or_else(|| PhatError::Checkpoint(format!("snapshot missing meta key {key}")))
        };
        let parse_u64 = |key: &str| -> Result<u64> {
            get(key)?
                .parse()
                .map_err(|e| PhatError::Checkpoint(format!("bad meta {key}: {e}")))
        };
        let cfg: TrainConfig = serde_json::from_str(get("config")?)
            .map_err(|e| PhatError::Checkpoint(format!("bad embedded config: {e}")))?;
        let dataset_len: usize = parse_u64("dataset_len")? as usize;
        if dataset.len() != dataset_len {
            return Err(PhatError::Config(format!(
                "snapshot was trained on {dataset_len} pairs, got {}",
                dataset.len()
            )));
        }

        let mut trainer = Trainer::new(dataset, cfg)?;
        restore_store(&ckpt, trainer.weights.store_mut(), |n| {
            !n.starts_with("st")
        })?;
        let m = ckpt
            .array("opt.m")
            .ok_or_else(|| PhatError::Checkpoint("snapshot missing opt.m".into()))?
            .to_vec();
        let v = ckpt
            .array("opt.v")
            .ok_or_else(|| PhatError::Checkpoint("snapshot missing opt.v".into()))?
            .to_vec();
        if m.len() != trainer.weights.param_count() || v.len() != trainer.weights.param_count() {
            return Err(PhatError::Checkpoint(
                "optimizer state length mismatch".into(),
            ));
        }
        trainer.opt.restore(parse_u64("adam_steps")?, m, v);
        let word_pos: u128 = get("rng_word_pos")?
            .parse()
            .map_err(|e| PhatError::Checkpoint(format!("bad rng position: {e}")))?;
        trainer.rng.set_word_pos(word_pos);
        trainer.step = parse_u64("step")?;
        trainer.total_steps = parse_u64("total_steps")?;
        trainer.cursor = parse_u64("perm_cursor")? as usize;
        trainer.perm = serde_json::from_str(get("perm")?)
            .map_err(|e| PhatError::Checkpoint(format!("bad permutation: {e}")))?;
        trainer.history = serde_json::from_str(get("history")?)
            .map_err(|e| PhatError::Checkpoint(format!("bad history: {e}")))?;
        Ok(trainer)
    }
}

/// Convenience wrapper: train to completion and return the weights.
pub fn train(dataset: &[(ImageTensor, ImageTensor)], cfg: TrainConfig) -> Result<PhatnetWeights> {
    let mut t = Trainer::new(dataset, cfg)?;
    t.run()?;
    Ok(t.into_weights())
}
