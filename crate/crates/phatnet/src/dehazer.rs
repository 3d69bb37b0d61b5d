//! Baseline single-image dehazer: a compact three-level encoder–decoder.
//!
//! Channel widths 16 → 32 → 64 with stride-2 downsampling, a bottleneck
//! convolution, bilinear upsampling with additive skip connections, and a
//! residual head — the network predicts a correction that is added to its
//! input, so zero weights make it the (clamped) identity. The head is
//! zero-initialized, so a freshly seeded net also starts at the identity.
//! All convolutions are 3×3, activations leaky-rectified.
//!
//! The same optimizer recipe as the transfer network applies: Adam with a
//! per-step cosine-annealed learning rate, random square crops, mean-L1
//! against the clean reference, one seeded RNG with a fixed draw order
//! (epoch shuffle, then crop row and column per example).

use crate::checkpoint::{
    restore_store, store_layers, Checkpoint, CheckpointManifest, CHECKPOINT_VERSION, KIND_DEHAZER,
};
use crate::error::{PhatError, Result};
use crate::image::ImageTensor;
use crate::nn::ops::{bilinear_up2, bilinear_up2_backward, leaky_relu, leaky_relu_backward};
use crate::nn::{Adam, Conv2d, Grads, ParamStore, Scalar};
use crate::phdt::{chw_to_hwc, ensure_finite_chw, hwc_to_chw, LRELU_SLOPE};
use crate::trainer::cosine_lr;
use ndarray::{s, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Encoder base width; doubles per level.
pub const DEHAZER_BASE: usize = 16;
/// Resolution levels (full, ½, ¼).
pub const DEHAZER_LEVELS: usize = 3;
/// Input sides must divide this (two stride-2 stages must invert cleanly).
pub const DEHAZER_DIVISOR: usize = 4;

/// RGB in, RGB out.
const IMG_CHANNELS: usize = 3;

#[derive(Debug, Clone)]
struct DehazerNet {
    e0: Conv2d,
    e1: Conv2d,
    e2: Conv2d,
    mid: Conv2d,
    d1: Conv2d,
    d0: Conv2d,
    head: Conv2d,
}

impl DehazerNet {
    /// Allocation order is the forward order; with a seeded RNG this
    /// makes initialization a pure function of the seed. The residual
    /// head starts at zero, so a fresh net computes the identity and
    /// training only learns the correction.
    fn alloc<F: Scalar, R: Rng>(store: &mut ParamStore<F>, rng: &mut R) -> Self {
        let b = DEHAZER_BASE;
        let net = Self {
            e0: Conv2d::new(store, "dz.e0", IMG_CHANNELS, b, 1, rng),
            e1: Conv2d::new(store, "dz.e1", b, 2 * b, 2, rng),
            e2: Conv2d::new(store, "dz.e2", 2 * b, 4 * b, 2, rng),
            mid: Conv2d::new(store, "dz.mid", 4 * b, 4 * b, 1, rng),
            d1: Conv2d::new(store, "dz.d1", 4 * b, 2 * b, 1, rng),
            d0: Conv2d::new(store, "dz.d0", 2 * b, b, 1, rng),
            head: Conv2d::new(store, "dz.head", b, IMG_CHANNELS, 1, rng),
        };
        store.slice_mut(net.head.w).fill(F::zero());
        net
    }
}

/// Dehazer parameters (training precision).
#[derive(Debug, Clone)]
pub struct DehazerWeights {
    store: ParamStore<f32>,
    net: DehazerNet,
}

impl DehazerWeights {
    /// Fresh seeded initialization.
    pub fn init(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = DehazerNet::alloc(&mut store, &mut rng);
        Self { store, net }
    }

    /// All-zero parameters: the identity dehazer.
    pub fn zero() -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = DehazerNet::alloc(&mut store, &mut rng);
        store.data_mut().fill(0.0);
        Self { store, net }
    }

    pub fn param_count(&self) -> usize {
        self.store.len()
    }

    #[cfg(test)]
    pub(crate) fn store(&self) -> &ParamStore<f32> {
        &self.store
    }
}

/// Everything the backward pass needs: layer inputs and pre-activations.
struct DehazerCache<F> {
    x: Array3<F>,
    z0: Array3<F>,
    e0: Array3<F>,
    z1: Array3<F>,
    e1: Array3<F>,
    z2: Array3<F>,
    e2: Array3<F>,
    zm: Array3<F>,
    u1: Array3<F>,
    z3: Array3<F>,
    u0: Array3<F>,
    z4: Array3<F>,
    d0: Array3<F>,
}

fn forward_cached<F: Scalar>(
    net: &DehazerNet,
    store: &ParamStore<F>,
    x: &Array3<F>,
) -> (Array3<F>, DehazerCache<F>) {
    let z0 = net.e0.forward(store, x);
    let e0 = leaky_relu(&z0, LRELU_SLOPE);
    let z1 = net.e1.forward(store, &e0);
    let e1 = leaky_relu(&z1, LRELU_SLOPE);
    let z2 = net.e2.forward(store, &e1);
    let e2 = leaky_relu(&z2, LRELU_SLOPE);
    let zm = net.mid.forward(store, &e2);
    let mid = leaky_relu(&zm, LRELU_SLOPE);
    let u1 = bilinear_up2(&mid);
    let z3 = net.d1.forward(store, &u1);
    let d1 = &leaky_relu(&z3, LRELU_SLOPE) + &e1;
    let u0 = bilinear_up2(&d1);
    let z4 = net.d0.forward(store, &u0);
    let d0 = &leaky_relu(&z4, LRELU_SLOPE) + &e0;
    let r = net.head.forward(store, &d0);
    let y = x + &r;
    let cache = DehazerCache {
        x: x.clone(),
        z0,
        e0,
        z1,
        e1,
        z2,
        e2,
        zm,
        u1,
        z3,
        u0,
        z4,
        d0,
    };
    (y, cache)
}

/// Backpropagates `gy` through the net, accumulating into `grads`.
fn backward_cached<F: Scalar>(
    net: &DehazerNet,
    store: &ParamStore<F>,
    cache: &DehazerCache<F>,
    gy: &Array3<F>,
    grads: &mut Grads<F>,
) {
    let g_d0 = net.head.backward(store, &cache.d0, gy, grads);
    let g_z4 = leaky_relu_backward(&cache.z4, &g_d0, LRELU_SLOPE);
    let g_u0 = net.d0.backward(store, &cache.u0, &g_z4, grads);
    let g_d1 = bilinear_up2_backward(&g_u0);
    let g_z3 = leaky_relu_backward(&cache.z3, &g_d1, LRELU_SLOPE);
    let g_u1 = net.d1.backward(store, &cache.u1, &g_z3, grads);
    let g_mid = bilinear_up2_backward(&g_u1);
    let g_zm = leaky_relu_backward(&cache.zm, &g_mid, LRELU_SLOPE);
    let g_e2 = net.mid.backward(store, &cache.e2, &g_zm, grads);
    let g_z2 = leaky_relu_backward(&cache.z2, &g_e2, LRELU_SLOPE);
    // Skip connections feed the encoder activations twice.
    let g_e1 = &net.e2.backward(store, &cache.e1, &g_z2, grads) + &g_d1;
    let g_z1 = leaky_relu_backward(&cache.z1, &g_e1, LRELU_SLOPE);
    let g_e0 = &net.e1.backward(store, &cache.e0, &g_z1, grads) + &g_d0;
    let g_z0 = leaky_relu_backward(&cache.z0, &g_e0, LRELU_SLOPE);
    net.e0.backward(store, &cache.x, &g_z0, grads);
    // The residual shortcut's input gradient (gy itself) is discarded:
    // images are leaves.
}

fn check_sides(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % DEHAZER_DIVISOR != 0 || w % DEHAZER_DIVISOR != 0 {
        return Err(PhatError::Dimension(format!(
            "dehazer needs sides divisible by {DEHAZER_DIVISOR}, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Runs the dehazer at full (f64) precision and clamps to `[0, 1]`.
pub fn dehaze(input: &ImageTensor, weights: &DehazerWeights) -> Result<ImageTensor> {
    check_sides(input.height(), input.width())?;
    let store = weights.store.cast::<f64>();
    let x = hwc_to_chw::<f64>(input.data());
    let (y, _) = forward_cached(&weights.net, &store, &x);
    ensure_finite_chw(&y, "dehazer output")?;
    ImageTensor::new(chw_to_hwc(&y))
}

/// Dehazer training/fine-tuning configuration. Config files may omit
/// fields (defaults apply) but unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DehazeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub seed: u64,
    /// Side of the random square crop; `None` trains on full frames.
    pub crop_size: Option<usize>,
    pub grad_clip: Option<f64>,
}

impl Default for DehazeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 1,
            lr_init: 1e-4,
            lr_final: 1e-7,
            seed: 0,
            crop_size: Some(128),
            grad_clip: None,
        }
    }
}

impl DehazeTrainConfig {
    fn validate(&self, dataset: &[(ImageTensor, ImageTensor)]) -> Result<()> {
        if dataset.is_empty() {
            return Err(PhatError::Config("dehazer training set is empty".into()));
        }
        if self.batch_size == 0 {
            return Err(PhatError::Config("batch size must be ≥ 1".into()));
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
        if let Some(crop) = self.crop_size {
            if crop == 0 || crop % DEHAZER_DIVISOR != 0 {
                return Err(PhatError::Config(format!(
                    "crop size {crop} not divisible by {DEHAZER_DIVISOR}"
                )));
            }
        }
        for (idx, (hazy, clean)) in dataset.iter().enumerate() {
            if hazy.data().dim() != clean.data().dim() {
                return Err(PhatError::Config(format!(
                    "pair {idx}: input and reference resolutions differ"
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
                None => check_sides(hazy.height(), hazy.width())
                    .map_err(|e| PhatError::Config(format!("pair {idx}: {e}")))?,
            }
        }
        Ok(())
    }
}

/// One recorded dehazer optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DehazeHistoryRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Loss history as CSV with a header row.
pub fn dehaze_history_csv(history: &[DehazeHistoryRow]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for r in history {
        out.push_str(&format!("{},{},{}\n", r.step, r.lr, r.loss));
    }
    out
}

/// Optimizes `weights` in place on `(input, reference)` pairs with mean-L1;
/// used both for training from scratch and for fine-tuning.
pub fn train_dehazer_from(
    weights: &mut DehazerWeights,
    dataset: &[(ImageTensor, ImageTensor)],
    cfg: &DehazeTrainConfig,
) -> Result<Vec<DehazeHistoryRow>> {
    cfg.validate(dataset)?;
    let data: Vec<(Array3<f32>, Array3<f32>)> = dataset
        .iter()
        .map(|(h, c)| (hwc_to_chw::<f32>(h.data()), hwc_to_chw::<f32>(c.data())))
        .collect();
    let steps_per_epoch = (data.len() as u64).div_ceil(cfg.batch_size as u64);
    let total_steps = cfg.epochs as u64 * steps_per_epoch;
    let mut opt = Adam::new(weights.param_count());
    let mut grads = Grads::zeros_like(&weights.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(total_steps as usize);

    let crop = |x: &Array3<f32>, y0: usize, x0: usize| -> Array3<f32> {
        match cfg.crop_size {
            Some(c) => x.slice(s![.., y0..y0 + c, x0..x0 + c]).to_owned(),
            None => x.clone(),
        }
    };

    let mut step = 0u64;
    let mut perm: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    while step < total_steps {
        if cursor >= perm.len() {
            perm = (0..data.len()).collect();
            perm.shuffle(&mut rng);
            cursor = 0;
        }
        let batch_end = (cursor + cfg.batch_size).min(perm.len());
        let batch: Vec<usize> = perm[cursor..batch_end].to_vec();
        cursor = batch_end;

        grads.reset();
        let mut loss_acc = 0f64;
        for &i in &batch {
            let (_, h, w) = data[i].0.dim();
            let (cy, cx) = match cfg.crop_size {
                Some(c) => (
                    rng.random_range(0..h - c + 1),
                    rng.random_range(0..w - c + 1),
                ),
                None => (0, 0),
            };
            let input = crop(&data[i].0, cy, cx);
            let reference = crop(&data[i].1, cy, cx);
            let (y, cache) = forward_cached(&weights.net, &weights.store, &input);

            // Mean-L1 with the sign subgradient (zero at zero residual).
            let n = y.len() as f64;
            let inv_n = (1.0 / n) as f32;
            let mut gy = Array3::<f32>::zeros(y.dim());
            let mut acc = 0f64;
            ndarray::Zip::from(&mut gy)
                .and(&y)
                .and(&reference)
                .for_each(|g, &yv, &rv| {
                    let r = yv - rv;
                    acc += r.abs() as f64;
                    *g = if r > 0.0 {
                        inv_n
                    } else if r < 0.0 {
                        -inv_n
                    } else {
                        0.0
                    };
                });
            loss_acc += acc / n;
            backward_cached(&weights.net, &weights.store, &cache, &gy, &mut grads);
        }

        let nb = batch.len() as f64;
        if batch.len() > 1 {
            grads.scale((1.0 / nb) as f32);
        }
        let loss = loss_acc / nb;
        if !loss.is_finite() {
            return Err(PhatError::NumericDivergence(format!(
                "non-finite dehazer loss at step {step}"
            )));
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = grads
                .data()
                .iter()
                .map(|&g| (g as f64) * (g as f64))
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                grads.scale((clip / norm) as f32);
            }
        }
        let lr = cosine_lr(step, total_steps, cfg.lr_init, cfg.lr_final)?;
        opt.step(lr, &mut weights.store, &grads);
        if !weights.store.all_finite() {
            return Err(PhatError::NumericDivergence(format!(
                "non-finite dehazer weights after step {step}"
            )));
        }
        history.push(DehazeHistoryRow { step, lr, loss });
        step += 1;
    }
    Ok(history)
}

/// Trains a dehazer from a seeded initialization.
pub fn train_dehazer(
    dataset: &[(ImageTensor, ImageTensor)],
    cfg: &DehazeTrainConfig,
) -> Result<(DehazerWeights, Vec<DehazeHistoryRow>)> {
    let mut weights = DehazerWeights::init(cfg.seed);
    let history = train_dehazer_from(&mut weights, dataset, cfg)?;
    Ok((weights, history))
}

/// Serializes dehazer weights with the standard container.
pub fn save_dehazer(
    path: &Path,
    weights: &DehazerWeights,
    seed: u64,
    meta: BTreeMap<String, String>,
) -> Result<()> {
    let (layers, arrays) = store_layers(&weights.store);
    Checkpoint {
        manifest: CheckpointManifest {
            kind: KIND_DEHAZER.into(),
            format_version: CHECKPOINT_VERSION,
            tool_version: crate::TOOL_VERSION.into(),
            channels: DEHAZER_BASE,
            stage_count: DEHAZER_LEVELS,
            seed,
            layers,
            meta,
        },
        arrays,
    }
    .save(path)
}

/// Restores dehazer weights; the architecture is fixed, so every layer
/// must be present with its exact shape.
pub fn load_dehazer(path: &Path) -> Result<DehazerWeights> {
    let ckpt = Checkpoint::load(path)?;
    let m = &ckpt.manifest;
    if m.kind != KIND_DEHAZER {
        return Err(PhatError::Checkpoint(format!(
            "kind {:?}, expected {KIND_DEHAZER:?}",
            m.kind
        )));
    }
    if m.channels != DEHAZER_BASE || m.stage_count != DEHAZER_LEVELS {
        return Err(PhatError::Checkpoint(format!(
            "dehazer geometry {}x{} levels unsupported",
            m.channels, m.stage_count
        )));
    }
    let mut weights = DehazerWeights::zero();
    restore_store(&ckpt, &mut weights.store, |_| false)?;
    Ok(weights)
}
