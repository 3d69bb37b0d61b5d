//! The multi-scale haze-transfer network.
//!
//! `S` independent disentanglement blocks (default 3) run coarse-to-fine
//! over bilinear image pyramids; each finer stage adds its own prediction
//! to the ×2-upsampled output of the next-coarser one:
//!
//! ```text
//! o[S−1] = Block[S−1](H↓^{S−1}, C↓^{S−1})
//! o[s]   = Block[s](H↓^s, C↓^s) + UP(o[s+1])
//! ```
//!
//! Stage outputs stay unclamped internally so the training losses see the
//! network's raw predictions; [`transfer`] clamps the finest scale at the
//! public image boundary. A [`TmEdit`] manipulates the transmission latent
//! `F^TM` inside every stage's fusion, giving parametric control over the
//! transferred haze after training.

use crate::error::{PhatError, Result};
use crate::image::ImageTensor;
use crate::losses::multiscale_l1_with_grad;
use crate::nn::ops::{bilinear_down2, bilinear_up2, bilinear_up2_backward};
use crate::nn::{Grads, ParamStore, Scalar};
use crate::phdt::{
    chw_to_hwc, core_encode_latents, ensure_finite_chw, hwc_to_chw, phdt_core_backward,
    phdt_core_forward, phdt_core_infer, AtmosphericLightVector, LatentFeatures, PhdtCache,
    PhdtCore, LATENT_FACTOR,
};
use ndarray::{s, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Default number of scales.
pub const DEFAULT_STAGES: usize = 3;
/// Largest supported number of scales.
pub const MAX_STAGES: usize = 3;

// ---------------------------------------------------------------------------
// Latent edits
// ---------------------------------------------------------------------------

/// Parametric manipulation of the transmission latent, applied at every
/// stage between encoding and fusion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TmEdit {
    /// Leave `F^TM` untouched.
    None,
    /// `F^TM ↦ (F^TM)^γ` with γ > 0: γ > 1 deepens the transferred haze,
    /// γ < 1 thins it. γ = 1 is bit-exactly a no-op.
    Gamma(f64),
    /// Flip `F^TM` vertically (its own inverse).
    Vflip,
}

impl TmEdit {
    /// Rejects non-positive or non-finite gamma.
    pub fn validate(&self) -> Result<()> {
        if let TmEdit::Gamma(g) = self {
            if !g.is_finite() || *g <= 0.0 {
                return Err(PhatError::Parameter(format!(
                    "gamma must be positive and finite, got {g}"
                )));
            }
        }
        Ok(())
    }

    /// Filename-safe tag used in fine-tuning set layouts and manifests.
    pub fn tag(&self) -> String {
        match self {
            TmEdit::None => "none".into(),
            TmEdit::Gamma(g) => format!("gamma{g:.2}"),
            TmEdit::Vflip => "vflip".into(),
        }
    }

    /// Applies the edit to a C×H×W transmission latent.
    pub(crate) fn apply_chw<F: Scalar>(&self, ftm: Array3<F>) -> Array3<F> {
        match self {
            TmEdit::None => ftm,
            TmEdit::Gamma(g) if *g == 1.0 => ftm,
            TmEdit::Gamma(g) => {
                let g = F::from_f64(*g);
                ftm.mapv(|v| v.powf(g))
            }
            TmEdit::Vflip => ftm.slice(s![.., ..;-1, ..]).to_owned(),
        }
    }
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

/// Weights of the full multi-scale network: one independent block per
/// stage, all in a single parameter store under `st{s}.`-prefixed names.
/// Stage 0 is the finest scale.
///
/// Parameters are stored at `f32` (the training precision); public
/// operations widen to `f64` (exact) before computing.
#[derive(Debug, Clone)]
pub struct PhatnetWeights {
    store: ParamStore<f32>,
    stages: Vec<PhdtCore>,
    channels: usize,
}

impl PhatnetWeights {
    /// Fresh seeded initialization of `stage_count` blocks.
    pub fn init(stage_count: usize, channels: usize, seed: u64) -> Result<Self> {
        if stage_count == 0 || stage_count > MAX_STAGES {
            return Err(PhatError::Parameter(format!(
                "stage count must be in 1..={MAX_STAGES}, got {stage_count}"
            )));
        }
        if channels == 0 {
            return Err(PhatError::Parameter("channel count must be ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f32>::new();
        let stages = (0..stage_count)
            .map(|s| PhdtCore::alloc(&mut store, &format!("st{s}"), channels, &mut rng))
            .collect();
        Ok(Self {
            store,
            stages,
            channels,
        })
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn param_count(&self) -> usize {
        self.store.len()
    }

    /// Smallest value H and W must both be divisible by: the finest stage
    /// needs ×8 latents and every coarser stage halves once more.
    pub fn required_divisor(&self) -> usize {
        LATENT_FACTOR << (self.stage_count() - 1)
    }

    /// Sets every parameter to zero (degenerate configuration used in
    /// tests and identity checks).
    pub fn zero(&mut self) {
        self.store.data_mut().fill(0.0);
    }

    /// Flat copy of every parameter, widened to `f64`. The ordering is
    /// stable for a given architecture and matches the gradient layout of
    /// [`training_loss_and_grad`].
    pub fn export_params(&self) -> Vec<f64> {
        self.store.data().iter().map(|&v| v as f64).collect()
    }

    /// Overwrites every parameter from a flat slice (narrowing to the `f32`
    /// storage precision). The length must match [`Self::param_count`].
    pub fn import_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.store.len() {
            return Err(PhatError::Dimension(format!(
                "expected {} parameters, got {}",
                self.store.len(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite() || v.abs() > f32::MAX as f64) {
            return Err(PhatError::Parameter(
                "parameters must be finite and representable at f32".into(),
            ));
        }
        for (dst, &src) in self.store.data_mut().iter_mut().zip(params) {
            *dst = src as f32;
        }
        Ok(())
    }

    pub(crate) fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub(crate) fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    pub(crate) fn stages(&self) -> &[PhdtCore] {
        &self.stages
    }

    pub(crate) fn store_f64(&self) -> ParamStore<f64> {
        self.store.cast::<f64>()
    }

    fn check_inputs(&self, hazy: &ImageTensor, clean: &ImageTensor) -> Result<()> {
        if hazy.data().dim() != clean.data().dim() {
            return Err(PhatError::Dimension(format!(
                "hazy {:?} vs clean {:?} shape mismatch",
                hazy.data().dim(),
                clean.data().dim()
            )));
        }
        self.check_resolution(hazy)
    }

    fn check_resolution(&self, img: &ImageTensor) -> Result<()> {
        let div = self.required_divisor();
        if img.height() % div != 0 || img.width() % div != 0 {
            return Err(PhatError::Dimension(format!(
                "input {}x{} not divisible by {div} (needed for {} scales)",
                img.height(),
                img.width(),
                self.stage_count()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Public operations (f64)
// ---------------------------------------------------------------------------

/// Raw multi-scale predictions, finest first, h×w×3 each.
///
/// Values stay unclamped so losses see actual network output; clamping
/// into image range happens only in [`transfer`].
#[derive(Debug, Clone)]
pub struct MultiScaleOutput {
    outputs: Vec<Array3<f64>>,
}

impl MultiScaleOutput {
    pub(crate) fn new(outputs: Vec<Array3<f64>>) -> Self {
        Self { outputs }
    }

    pub fn scale_count(&self) -> usize {
        self.outputs.len()
    }

    /// Finest-first stage outputs; `outputs()[s]` has shape (H/2ˢ, W/2ˢ, 3).
    pub fn outputs(&self) -> &[Array3<f64>] {
        &self.outputs
    }

    pub fn finest(&self) -> &Array3<f64> {
        &self.outputs[0]
    }
}

/// Full multi-scale forward pass.
///
/// Builds bilinear ×1/2 pyramids of both inputs, runs the coarsest block
/// first and adds each finer block's prediction to the ×2-upsampled
/// running output. The edit is applied inside every stage.
pub fn forward(
    hazy: &ImageTensor,
    clean: &ImageTensor,
    w: &PhatnetWeights,
    edit: &TmEdit,
) -> Result<MultiScaleOutput> {
    edit.validate()?;
    w.check_inputs(hazy, clean)?;
    let store = w.store_f64();
    let s_count = w.stage_count();

    let mut hazy_pyr = vec![hwc_to_chw::<f64>(hazy.data())];
    let mut clean_pyr = vec![hwc_to_chw::<f64>(clean.data())];
    for s in 1..s_count {
        hazy_pyr.push(bilinear_down2(&hazy_pyr[s - 1]));
        clean_pyr.push(bilinear_down2(&clean_pyr[s - 1]));
    }

    let mut coarse_first: Vec<Array3<f64>> = Vec::with_capacity(s_count);
    for s in (0..s_count).rev() {
        let mut o = phdt_core_infer(&w.stages[s], &store, &hazy_pyr[s], &clean_pyr[s], |t| {
            edit.apply_chw(t)
        });
        if let Some(prev) = coarse_first.last() {
            o += &bilinear_up2(prev);
        }
        ensure_finite_chw(&o, "multi-scale stage output")?;
        coarse_first.push(o);
    }
    coarse_first.reverse();
    Ok(MultiScaleOutput::new(
        coarse_first.iter().map(chw_to_hwc).collect(),
    ))
}

/// Haze transfer: the finest-scale output clamped into image range.
pub fn transfer(
    hazy: &ImageTensor,
    clean: &ImageTensor,
    w: &PhatnetWeights,
    edit: &TmEdit,
) -> Result<ImageTensor> {
    let out = forward(hazy, clean, w, edit)?;
    ImageTensor::new(out.finest().clone())
}

/// Haze latents of one stage, for diagnostics.
#[derive(Debug, Clone)]
pub struct StageLatents {
    /// Pooled atmospheric-light feature vector.
    pub fal: AtmosphericLightVector,
    /// Transmission latent after the requested edit, h×w×C.
    pub ftm: LatentFeatures,
}

/// Runs only the haze encoders of every stage on `hazy`'s pyramid.
/// The content image plays no part, so diagnostics need a single input.
pub fn inspect_latents(
    hazy: &ImageTensor,
    w: &PhatnetWeights,
    edit: &TmEdit,
) -> Result<Vec<StageLatents>> {
    edit.validate()?;
    w.check_resolution(hazy)?;
    let store = w.store_f64();
    let mut level = hwc_to_chw::<f64>(hazy.data());
    let mut latents = Vec::with_capacity(w.stage_count());
    for s in 0..w.stage_count() {
        if s > 0 {
            level = bilinear_down2(&level);
        }
        let (fal, ftm) =
            core_encode_latents(&w.stages[s], &store, &level, |t| edit.apply_chw(t));
        latents.push(StageLatents {
            fal: AtmosphericLightVector::new(fal)?,
            ftm: LatentFeatures::new(chw_to_hwc(&ftm))?,
        });
    }
    Ok(latents)
}

/// Training objective and its full parameter gradient for one example, at
/// `f64` throughout — a verification hook in the spirit of the gradcheck
/// utilities that ship with autodiff frameworks.
///
/// The objective is the haze-transfer-consistency loss of
/// `forward(hazy, clean)` against `hazy`; when `unpaired` is given, the
/// content-leakage term of `forward(clean, unpaired)` against `unpaired`
/// is added, mirroring one training example exactly. The gradient layout
/// matches [`PhatnetWeights::export_params`].
pub fn training_loss_and_grad(
    hazy: &ImageTensor,
    clean: &ImageTensor,
    unpaired: Option<&ImageTensor>,
    w: &PhatnetWeights,
) -> Result<(f64, Vec<f64>)> {
    w.check_inputs(hazy, clean)?;
    let store = w.store_f64();
    let mut grads = Grads::zeros_like(&store);
    let mut loss = 0.0;

    let hazy_chw = hwc_to_chw::<f64>(hazy.data());
    let clean_chw = hwc_to_chw::<f64>(clean.data());
    let pass = train_forward(&w.stages, &store, &hazy_chw, &clean_chw);
    let (per_scale, g_outs) = multiscale_l1_with_grad(&pass.outs, &hazy_chw);
    loss += per_scale.iter().sum::<f64>();
    train_backward(&w.stages, &store, &pass, &g_outs, &mut grads);

    if let Some(unpaired) = unpaired {
        w.check_inputs(clean, unpaired)?;
        let unpaired_chw = hwc_to_chw::<f64>(unpaired.data());
        let pass = train_forward(&w.stages, &store, &clean_chw, &unpaired_chw);
        let (per_scale, g_outs) = multiscale_l1_with_grad(&pass.outs, &unpaired_chw);
        loss += per_scale.iter().sum::<f64>();
        train_backward(&w.stages, &store, &pass, &g_outs, &mut grads);
    }
    Ok((loss, grads.data().to_vec()))
}

// ---------------------------------------------------------------------------
// Training path (generic precision, crate-internal)
// ---------------------------------------------------------------------------

/// One full multi-scale forward at training precision, with per-stage
/// caches. `outs` are C×H×W, finest first, coarse carry already added.
pub(crate) struct ScalePass<F> {
    pub(crate) outs: Vec<Array3<F>>,
    caches: Vec<PhdtCache<F>>,
}

/// Forward pass over all stages; no edit (training never edits).
pub(crate) fn train_forward<F: Scalar>(
    stages: &[PhdtCore],
    store: &ParamStore<F>,
    hazy: &Array3<F>,
    clean: &Array3<F>,
) -> ScalePass<F> {
    let s_count = stages.len();
    let mut hazy_pyr = vec![hazy.clone()];
    let mut clean_pyr = vec![clean.clone()];
    for s in 1..s_count {
        hazy_pyr.push(bilinear_down2(&hazy_pyr[s - 1]));
        clean_pyr.push(bilinear_down2(&clean_pyr[s - 1]));
    }

    let mut outs: Vec<Array3<F>> = Vec::with_capacity(s_count);
    let mut caches: Vec<PhdtCache<F>> = Vec::with_capacity(s_count);
    for s in (0..s_count).rev() {
        let (mut o, cache) = phdt_core_forward(&stages[s], store, &hazy_pyr[s], &clean_pyr[s]);
        if let Some(prev) = outs.last() {
            o += &bilinear_up2(prev);
        }
        outs.push(o);
        caches.push(cache);
    }
    outs.reverse();
    caches.reverse();
    ScalePass { outs, caches }
}

/// Backpropagates per-scale output gradients (finest first) through every
/// stage. The gradient reaching stage `s` is its own loss term plus the
/// upsampling adjoint of everything that reached scale `s − 1`.
pub(crate) fn train_backward<F: Scalar>(
    stages: &[PhdtCore],
    store: &ParamStore<F>,
    pass: &ScalePass<F>,
    g_outs: &[Array3<F>],
    grads: &mut Grads<F>,
) {
    assert_eq!(g_outs.len(), stages.len());
    let mut g = g_outs[0].clone();
    phdt_core_backward(&stages[0], store, &pass.caches[0], &g, grads);
    for s in 1..stages.len() {
        g = &g_outs[s] + &bilinear_up2_backward(&g);
        phdt_core_backward(&stages[s], store, &pass.caches[s], &g, grads);
    }
}
