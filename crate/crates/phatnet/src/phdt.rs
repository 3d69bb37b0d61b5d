//! The haze disentanglement & transfer block.
//!
//! Four learnable sub-networks — atmospheric-light encoder (ALE),
//! transmission-map encoder (TME), content encoder (CE), and rehazing
//! decoder (RE) — joined by a latent-space scattering-model fusion:
//!
//! ```text
//! F^I = F^J · F^TM + F^AL · (1 − F^TM)
//! ```
//!
//! ALE and TME end in `exp(−ReLU(·))`, so haze features always lie in
//! (0, 1]; content features are unbounded. Each encoder reduces spatial
//! resolution by 8 (three stride-2 stages with residual blocks); the
//! decoder mirrors with three ×2 nearest-neighbor upsampling stages.
//!
//! Public operations run in `f64`; training uses the same generic code at
//! `f32` through the crate-internal API.

use crate::error::{PhatError, Result};
use crate::image::ImageTensor;
use crate::nn::ops::{
    exp_neg_relu, exp_neg_relu_backward, global_avg_pool, global_avg_pool_backward, leaky_relu,
    leaky_relu_backward, nearest_up2, nearest_up2_backward, squash_pre, squash_pre_backward,
};
use crate::nn::{Conv2d, Grads, ParamStore, Scalar};
use ndarray::{Array1, Array3};
use rand::Rng;

/// Negative slope of the leaky rectifier used inside residual blocks.
pub(crate) const LRELU_SLOPE: f64 = 0.2;
/// Spatial reduction factor of every encoder (three stride-2 stages).
pub const LATENT_FACTOR: usize = 8;
/// Default latent channel count.
pub const DEFAULT_CHANNELS: usize = 32;

// ---------------------------------------------------------------------------
// Public latent types (f64, H×W×C layout)
// ---------------------------------------------------------------------------

/// Latent feature map at 1/8 resolution, stored h×w×C.
///
/// Haze features (from [`encode_transmission`]) lie in (0, 1]; content
/// features (from [`encode_content`]) are unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFeatures {
    data: Array3<f64>,
}

impl LatentFeatures {
    /// Wraps an h×w×C array; all elements must be finite.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PhatError::NumericDivergence(
                "latent features contain non-finite values".into(),
            ));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }
}

/// Pooled atmospheric-light feature vector; every element in (0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AtmosphericLightVector {
    data: Array1<f64>,
}

impl AtmosphericLightVector {
    pub fn new(data: Array1<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PhatError::NumericDivergence(
                "atmospheric-light features contain non-finite values".into(),
            ));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array1<f64> {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Layer structure
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

#[derive(Debug, Clone)]
pub(crate) struct TrunkStage {
    down: Conv2d,
    res: Vec<ResBlock>,
}

/// Shared encoder topology: three stride-2 stages, two residual blocks each.
#[derive(Debug, Clone)]
pub(crate) struct Trunk {
    stages: Vec<TrunkStage>,
}

/// One decoder scale: nearest-neighbor ×2 upsampling, a convolution, and
/// the same residual refinement the encoder stages use.
#[derive(Debug, Clone)]
pub(crate) struct DecStage {
    up: Conv2d,
    res: Vec<ResBlock>,
}

/// Decoder: three upsampling stages mirroring the encoder topology plus a
/// linear 3-channel projection. The latent is the only input — everything
/// the output needs must cross the fusion bottleneck — so the decoder
/// carries the same per-scale capacity as the encoders that feed it.
#[derive(Debug, Clone)]
pub(crate) struct Decoder {
    ups: Vec<DecStage>,
    proj: Conv2d,
}

/// Parameter layout of one disentanglement block. The haze encoders end in
/// small-gain head convolutions so both haze factors start near 1: the fused
/// latent then begins as a plain content pass-through, and the haze paths
/// only depart from it where the losses demand haze.
#[derive(Debug, Clone)]
pub(crate) struct PhdtCore {
    pub ale: Trunk,
    pub ale_head: Conv2d,
    pub tme: Trunk,
    pub tme_head: Conv2d,
    pub ce: Trunk,
    pub re: Decoder,
}

const TRUNK_STAGES: usize = 3;
const RES_PER_STAGE: usize = 2;
const DEC_STAGES: usize = 3;
const HEAD_INIT_GAIN: f64 = 0.05;

fn alloc_trunk<F: Scalar, R: Rng>(
    store: &mut ParamStore<F>,
    prefix: &str,
    channels: usize,
    rng: &mut R,
) -> Trunk {
    let mut stages = Vec::with_capacity(TRUNK_STAGES);
    for s in 0..TRUNK_STAGES {
        let cin = if s == 0 { 3 } else { channels };
        let down = Conv2d::new(store, &format!("{prefix}.s{s}.down"), cin, channels, 2, rng);
        let mut res = Vec::with_capacity(RES_PER_STAGE);
        for r in 0..RES_PER_STAGE {
            let a = Conv2d::new(
                store,
                &format!("{prefix}.s{s}.res{r}.a"),
                channels,
                channels,
                1,
                rng,
            );
            let b = Conv2d::new(
                store,
                &format!("{prefix}.s{s}.res{r}.b"),
                channels,
                channels,
                1,
                rng,
            );
            res.push(ResBlock { a, b });
        }
        stages.push(TrunkStage { down, res });
    }
    Trunk { stages }
}

fn alloc_decoder<F: Scalar, R: Rng>(
    store: &mut ParamStore<F>,
    prefix: &str,
    channels: usize,
    rng: &mut R,
) -> Decoder {
    let ups = (0..DEC_STAGES)
        .map(|k| {
            let up = Conv2d::new(store, &format!("{prefix}.up{k}"), channels, channels, 1, rng);
            let res = (0..RES_PER_STAGE)
                .map(|r| {
                    let name = |part| format!("{prefix}.up{k}.res{r}.{part}");
                    ResBlock {
                        a: Conv2d::new(store, &name("a"), channels, channels, 1, rng),
                        b: Conv2d::new(store, &name("b"), channels, channels, 1, rng),
                    }
                })
                .collect();
            DecStage { up, res }
        })
        .collect();
    let proj = Conv2d::new(store, &format!("{prefix}.proj"), channels, 3, 1, rng);
    Decoder { ups, proj }
}

impl PhdtCore {
    /// Allocates all four sub-networks under `prefix` in a fixed order.
    pub(crate) fn alloc<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let p = |part: &str| {
            if prefix.is_empty() {
                part.to_string()
            } else {
                format!("{prefix}.{part}")
            }
        };
        let head = |store: &mut ParamStore<F>, name: String, rng: &mut R| {
            Conv2d::new_with_gain(store, &name, channels, channels, 1, HEAD_INIT_GAIN, rng)
        };
        Self {
            ale: alloc_trunk(store, &p("ale"), channels, rng),
            ale_head: head(store, format!("{}.head", p("ale")), rng),
            tme: alloc_trunk(store, &p("tme"), channels, rng),
            tme_head: head(store, format!("{}.head", p("tme")), rng),
            ce: alloc_trunk(store, &p("ce"), channels, rng),
            re: alloc_decoder(store, &p("re"), channels, rng),
        }
    }
}

// ---------------------------------------------------------------------------
// Generic forward/backward
// ---------------------------------------------------------------------------

pub(crate) struct ResCache<F> {
    a_pre: Array3<F>,
    a_act: Array3<F>,
}

pub(crate) struct StageCache<F> {
    x_in: Array3<F>,
    d_pre: Array3<F>,
    /// Outputs entering each residual block; `flow[0]` is the activated
    /// downsample output, `flow[r + 1]` the output of residual block `r`.
    flow: Vec<Array3<F>>,
    res: Vec<ResCache<F>>,
}

pub(crate) struct TrunkCache<F> {
    stages: Vec<StageCache<F>>,
}

impl<F: Scalar> TrunkCache<F> {
    fn output(&self) -> &Array3<F> {
        self.stages
            .last()
            .expect("trunk has stages")
            .flow
            .last()
            .expect("stage has outputs")
    }
}

/// Runs a chain of residual blocks; `flow[r]` is the input of block `r`,
/// `flow.last()` the chain output.
fn res_chain_forward<F: Scalar>(
    blocks: &[ResBlock],
    store: &ParamStore<F>,
    first: Array3<F>,
) -> (Vec<Array3<F>>, Vec<ResCache<F>>) {
    let mut flow = vec![first];
    let mut caches = Vec::with_capacity(blocks.len());
    for block in blocks {
        let inp = flow.last().unwrap();
        let a_pre = block.a.forward(store, inp);
        let a_act = leaky_relu(&a_pre, LRELU_SLOPE);
        let b_out = block.b.forward(store, &a_act);
        let y = inp + &b_out;
        caches.push(ResCache { a_pre, a_act });
        flow.push(y);
    }
    (flow, caches)
}

fn trunk_forward<F: Scalar>(
    trunk: &Trunk,
    store: &ParamStore<F>,
    x: &Array3<F>,
) -> TrunkCache<F> {
    let mut stages = Vec::with_capacity(trunk.stages.len());
    let mut cur = x.clone();
    for stage in &trunk.stages {
        let d_pre = stage.down.forward(store, &cur);
        let d_act = leaky_relu(&d_pre, LRELU_SLOPE);
        let (flow, res_caches) = res_chain_forward(&stage.res, store, d_act);
        let next = flow.last().unwrap().clone();
        stages.push(StageCache {
            x_in: cur,
            d_pre,
            flow,
            res: res_caches,
        });
        cur = next;
    }
    TrunkCache { stages }
}

fn trunk_backward<F: Scalar>(
    trunk: &Trunk,
    store: &ParamStore<F>,
    cache: &TrunkCache<F>,
    g_out: Array3<F>,
    grads: &mut Grads<F>,
) -> Array3<F> {
    let mut g = g_out;
    for (stage, sc) in trunk.stages.iter().zip(&cache.stages).rev() {
        g = res_chain_backward(&stage.res, &sc.res, &sc.flow, store, g, grads);
        let g_d_pre = leaky_relu_backward(&sc.d_pre, &g, LRELU_SLOPE);
        g = stage.down.backward(store, &sc.x_in, &g_d_pre, grads);
    }
    g
}

/// Backpropagates through a chain of residual blocks given the cached
/// per-block inputs (`flow[r]` feeds block `r`).
fn res_chain_backward<F: Scalar>(
    blocks: &[ResBlock],
    caches: &[ResCache<F>],
    flow: &[Array3<F>],
    store: &ParamStore<F>,
    g_out: Array3<F>,
    grads: &mut Grads<F>,
) -> Array3<F> {
    let mut g = g_out;
    for (r, block) in blocks.iter().enumerate().rev() {
        // y = inp + b(lrelu(a(inp)))
        let rc = &caches[r];
        let inp = &flow[r];
        let g_a_act = block.b.backward(store, &rc.a_act, &g, grads);
        let g_a_pre = leaky_relu_backward(&rc.a_pre, &g_a_act, LRELU_SLOPE);
        let g_res_in = block.a.backward(store, inp, &g_a_pre, grads);
        g = &g + &g_res_in;
    }
    g
}

pub(crate) struct DecStageCache<F> {
    /// (upsampled input, conv pre-activation).
    u: Array3<F>,
    pre: Array3<F>,
    /// Outputs entering each residual block of the stage.
    flow: Vec<Array3<F>>,
    res: Vec<ResCache<F>>,
}

pub(crate) struct DecCache<F> {
    /// Per-stage caches; the fused latent feeds stage 0.
    ups: Vec<DecStageCache<F>>,
    /// Input of the final projection.
    proj_in: Array3<F>,
}

fn decoder_forward<F: Scalar>(
    dec: &Decoder,
    store: &ParamStore<F>,
    fi: &Array3<F>,
) -> (Array3<F>, DecCache<F>) {
    let mut cur = fi.clone();
    let mut ups = Vec::with_capacity(dec.ups.len());
    for stage in &dec.ups {
        let u = nearest_up2(&cur);
        let pre = stage.up.forward(store, &u);
        let act = leaky_relu(&pre, LRELU_SLOPE);
        let (flow, res) = res_chain_forward(&stage.res, store, act);
        cur = flow.last().unwrap().clone();
        ups.push(DecStageCache { u, pre, flow, res });
    }
    let out = dec.proj.forward(store, &cur);
    (
        out,
        DecCache {
            ups,
            proj_in: cur,
        },
    )
}

fn decoder_backward<F: Scalar>(
    dec: &Decoder,
    store: &ParamStore<F>,
    cache: &DecCache<F>,
    g_out: &Array3<F>,
    grads: &mut Grads<F>,
) -> Array3<F> {
    let mut g = dec.proj.backward(store, &cache.proj_in, g_out, grads);
    for (stage, sc) in dec.ups.iter().zip(&cache.ups).rev() {
        g = res_chain_backward(&stage.res, &sc.res, &sc.flow, store, g, grads);
        let g_pre = leaky_relu_backward(&sc.pre, &g, LRELU_SLOPE);
        let g_u = stage.up.backward(store, &sc.u, &g_pre, grads);
        g = nearest_up2_backward(&g_u);
    }
    g
}

/// Latent fusion `fi = fj·ftm + fal·(1 − ftm)` on C×h×w arrays.
pub(crate) fn fuse_chw<F: Scalar>(
    fj: &Array3<F>,
    ftm: &Array3<F>,
    fal: &Array1<F>,
) -> Array3<F> {
    let (c, h, w) = fj.dim();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        let a = fal[ch];
        for y in 0..h {
            for x in 0..w {
                let t = ftm[[ch, y, x]];
                out[[ch, y, x]] = fj[[ch, y, x]] * t + a * (F::one() - t);
            }
        }
    }
    out
}

/// Analytic adjoint of [`fuse_chw`]: returns (g_fj, g_ftm, g_fal).
pub(crate) fn fuse_chw_backward<F: Scalar>(
    fj: &Array3<F>,
    ftm: &Array3<F>,
    fal: &Array1<F>,
    g_fi: &Array3<F>,
) -> (Array3<F>, Array3<F>, Array1<F>) {
    let (c, h, w) = fj.dim();
    let mut g_fj = Array3::zeros((c, h, w));
    let mut g_ftm = Array3::zeros((c, h, w));
    let mut g_fal = Array1::zeros(c);
    for ch in 0..c {
        let a = fal[ch];
        let mut acc = F::zero();
        for y in 0..h {
            for x in 0..w {
                let g = g_fi[[ch, y, x]];
                let t = ftm[[ch, y, x]];
                g_fj[[ch, y, x]] = g * t;
                g_ftm[[ch, y, x]] = g * (fj[[ch, y, x]] - a);
                acc = acc + g * (F::one() - t);
            }
        }
        g_fal[ch] = acc;
    }
    (g_fj, g_ftm, g_fal)
}

/// Everything the backward pass needs from one block's forward pass.
pub(crate) struct PhdtCache<F> {
    ale_trunk: TrunkCache<F>,
    ale_raw: Array3<F>,
    ale_pre: Array3<F>,
    ale_act: Array3<F>,
    pub(crate) fal: Array1<F>,
    tme_trunk: TrunkCache<F>,
    tme_raw: Array3<F>,
    tme_pre: Array3<F>,
    pub(crate) ftm: Array3<F>,
    ce_trunk: TrunkCache<F>,
    fj: Array3<F>,
    dec: DecCache<F>,
}

/// Full block forward on C×H×W inputs; returns the 3×H×W output and the
/// cache for [`phdt_core_backward`].
pub(crate) fn phdt_core_forward<F: Scalar>(
    core: &PhdtCore,
    store: &ParamStore<F>,
    hazy: &Array3<F>,
    clean: &Array3<F>,
) -> (Array3<F>, PhdtCache<F>) {
    let ale_trunk = trunk_forward(&core.ale, store, hazy);
    let ale_raw = core.ale_head.forward(store, ale_trunk.output());
    let ale_pre = squash_pre(&ale_raw);
    let ale_act = exp_neg_relu(&ale_pre);
    let fal = global_avg_pool(&ale_act);

    let tme_trunk = trunk_forward(&core.tme, store, hazy);
    let tme_raw = core.tme_head.forward(store, tme_trunk.output());
    let tme_pre = squash_pre(&tme_raw);
    let ftm = exp_neg_relu(&tme_pre);

    let ce_trunk = trunk_forward(&core.ce, store, clean);
    let fj = ce_trunk.output().clone();

    let fi = fuse_chw(&fj, &ftm, &fal);
    let (out, dec) = decoder_forward(&core.re, store, &fi);
    (
        out,
        PhdtCache {
            ale_trunk,
            ale_raw,
            ale_pre,
            ale_act,
            fal,
            tme_trunk,
            tme_raw,
            tme_pre,
            ftm,
            ce_trunk,
            fj,
            dec,
        },
    )
}

/// Accumulates parameter gradients for one block given `g_out` (3×H×W).
/// Input-image gradients are not needed anywhere (multi-scale stages feed
/// on image pyramids, not on each other's inputs) and are discarded.
pub(crate) fn phdt_core_backward<F: Scalar>(
    core: &PhdtCore,
    store: &ParamStore<F>,
    cache: &PhdtCache<F>,
    g_out: &Array3<F>,
    grads: &mut Grads<F>,
) {
    let g_fi = decoder_backward(&core.re, store, &cache.dec, g_out, grads);
    let (g_fj, g_ftm, g_fal) = fuse_chw_backward(&cache.fj, &cache.ftm, &cache.fal, &g_fi);

    let _ = trunk_backward(&core.ce, store, &cache.ce_trunk, g_fj, grads);

    let g_tme_pre = exp_neg_relu_backward(&cache.tme_pre, &cache.ftm, &g_ftm);
    let g_tme_raw = squash_pre_backward(&cache.tme_raw, &g_tme_pre);
    let g_tme_out =
        core.tme_head
            .backward(store, cache.tme_trunk.output(), &g_tme_raw, grads);
    let _ = trunk_backward(&core.tme, store, &cache.tme_trunk, g_tme_out, grads);

    let (c, h, w) = cache.ale_act.dim();
    let g_ale_act = global_avg_pool_backward(&g_fal, c, h, w);
    let g_ale_pre = exp_neg_relu_backward(&cache.ale_pre, &cache.ale_act, &g_ale_act);
    let g_ale_raw = squash_pre_backward(&cache.ale_raw, &g_ale_pre);
    let g_ale_out =
        core.ale_head
            .backward(store, cache.ale_trunk.output(), &g_ale_raw, grads);
    let _ = trunk_backward(&core.ale, store, &cache.ale_trunk, g_ale_out, grads);
}

/// Runs only the two haze encoders: `F^AL` (pooled) and `F^TM`, with
/// `edit_tm` applied to the transmission latent before anything consumes it.
pub(crate) fn core_encode_latents<F: Scalar>(
    core: &PhdtCore,
    store: &ParamStore<F>,
    hazy: &Array3<F>,
    edit_tm: impl FnOnce(Array3<F>) -> Array3<F>,
) -> (Array1<F>, Array3<F>) {
    let ale_trunk = trunk_forward(&core.ale, store, hazy);
    let ale_raw = core.ale_head.forward(store, ale_trunk.output());
    let fal = global_avg_pool(&exp_neg_relu(&squash_pre(&ale_raw)));
    let tme_trunk = trunk_forward(&core.tme, store, hazy);
    let tme_raw = core.tme_head.forward(store, tme_trunk.output());
    let ftm = edit_tm(exp_neg_relu(&squash_pre(&tme_raw)));
    (fal, ftm)
}

/// Inference-only block forward (no cache) with a transmission-latent
/// transform hook. With an identity hook this computes exactly what
/// [`phdt_core_forward`] computes.
pub(crate) fn phdt_core_infer<F: Scalar>(
    core: &PhdtCore,
    store: &ParamStore<F>,
    hazy: &Array3<F>,
    clean: &Array3<F>,
    edit_tm: impl FnOnce(Array3<F>) -> Array3<F>,
) -> Array3<F> {
    let (fal, ftm) = core_encode_latents(core, store, hazy, edit_tm);
    let ce_trunk = trunk_forward(&core.ce, store, clean);
    let fi = fuse_chw(ce_trunk.output(), &ftm, &fal);
    decoder_forward(&core.re, store, &fi).0
}

// ---------------------------------------------------------------------------
// Layout conversions
// ---------------------------------------------------------------------------

/// H×W×3 f64 image → C×H×W tensor of the requested scalar.
pub(crate) fn hwc_to_chw<F: Scalar>(img: &Array3<f64>) -> Array3<F> {
    let (h, w, c) = img.dim();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| F::from_f64(img[[y, x, ch]]))
}

/// C×H×W tensor → H×W×C f64 array.
pub(crate) fn chw_to_hwc<F: Scalar>(x: &Array3<F>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((h, w, c), |(y, x2, ch)| x[[ch, y, x2]].to_f64())
}

// ---------------------------------------------------------------------------
// Public single-block weights and operations (f64)
// ---------------------------------------------------------------------------

/// Weights of one standalone disentanglement block.
///
/// Parameters are stored at `f32` (the training precision); public
/// operations widen to `f64` (exact) before computing.
#[derive(Debug, Clone)]
pub struct PhdtWeights {
    store: ParamStore<f32>,
    core: PhdtCore,
    channels: usize,
}

impl PhdtWeights {
    /// Fresh seeded initialization (fan-in scaled uniform).
    pub fn init(channels: usize, seed: u64) -> Result<Self> {
        if channels == 0 {
            return Err(PhatError::Parameter("channel count must be ≥ 1".into()));
        }
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f32>::new();
        let core = PhdtCore::alloc(&mut store, "", channels, &mut rng);
        Ok(Self {
            store,
            core,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn param_count(&self) -> usize {
        self.store.len()
    }

    /// Sets every parameter to zero (degenerate configuration used in
    /// tests and identity checks).
    pub fn zero(&mut self) {
        self.store.data_mut().fill(0.0);
    }

    #[cfg(test)]
    pub(crate) fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    #[cfg(test)]
    pub(crate) fn core(&self) -> &PhdtCore {
        &self.core
    }

    fn store_f64(&self) -> ParamStore<f64> {
        self.store.cast::<f64>()
    }

    fn check_image(&self, img: &ImageTensor) -> Result<()> {
        let (h, w) = (img.height(), img.width());
        if h % LATENT_FACTOR != 0 || w % LATENT_FACTOR != 0 {
            return Err(PhatError::Dimension(format!(
                "input {h}x{w} not divisible by {LATENT_FACTOR}"
            )));
        }
        Ok(())
    }
}

pub(crate) fn ensure_finite_chw<F: Scalar>(x: &Array3<F>, what: &str) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(PhatError::NumericDivergence(format!(
            "{what} produced non-finite activations"
        )));
    }
    Ok(())
}

/// `F^AL = pool(exp(−ReLU(ALE(hazy))))`: global haze color/brightness
/// features, every element in (0, 1].
pub fn encode_atmospheric_light(
    hazy: &ImageTensor,
    w: &PhdtWeights,
) -> Result<AtmosphericLightVector> {
    w.check_image(hazy)?;
    let store = w.store_f64();
    let x = hwc_to_chw::<f64>(hazy.data());
    let cache = trunk_forward(&w.core.ale, &store, &x);
    let raw = w.core.ale_head.forward(&store, cache.output());
    let act = exp_neg_relu(&squash_pre(&raw));
    let pooled = global_avg_pool(&act);
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(PhatError::NumericDivergence(
            "atmospheric-light encoder produced non-finite activations".into(),
        ));
    }
    AtmosphericLightVector::new(pooled)
}

/// `F^TM = exp(−ReLU(TME(hazy)))` at 1/8 resolution; elements in (0, 1].
pub fn encode_transmission(hazy: &ImageTensor, w: &PhdtWeights) -> Result<LatentFeatures> {
    w.check_image(hazy)?;
    let store = w.store_f64();
    let x = hwc_to_chw::<f64>(hazy.data());
    let cache = trunk_forward(&w.core.tme, &store, &x);
    let raw = w.core.tme_head.forward(&store, cache.output());
    let ftm = exp_neg_relu(&squash_pre(&raw));
    ensure_finite_chw(&ftm, "transmission encoder")?;
    LatentFeatures::new(chw_to_hwc(&ftm))
}

/// `F^J = CE(clean)` at 1/8 resolution; unbounded.
pub fn encode_content(clean: &ImageTensor, w: &PhdtWeights) -> Result<LatentFeatures> {
    w.check_image(clean)?;
    let store = w.store_f64();
    let x = hwc_to_chw::<f64>(clean.data());
    let cache = trunk_forward(&w.core.ce, &store, &x);
    ensure_finite_chw(cache.output(), "content encoder")?;
    LatentFeatures::new(chw_to_hwc(cache.output()))
}

/// Latent scattering-model fusion with `F^AL` broadcast spatially:
/// `F^I(x,c) = F^J(x,c)·F^TM(x,c) + F^AL(c)·(1 − F^TM(x,c))`.
pub fn fuse_asm_latent(
    fj: &LatentFeatures,
    ftm: &LatentFeatures,
    fal: &AtmosphericLightVector,
) -> Result<LatentFeatures> {
    if fj.data.dim() != ftm.data.dim() {
        return Err(PhatError::Dimension(format!(
            "content {:?} vs transmission {:?} shape mismatch",
            fj.data.dim(),
            ftm.data.dim()
        )));
    }
    let (h, w, c) = fj.data.dim();
    if fal.len() != c {
        return Err(PhatError::Dimension(format!(
            "atmospheric-light length {} does not match {c} channels",
            fal.len()
        )));
    }
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let t = ftm.data[[y, x, ch]];
                out[[y, x, ch]] = fj.data[[y, x, ch]] * t + fal.data[ch] * (1.0 - t);
            }
        }
    }
    LatentFeatures::new(out)
}

/// Decodes fused latents back to an image-shaped H×W×3 array (unclamped:
/// coarser stages contribute residuals that may leave [0, 1]).
pub fn rehaze_decode(fi: &LatentFeatures, w: &PhdtWeights) -> Result<Array3<f64>> {
    if fi.channels() != w.channels {
        return Err(PhatError::Dimension(format!(
            "latent has {} channels, weights expect {}",
            fi.channels(),
            w.channels
        )));
    }
    let store = w.store_f64();
    let x = hwc_to_chw::<f64>(fi.data());
    let (out, _) = decoder_forward(&w.core.re, &store, &x);
    ensure_finite_chw(&out, "rehazing decoder")?;
    Ok(chw_to_hwc(&out))
}

/// Full block: `RE(fuse(CE(clean), TME(hazy), ALE(hazy)))`.
///
/// Equals the manual composition of the four public operations bit-exactly
/// and returns the same unclamped image-shaped array as [`rehaze_decode`].
pub fn phdt_forward(
    hazy: &ImageTensor,
    clean: &ImageTensor,
    w: &PhdtWeights,
) -> Result<Array3<f64>> {
    if hazy.data().dim() != clean.data().dim() {
        return Err(PhatError::Dimension(format!(
            "hazy {:?} vs clean {:?} shape mismatch",
            hazy.data().dim(),
            clean.data().dim()
        )));
    }
    let fal = encode_atmospheric_light(hazy, w)?;
    let ftm = encode_transmission(hazy, w)?;
    let fj = encode_content(clean, w)?;
    let fi = fuse_asm_latent(&fj, &ftm, &fal)?;
    rehaze_decode(&fi, w)
}
