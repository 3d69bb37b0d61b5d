//! Procedural synthetic-domain generator.
//!
//! Produces paired clean/hazy images together with the exact
//! [`HazeRecipe`](crate::asm::HazeRecipe) that made them, so every
//! downstream claim about disentanglement can be checked against ground
//! truth. A [`DomainSpec`] fully determines its dataset byte-for-byte
//! (before PNG quantization); domains differ along haze density (β),
//! airlight color, and spatial haze structure.

use crate::asm::{compose_asm, transmission_from_recipe, HazeRecipe};
use crate::error::{PhatError, Result};
use crate::image::ImageTensor;
use crate::pngio;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Datasets must keep sides divisible by this so the 1/8-resolution latent
/// pathway still divides cleanly at the coarsest of three scales.
pub const SIZE_DIVISOR: usize = 32;

// ---------------------------------------------------------------------------
// Value noise
// ---------------------------------------------------------------------------

/// Stateless lattice hash → [0, 1). Two mixing rounds give enough
/// avalanche that neighboring lattice points decorrelate.
fn lattice_value(seed: u64, octave: u32, ix: i64, iy: i64) -> f64 {
    let mut h = seed
        ^ (octave as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (ix as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ (iy as u64).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 30;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Quintic smoothstep, C2-continuous across lattice cells.
fn smoothstep5(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn noise_octave(seed: u64, octave: u32, cell: f64, y: usize, x: usize) -> f64 {
    let u = x as f64 / cell;
    let v = y as f64 / cell;
    let ix = u.floor() as i64;
    let iy = v.floor() as i64;
    let fx = smoothstep5(u - ix as f64);
    let fy = smoothstep5(v - iy as f64);
    let c00 = lattice_value(seed, octave, ix, iy);
    let c10 = lattice_value(seed, octave, ix + 1, iy);
    let c01 = lattice_value(seed, octave, ix, iy + 1);
    let c11 = lattice_value(seed, octave, ix + 1, iy + 1);
    let top = c00 + (c10 - c00) * fx;
    let bot = c01 + (c11 - c01) * fx;
    top + (bot - top) * fy
}

/// Multi-octave value noise, min-max normalized to [0, 1].
///
/// `scale` is the base lattice cell size in pixels; each octave halves it
/// (floored at one pixel) and halves its amplitude.
pub fn value_noise(seed: u64, height: usize, width: usize, octaves: u32, scale: f64) -> Array2<f64> {
    assert!(octaves >= 1, "need at least one octave");
    assert!(scale >= 1.0, "cell size must be at least one pixel");
    let mut out = Array2::<f64>::zeros((height, width));
    let mut amp = 1.0;
    let mut cell = scale;
    for o in 0..octaves {
        for y in 0..height {
            for x in 0..width {
                out[[y, x]] += amp * noise_octave(seed, o, cell, y, x);
            }
        }
        amp *= 0.5;
        cell = (cell * 0.5).max(1.0);
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in out.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo < 1e-12 {
        out.fill(0.5);
    } else {
        let inv = 1.0 / (hi - lo);
        out.mapv_inplace(|v| (v - lo) * inv);
    }
    out
}

/// Smooth multi-octave haze field in [0, 1], the spatial modulation used
/// for non-homogeneous haze.
pub fn generate_haze_field(
    seed: u64,
    height: usize,
    width: usize,
    octaves: u32,
    scale: f64,
) -> Array2<f64> {
    value_noise(seed, height, width, octaves, scale)
}

// ---------------------------------------------------------------------------
// Clean scenes
// ---------------------------------------------------------------------------

/// Parameters controlling scene content (separate from haze parameters).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneParams {
    /// Inclusive range for the number of shapes stamped per scene.
    pub shape_count: (usize, usize),
    /// Octave count of the additive noise texture.
    pub texture_octaves: u32,
    /// Colors shapes and backgrounds draw from.
    pub palette: Vec<[f64; 3]>,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            shape_count: (3, 6),
            texture_octaves: 2,
            palette: vec![
                [0.10, 0.12, 0.16],
                [0.85, 0.30, 0.22],
                [0.20, 0.55, 0.30],
                [0.25, 0.40, 0.80],
                [0.92, 0.85, 0.35],
                [0.90, 0.90, 0.92],
                [0.55, 0.35, 0.65],
            ],
        }
    }
}

fn pick_color(params: &SceneParams, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let base = params.palette[rng.random_range(0..params.palette.len())];
    // Small jitter so repeated palette picks still differ.
    let mut c = [0.0; 3];
    for (o, b) in c.iter_mut().zip(base) {
        *o = (b + rng.random_range(-0.06..0.06)).clamp(0.0, 1.0);
    }
    c
}

/// Stamps a filled convex polygon (alpha blended) onto the canvas.
fn stamp_polygon(canvas: &mut Array3<f64>, pts: &[(f64, f64)], color: [f64; 3], alpha: f64) {
    let (h, w, _) = canvas.dim();
    let min_y = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).max(0.0) as usize;
    let max_y = (pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max) as usize).min(h - 1);
    let min_x = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).max(0.0) as usize;
    let max_x = (pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max) as usize).min(w - 1);
    for y in min_y..=max_y {
        for x in min_x..=max_x {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            // Inside test: consistently on one side of every edge.
            let mut sign = 0.0f64;
            let mut inside = true;
            for i in 0..pts.len() {
                let (x1, y1) = pts[i];
                let (x2, y2) = pts[(i + 1) % pts.len()];
                let cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1);
                if cross.abs() < 1e-12 {
                    continue;
                }
                if sign == 0.0 {
                    sign = cross.signum();
                } else if cross.signum() != sign {
                    inside = false;
                    break;
                }
            }
            if inside {
                for c in 0..3 {
                    let v = canvas[[y, x, c]];
                    canvas[[y, x, c]] = v + alpha * (color[c] - v);
                }
            }
        }
    }
}

fn stamp_ellipse(
    canvas: &mut Array3<f64>,
    center: (f64, f64),
    radii: (f64, f64),
    angle: f64,
    color: [f64; 3],
    alpha: f64,
) {
    let (h, w, _) = canvas.dim();
    let (cx, cy) = center;
    let (rx, ry) = radii;
    let (sin, cos) = angle.sin_cos();
    let r = rx.max(ry);
    let y0 = ((cy - r).floor().max(0.0)) as usize;
    let y1 = ((cy + r).ceil() as usize).min(h - 1);
    let x0 = ((cx - r).floor().max(0.0)) as usize;
    let x1 = ((cx + r).ceil() as usize).min(w - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = (dx * cos + dy * sin) / rx;
            let v = (-dx * sin + dy * cos) / ry;
            if u * u + v * v <= 1.0 {
                for c in 0..3 {
                    let val = canvas[[y, x, c]];
                    canvas[[y, x, c]] = val + alpha * (color[c] - val);
                }
            }
        }
    }
}

/// Deterministic procedural clean scene: a layered gradient background,
/// random convex polygons and ellipses, and a value-noise texture.
///
/// The result is guaranteed (and asserted) to span at least 0.5 dynamic
/// range so PSNR deltas stay meaningful; low-contrast compositions are
/// affinely remapped to [0.1, 0.9] first.
pub fn generate_clean_scene(seed: u64, height: usize, width: usize) -> Result<ImageTensor> {
    generate_clean_scene_with(seed, height, width, &SceneParams::default())
}

/// [`generate_clean_scene`] with explicit scene parameters.
pub fn generate_clean_scene_with(
    seed: u64,
    height: usize,
    width: usize,
    params: &SceneParams,
) -> Result<ImageTensor> {
    if params.palette.is_empty() {
        return Err(PhatError::Parameter("scene palette is empty".into()));
    }
    if params.shape_count.0 > params.shape_count.1 {
        return Err(PhatError::Parameter(format!(
            "shape count range {:?} is inverted",
            params.shape_count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (height as f64, width as f64);

    // Background: linear gradient between two jittered palette colors.
    let ca = pick_color(params, &mut rng);
    let cb = pick_color(params, &mut rng);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (st, ct) = theta.sin_cos();
    let mut canvas = Array3::<f64>::zeros((height, width, 3));
    for y in 0..height {
        for x in 0..width {
            // Projection onto the gradient axis, normalized to [0, 1].
            let p = ((x as f64 / wf - 0.5) * ct + (y as f64 / hf - 0.5) * st) + 0.5;
            let p = p.clamp(0.0, 1.0);
            for c in 0..3 {
                canvas[[y, x, c]] = ca[c] + (cb[c] - ca[c]) * p;
            }
        }
    }

    // Shapes: alternating convex polygons and ellipses.
    let n_shapes = rng.random_range(params.shape_count.0..=params.shape_count.1);
    for s in 0..n_shapes {
        let color = pick_color(params, &mut rng);
        let alpha = rng.random_range(0.75..1.0);
        let cx = rng.random_range(0.0..wf);
        let cy = rng.random_range(0.0..hf);
        let r = rng.random_range(0.14..0.34) * hf.min(wf);
        if s % 2 == 0 {
            let sides = rng.random_range(3..=5usize);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            // Convex by construction: vertices of an irregular inscribed
            // polygon, angles strictly increasing.
            let mut angles: Vec<f64> = (0..sides)
                .map(|k| {
                    phase
                        + std::f64::consts::TAU * (k as f64 + rng.random_range(0.0..0.6))
                            / sides as f64
                })
                .collect();
            angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let pts: Vec<(f64, f64)> = angles
                .iter()
                .map(|a| (cx + r * a.cos(), cy + r * a.sin()))
                .collect();
            stamp_polygon(&mut canvas, &pts, color, alpha);
        } else {
            let rx = r * rng.random_range(0.5..1.0);
            let ry = r * rng.random_range(0.5..1.0);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            stamp_ellipse(&mut canvas, (cx, cy), (rx, ry), angle, color, alpha);
        }
    }

    // Texture: zero-mean value noise, per-channel weighted.
    let tex = value_noise(seed ^ 0xA5A5_5A5A, height, width, params.texture_octaves, 32.0);
    let weights = [
        rng.random_range(0.03..0.07),
        rng.random_range(0.03..0.07),
        rng.random_range(0.03..0.07),
    ];
    for y in 0..height {
        for x in 0..width {
            let t = tex[[y, x]] - 0.5;
            for c in 0..3 {
                canvas[[y, x, c]] = (canvas[[y, x, c]] + weights[c] * t).clamp(0.0, 1.0);
            }
        }
    }

    // Contrast guarantee: remap to [0.1, 0.9] when composition came out flat.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in canvas.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo < 0.5 {
        if hi - lo < 1e-9 {
            // Degenerate flat canvas: overwrite with a diagonal ramp.
            for y in 0..height {
                for x in 0..width {
                    let p = 0.1 + 0.8 * (x as f64 / wf + y as f64 / hf) / 2.0;
                    for c in 0..3 {
                        canvas[[y, x, c]] = p;
                    }
                }
            }
        } else {
            let scale = 0.8 / (hi - lo);
            canvas.mapv_inplace(|v| 0.1 + (v - lo) * scale);
        }
    }
    let img = ImageTensor::new(canvas)?;
    assert!(
        img.dynamic_range() >= 0.5,
        "scene contrast guarantee violated"
    );
    Ok(img)
}

/// Smooth synthetic depth map in [0.15, 1]: value noise blended with a
/// vertical far-to-near ramp, so transmission varies across the frame.
pub fn generate_depth_map(seed: u64, height: usize, width: usize) -> Array2<f64> {
    let noise = value_noise(seed ^ 0x0DD0_FEED, height, width, 3, height.max(width) as f64 / 3.0);
    let mut out = Array2::<f64>::zeros((height, width));
    for y in 0..height {
        let ramp = 1.0 - y as f64 / (height.saturating_sub(1).max(1)) as f64;
        for x in 0..width {
            let d = 0.6 * noise[[y, x]] + 0.4 * ramp;
            out[[y, x]] = 0.15 + 0.85 * d;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Domains
// ---------------------------------------------------------------------------

/// Haze-generation parameters for one domain.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HazeParams {
    /// Scattering-coefficient range (uniform per pair); must be positive.
    pub beta_range: (f64, f64),
    /// Per-channel atmospheric-light bounds; components in [0.6, 1.0].
    pub airlight_lo: [f64; 3],
    pub airlight_hi: [f64; 3],
    /// When false, each pair gets a smooth multiplicative haze field.
    pub homogeneous: bool,
    pub field_octaves: u32,
    /// Base cell size of the haze-field noise, in pixels.
    pub field_scale: f64,
}

/// Complete description of a synthetic domain; fully determines the
/// generated dataset. Spec files must not carry unknown keys.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub seed: u64,
    pub scene: SceneParams,
    pub haze: HazeParams,
    /// (height, width); both divisible by 32.
    pub size: (usize, usize),
    pub pair_count: usize,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let (blo, bhi) = self.haze.beta_range;
        if !(blo > 0.0 && bhi >= blo && bhi.is_finite()) {
            return Err(PhatError::Parameter(format!(
                "beta range must be positive and ordered, got ({blo}, {bhi})"
            )));
        }
        for c in 0..3 {
            let (lo, hi) = (self.haze.airlight_lo[c], self.haze.airlight_hi[c]);
            if !(0.6..=1.0).contains(&lo) || !(0.6..=1.0).contains(&hi) || lo > hi {
                return Err(PhatError::Parameter(format!(
                    "airlight bounds for channel {c} must satisfy 0.6 ≤ lo ≤ hi ≤ 1.0, got ({lo}, {hi})"
                )));
            }
        }
        let (h, w) = self.size;
        if h % SIZE_DIVISOR != 0 || w % SIZE_DIVISOR != 0 || h == 0 || w == 0 {
            return Err(PhatError::Parameter(format!(
                "domain size must be a positive multiple of {SIZE_DIVISOR}, got {h}x{w}"
            )));
        }
        if self.pair_count == 0 {
            return Err(PhatError::Parameter("pair_count must be ≥ 1".into()));
        }
        if self.haze.field_octaves == 0 || self.haze.field_scale < 1.0 {
            return Err(PhatError::Parameter(
                "haze field needs ≥ 1 octave and cell size ≥ 1 px".into(),
            ));
        }
        if self.scene.palette.is_empty() {
            return Err(PhatError::Parameter("scene palette is empty".into()));
        }
        Ok(())
    }

    /// Moderate, homogeneous, warm-neutral source domain.
    pub fn source_default(size: (usize, usize), pair_count: usize) -> Self {
        Self {
            name: "source".into(),
            seed: 11,
            scene: SceneParams::default(),
            haze: HazeParams {
                beta_range: (0.5, 1.1),
                airlight_lo: [0.82, 0.80, 0.78],
                airlight_hi: [0.95, 0.93, 0.90],
                homogeneous: true,
                field_octaves: 3,
                field_scale: 48.0,
            },
            size,
            pair_count,
        }
    }

    /// Dense, blue-tinted, field-modulated target domain.
    pub fn target_default(size: (usize, usize), pair_count: usize) -> Self {
        Self {
            name: "target".into(),
            seed: 23,
            scene: SceneParams::default(),
            haze: HazeParams {
                beta_range: (1.4, 2.4),
                airlight_lo: [0.62, 0.70, 0.85],
                airlight_hi: [0.74, 0.82, 0.99],
                homogeneous: false,
                field_octaves: 3,
                field_scale: 40.0,
            },
            size,
            pair_count,
        }
    }
}

/// One generated example: the clean scene, its hazy rendition, and the
/// exact recipe connecting them.
#[derive(Debug, Clone)]
pub struct SynthPair {
    pub clean: ImageTensor,
    pub hazy: ImageTensor,
    pub recipe: HazeRecipe,
}

/// Per-pair seed derivation: pairs are independent of generation order.
fn pair_seed(domain_seed: u64, index: usize, stream: u64) -> u64 {
    let mut h = domain_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((index as u64) << 8)
        .wrapping_add(stream);
    h ^= h >> 30;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 27;
    h
}

fn generate_pair(spec: &DomainSpec, index: usize) -> Result<SynthPair> {
    let (h, w) = spec.size;
    let clean = generate_clean_scene_with(pair_seed(spec.seed, index, 1), h, w, &spec.scene)?;
    let depth = generate_depth_map(pair_seed(spec.seed, index, 2), h, w);

    let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(spec.seed, index, 3));
    let (blo, bhi) = spec.haze.beta_range;
    let beta = if bhi > blo {
        rng.random_range(blo..bhi)
    } else {
        blo
    };
    let mut airlight = [0.0; 3];
    for c in 0..3 {
        let (lo, hi) = (spec.haze.airlight_lo[c], spec.haze.airlight_hi[c]);
        airlight[c] = if hi > lo { rng.random_range(lo..hi) } else { lo };
    }
    let haze_field = if spec.haze.homogeneous {
        None
    } else {
        // Keep the field in [0.3, 1] so haze is present everywhere but
        // visibly modulated.
        let f = generate_haze_field(
            pair_seed(spec.seed, index, 4),
            h,
            w,
            spec.haze.field_octaves,
            spec.haze.field_scale,
        );
        Some(f.mapv(|v| 0.3 + 0.7 * v))
    };

    let recipe = HazeRecipe::new(depth, beta, airlight, haze_field)?;
    let t = transmission_from_recipe(&recipe);
    let hazy = compose_asm(&clean, &t, airlight)?;
    Ok(SynthPair {
        clean,
        hazy,
        recipe,
    })
}

/// Generates the full dataset for a domain. Every returned pair satisfies
/// the constructive invariant `hazy == compose_asm(clean, t(recipe), A)`
/// bit for bit.
pub fn generate_domain(spec: &DomainSpec) -> Result<Vec<SynthPair>> {
    spec.validate()?;
    (0..spec.pair_count)
        .map(|i| generate_pair(spec, i))
        .collect()
}

// ---------------------------------------------------------------------------
// Disk layout
// ---------------------------------------------------------------------------

/// Writes `domain.json`, `clean/NNNN.png`, `hazy/NNNN.png` (16-bit).
pub fn save_domain(dir: &Path, spec: &DomainSpec, pairs: &[SynthPair]) -> Result<()> {
    let mk = |p: &Path| {
        std::fs::create_dir_all(p).map_err(|e| PhatError::Io {
            path: p.to_path_buf(),
            source: e,
        })
    };
    mk(dir)?;
    mk(&dir.join("clean"))?;
    mk(&dir.join("hazy"))?;
    let spec_json = serde_json::to_string_pretty(spec)
        .map_err(|e| PhatError::Config(format!("domain spec serialization: {e}")))?;
    let spec_path = dir.join("domain.json");
    std::fs::write(&spec_path, spec_json).map_err(|e| PhatError::Io {
        path: spec_path.clone(),
        source: e,
    })?;
    for (i, pair) in pairs.iter().enumerate() {
        pngio::save_png16(&dir.join("clean").join(format!("{i:04}.png")), &pair.clean)?;
        pngio::save_png16(&dir.join("hazy").join(format!("{i:04}.png")), &pair.hazy)?;
    }
    Ok(())
}

/// Reads a `domain.json` spec back.
pub fn load_domain_spec(dir: &Path) -> Result<DomainSpec> {
    let path = dir.join("domain.json");
    let text = std::fs::read_to_string(&path).map_err(|e| PhatError::Io {
        path: path.clone(),
        source: e,
    })?;
    let spec: DomainSpec = serde_json::from_str(&text)
        .map_err(|e| PhatError::Config(format!("malformed domain spec {}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

/// What to do with images whose sides are not divisible by 32.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResolutionPolicy {
    /// Refuse the image with an error.
    Reject,
    /// Center-crop to the largest compatible size.
    Crop,
}

fn list_stems(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| PhatError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    for entry in entries {
        let entry = entry.map_err(|e| PhatError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

fn center_crop_to_multiple(img: ImageTensor, divisor: usize) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    let (ch, cw) = (h - h % divisor, w - w % divisor);
    if ch == 0 || cw == 0 {
        return Err(PhatError::Dataset(format!(
            "image {h}x{w} too small to crop to a multiple of {divisor}"
        )));
    }
    if (ch, cw) == (h, w) {
        return Ok(img);
    }
    let y0 = (h - ch) / 2;
    let x0 = (w - cw) / 2;
    let cropped = crate::image::crop_hwc(img.data(), y0, x0, ch, cw)?;
    ImageTensor::new(cropped)
}

/// Loads `(hazy, clean)` pairs from a dataset directory with layout
/// `hazy/NN.png` + `clean/NN.png`, sorted by stem. Stems must match
/// one-to-one; each pair must agree in resolution.
pub fn load_external_dataset(
    root: &Path,
    policy: ResolutionPolicy,
) -> Result<Vec<(String, ImageTensor, ImageTensor)>> {
    let hazy = list_stems(&root.join("hazy"))?;
    let clean = list_stems(&root.join("clean"))?;
    for stem in hazy.keys() {
        if !clean.contains_key(stem) {
            return Err(PhatError::Dataset(format!(
                "hazy/{stem}.png has no clean counterpart"
            )));
        }
    }
    for stem in clean.keys() {
        if !hazy.contains_key(stem) {
            return Err(PhatError::Dataset(format!(
                "clean/{stem}.png has no hazy counterpart"
            )));
        }
    }
    let mut pairs = Vec::with_capacity(hazy.len());
    for (stem, hazy_path) in &hazy {
        let hazy_img = pngio::load_png(hazy_path)?;
        let clean_img = pngio::load_png(&clean[stem])?;
        if hazy_img.data().dim() != clean_img.data().dim() {
            return Err(PhatError::Dataset(format!(
                "pair {stem}: hazy is {}x{} but clean is {}x{}",
                hazy_img.height(),
                hazy_img.width(),
                clean_img.height(),
                clean_img.width()
            )));
        }
        let (h, w) = (hazy_img.height(), hazy_img.width());
        let (hazy_img, clean_img) = if h % SIZE_DIVISOR == 0 && w % SIZE_DIVISOR == 0 {
            (hazy_img, clean_img)
        } else {
            match policy {
                ResolutionPolicy::Reject => {
                    return Err(PhatError::Dataset(format!(
                        "pair {stem}: resolution {h}x{w} not divisible by {SIZE_DIVISOR} \
                         (pass a crop policy to auto-fit)"
                    )));
                }
                ResolutionPolicy::Crop => (
                    center_crop_to_multiple(hazy_img, SIZE_DIVISOR)?,
                    center_crop_to_multiple(clean_img, SIZE_DIVISOR)?,
                ),
            }
        };
        pairs.push((stem.clone(), hazy_img, clean_img));
    }
    Ok(pairs)
}
