//! Image-domain atmospheric scattering model.
//!
//! Haze formation follows `I = J·t + A·(1 − t)` with transmission
//! `t = exp(−β·d)` for haze density β and scene depth d. This module is the
//! physical oracle the learned pipeline is verified against: every synthetic
//! hazy image can be re-composed analytically from its recipe.

use crate::error::{PhatError, Result};
use crate::image::ImageTensor;
use ndarray::{Array2, Array3};

/// Per-pixel transmission in `[0, 1]`: 1 = clear, 0 = fully hazed.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionMap {
    data: Array2<f64>,
}

impl TransmissionMap {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PhatError::Parameter(
                "transmission contains non-finite values".into(),
            ));
        }
        Ok(Self {
            data: data.mapv(|v| v.clamp(0.0, 1.0)),
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), value))
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }
}

/// Ground-truth synthetic haze parameters.
///
/// `haze_field`, when present, modulates the density spatially to model
/// non-homogeneous haze; with it absent the recipe reduces to the plain
/// scattering model. Atmospheric light is carried per channel; a gray vector
/// recovers the scalar model.
#[derive(Debug, Clone, PartialEq)]
pub struct HazeRecipe {
    pub depth: Array2<f64>,
    pub beta: f64,
    pub atmospheric_light: [f64; 3],
    pub haze_field: Option<Array2<f64>>,
}

impl HazeRecipe {
    pub fn new(
        depth: Array2<f64>,
        beta: f64,
        atmospheric_light: [f64; 3],
        haze_field: Option<Array2<f64>>,
    ) -> Result<Self> {
        if !beta.is_finite() || beta <= 0.0 {
            return Err(PhatError::Parameter(format!(
                "haze density must be positive, got {beta}"
            )));
        }
        if depth.iter().any(|&d| !d.is_finite() || d < 0.0) {
            return Err(PhatError::Parameter(
                "depth map must be finite and non-negative".into(),
            ));
        }
        for (i, &a) in atmospheric_light.iter().enumerate() {
            if !a.is_finite() || !(0.0..=1.0).contains(&a) {
                return Err(PhatError::Parameter(format!(
                    "atmospheric light channel {i} out of [0,1]: {a}"
                )));
            }
        }
        if let Some(field) = &haze_field {
            if field.dim() != depth.dim() {
                return Err(PhatError::Dimension(format!(
                    "haze field {:?} does not match depth {:?}",
                    field.dim(),
                    depth.dim()
                )));
            }
            if field.iter().any(|&f| !f.is_finite() || !(0.0..=1.0).contains(&f)) {
                return Err(PhatError::Parameter(
                    "haze field values must lie in [0,1]".into(),
                ));
            }
        }
        Ok(Self {
            depth,
            beta,
            atmospheric_light,
            haze_field,
        })
    }
}

/// Composes a hazy image: `out = clean·t + A·(1 − t)` per pixel and channel.
///
/// The result is clamped to `[0, 1]`; floating error can exceed the bounds
/// by ulps even though the affine blend is a convex combination.
pub fn compose_asm(clean: &ImageTensor, t: &TransmissionMap, a: [f64; 3]) -> Result<ImageTensor> {
    if t.height() != clean.height() || t.width() != clean.width() {
        return Err(PhatError::Dimension(format!(
            "transmission {}x{} does not match image {}x{}",
            t.height(),
            t.width(),
            clean.height(),
            clean.width()
        )));
    }
    for (i, &ai) in a.iter().enumerate() {
        if !ai.is_finite() || !(0.0..=1.0).contains(&ai) {
            return Err(PhatError::Parameter(format!(
                "atmospheric light channel {i} out of [0,1]: {ai}"
            )));
        }
    }
    let (h, w) = (clean.height(), clean.width());
    let mut out = Array3::zeros((h, w, 3));
    let src = clean.data();
    let tm = t.data();
    for y in 0..h {
        for x in 0..w {
            let tv = tm[[y, x]];
            for c in 0..3 {
                out[[y, x, c]] = src[[y, x, c]] * tv + a[c] * (1.0 - tv);
            }
        }
    }
    ImageTensor::new(out)
}

/// Derives the transmission map `t = exp(−β·field·d)` from a recipe.
///
/// The field defaults to 1 everywhere; the result always lies in `(0, 1]`.
pub fn transmission_from_recipe(recipe: &HazeRecipe) -> TransmissionMap {
    let t = match &recipe.haze_field {
        Some(field) => ndarray::Zip::from(&recipe.depth)
            .and(field)
            .map_collect(|&d, &f| (-recipe.beta * f * d).exp()),
        None => recipe.depth.mapv(|d| (-recipe.beta * d).exp()),
    };
    TransmissionMap { data: t }
}

/// Raises the transmission to `gamma` elementwise.
///
/// Gamma above 1 pushes transmission down (denser haze); below 1 thins it.
pub fn gamma_adjust(t: &TransmissionMap, gamma: f64) -> Result<TransmissionMap> {
    if !gamma.is_finite() || gamma <= 0.0 {
        return Err(PhatError::Parameter(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    if gamma == 1.0 {
        return Ok(t.clone());
    }
    Ok(TransmissionMap {
        data: t.data.mapv(|v| v.powf(gamma)),
    })
}

/// Reverses the row order of the transmission map. Applying it twice is the
/// identity.
pub fn flip_vertical(t: &TransmissionMap) -> TransmissionMap {
    let mut flipped = t.data.clone();
    flipped.invert_axis(ndarray::Axis(0));
    TransmissionMap { data: flipped }
}
