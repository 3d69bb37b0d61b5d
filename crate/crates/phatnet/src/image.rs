//! Image containers used throughout the pipeline.
//!
//! An [`ImageTensor`] is an H×W×3 array of intensities in `[0, 1]`. Heights
//! and widths must be at least 8 and divisible by 8 so the 1/8-resolution
//! latent pathway is always well defined.

use crate::error::{PhatError, Result};
use ndarray::{Array3, ArrayView3};

/// Minimum image side length.
pub const MIN_SIDE: usize = 8;
/// Required divisor for image side lengths.
pub const SIDE_DIVISOR: usize = 8;

/// H×W×3 image with intensities clamped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    /// Builds an image from an H×W×3 array, clamping values into `[0, 1]`.
    ///
    /// Rejects non-finite entries and unsupported geometry (sides below 8 or
    /// not divisible by 8).
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if c != 3 {
            return Err(PhatError::Dimension(format!(
                "expected 3 channels, got {c}"
            )));
        }
        check_geometry(h, w)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PhatError::Parameter(
                "image contains non-finite values".into(),
            ));
        }
        let clamped = data.mapv(|v| v.clamp(0.0, 1.0));
        Ok(Self { data: clamped })
    }

    /// Constant-valued image.
    pub fn constant(height: usize, width: usize, value: [f64; 3]) -> Result<Self> {
        let data = Array3::from_shape_fn((height, width, 3), |(_, _, c)| value[c]);
        Self::new(data)
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.data.view()
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// Copy of one channel plane as an H×W array.
    pub fn channel(&self, c: usize) -> ndarray::Array2<f64> {
        self.data.index_axis(ndarray::Axis(2), c).to_owned()
    }

    /// Mean intensity over all pixels and channels.
    pub fn mean(&self) -> f64 {
        let n = self.data.len() as f64;
        self.data.iter().sum::<f64>() / n
    }

    /// Largest minus smallest intensity over all pixels and channels.
    pub fn dynamic_range(&self) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in self.data.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        hi - lo
    }
}

pub(crate) fn check_geometry(h: usize, w: usize) -> Result<()> {
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(PhatError::Dimension(format!(
            "image sides must be at least {MIN_SIDE}, got {h}x{w}"
        )));
    }
    if h % SIDE_DIVISOR != 0 || w % SIDE_DIVISOR != 0 {
        return Err(PhatError::Dimension(format!(
            "image sides must be divisible by {SIDE_DIVISOR}, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Halves the resolution of an H×W×C array by averaging 2×2 blocks.
///
/// Matches the bilinear downsampling used inside the multi-scale network:
/// for an exact factor of two, bilinear resampling with half-pixel centers
/// reduces to the 2×2 block mean.
pub fn downsample2_hwc(data: &Array3<f64>) -> Result<Array3<f64>> {
    let (h, w, c) = data.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(PhatError::Dimension(format!(
            "cannot halve odd resolution {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::zeros((oh, ow, c));
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let s = data[[2 * y, 2 * x, ch]]
                    + data[[2 * y, 2 * x + 1, ch]]
                    + data[[2 * y + 1, 2 * x, ch]]
                    + data[[2 * y + 1, 2 * x + 1, ch]];
                out[[y, x, ch]] = s * 0.25;
            }
        }
    }
    Ok(out)
}

/// Extracts a crop of size `ch`×`cw` with top-left corner (`y0`, `x0`).
pub fn crop_hwc(data: &Array3<f64>, y0: usize, x0: usize, ch: usize, cw: usize) -> Result<Array3<f64>> {
    let (h, w, _) = data.dim();
    if y0 + ch > h || x0 + cw > w {
        return Err(PhatError::Dimension(format!(
            "crop {ch}x{cw} at ({y0},{x0}) exceeds image {h}x{w}"
        )));
    }
    Ok(data
        .slice(ndarray::s![y0..y0 + ch, x0..x0 + cw, ..])
        .to_owned())
}

/// Stacks images horizontally with a thin white separator, for review grids.
pub fn hstack_grid(images: &[&ImageTensor], separator_px: usize) -> Result<ImageTensor> {
    if images.is_empty() {
        return Err(PhatError::Parameter("empty image list".into()));
    }
    let h = images[0].height();
    for img in images {
        if img.height() != h {
            return Err(PhatError::Dimension(
                "grid images must share a height".into(),
            ));
        }
    }
    let total_w: usize =
        images.iter().map(|i| i.width()).sum::<usize>() + separator_px * (images.len() - 1);
    // Round the canvas width up so the result is still a valid ImageTensor.
    let canvas_w = total_w.div_ceil(SIDE_DIVISOR) * SIDE_DIVISOR;
    let mut out = Array3::from_elem((h, canvas_w, 3), 1.0);
    let mut x = 0;
    for img in images {
        out.slice_mut(ndarray::s![.., x..x + img.width(), ..])
            .assign(img.data());
        x += img.width() + separator_px;
    }
    ImageTensor::new(out)
}
