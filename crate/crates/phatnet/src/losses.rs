//! Training objectives.
//!
//! Both losses share one functional form: per-scale mean absolute
//! difference between a stage output and a bilinear pyramid of a single
//! reference image, summed over scales.
//!
//! * Haze-transfer consistency compares against the hazy input itself —
//!   re-applying extracted haze to the paired clean image must reproduce
//!   the hazy original.
//! * Content leakage compares against the clean content input when the
//!   "hazy" slot holds an unpaired clean image — with no haze to extract,
//!   the network must pass the content image through unchanged.
//!
//! The total objective is their unweighted sum.
//!
//! The per-scale reduction is the arithmetic mean over all elements (not
//! the sum), so loss magnitudes — and therefore learning rates — do not
//! depend on the training resolution.

use crate::error::{PhatError, Result};
use crate::image::{downsample2_hwc, ImageTensor};
use crate::nn::ops::bilinear_down2;
use crate::nn::Scalar;
use crate::phatnet::MultiScaleOutput;
use ndarray::Array3;

/// A per-scale decomposed loss; `total` is exactly the sum of `per_scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    total: f64,
    per_scale: Vec<f64>,
}

impl LossValue {
    pub(crate) fn from_scales(per_scale: Vec<f64>) -> Result<Self> {
        if per_scale.iter().any(|v| !v.is_finite()) {
            return Err(PhatError::NumericDivergence(
                "loss contains non-finite scale terms".into(),
            ));
        }
        let total = per_scale.iter().sum();
        Ok(Self { total, per_scale })
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn per_scale(&self) -> &[f64] {
        &self.per_scale
    }
}

fn mean_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let n = a.len() as f64;
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n
}

/// Shared body of both losses: mean-L1 of every scale against the matching
/// level of `reference`'s pyramid.
fn pyramid_l1(out: &MultiScaleOutput, reference: &ImageTensor) -> Result<LossValue> {
    let mut level = reference.data().clone();
    let mut per_scale = Vec::with_capacity(out.scale_count());
    for (s, o) in out.outputs().iter().enumerate() {
        if s > 0 {
            level = downsample2_hwc(&level)?;
        }
        if o.dim() != level.dim() {
            return Err(PhatError::Dimension(format!(
                "scale {s} output {:?} vs reference {:?}",
                o.dim(),
                level.dim()
            )));
        }
        per_scale.push(mean_abs_diff(o, &level));
    }
    LossValue::from_scales(per_scale)
}

/// Haze-transfer-consistency loss: the multi-scale output of
/// `forward(hazy, clean)` against the hazy image's own pyramid.
pub fn htc_loss(out: &MultiScaleOutput, hazy_ref: &ImageTensor) -> Result<LossValue> {
    pyramid_l1(out, hazy_ref)
}

/// Content-leakage loss: the multi-scale output of
/// `forward(unpaired_clean, clean)` against the clean content pyramid.
pub fn cl_loss(out: &MultiScaleOutput, clean_ref: &ImageTensor) -> Result<LossValue> {
    pyramid_l1(out, clean_ref)
}

/// Unweighted total objective.
pub fn total_loss(htc: &LossValue, cl: &LossValue) -> f64 {
    htc.total() + cl.total()
}

// ---------------------------------------------------------------------------
// Training path (generic precision, crate-internal)
// ---------------------------------------------------------------------------

/// Mean-L1 per scale against a bilinear pyramid of `reference` (C×H×W,
/// full resolution), returning both the scale terms and the gradient of
/// each term with respect to the raw stage output.
///
/// The subgradient of |r| at r = 0 is taken as 0.
pub(crate) fn multiscale_l1_with_grad<F: Scalar>(
    outs: &[Array3<F>],
    reference: &Array3<F>,
) -> (Vec<F>, Vec<Array3<F>>) {
    let mut level = reference.clone();
    let mut per_scale = Vec::with_capacity(outs.len());
    let mut grads = Vec::with_capacity(outs.len());
    for (s, o) in outs.iter().enumerate() {
        if s > 0 {
            level = bilinear_down2(&level);
        }
        assert_eq!(o.dim(), level.dim(), "scale {s} shape mismatch");
        let inv_n = F::from_f64(1.0 / o.len() as f64);
        let mut acc = F::zero();
        let mut g = Array3::zeros(o.dim());
        ndarray::Zip::from(&mut g)
            .and(o)
            .and(&level)
            .for_each(|gi, &x, &y| {
                let r = x - y;
                acc = acc + r.abs();
                *gi = if r > F::zero() {
                    inv_n
                } else if r < F::zero() {
                    -inv_n
                } else {
                    F::zero()
                };
            });
        per_scale.push(acc * inv_n);
        grads.push(g);
    }
    (per_scale, grads)
}
