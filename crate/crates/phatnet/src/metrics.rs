//! Full-reference image quality metrics: PSNR and SSIM.
//!
//! PSNR is defined on the [0, 1] dynamic range, `10·log10(1/MSE)`, so
//! reported dB values assume unit peak signal. SSIM uses the canonical
//! 11×11 Gaussian window (σ = 1.5, K1 = 0.01, K2 = 0.03), computed per
//! channel over valid windows only and averaged.

use crate::error::{PhatError, Result};
use crate::image::ImageTensor;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB; returns `+∞` when the images match
/// exactly (zero MSE).
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.data().dim() != b.data().dim() {
        return Err(PhatError::Dimension(format!(
            "psnr: shape mismatch {:?} vs {:?}",
            a.data().dim(),
            b.data().dim()
        )));
    }
    let n = a.data().len() as f64;
    let mut sq = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        let d = x - y;
        sq += d * d;
    }
    let mse = sq / n;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

/// Normalized 1-D Gaussian taps for the SSIM window.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable valid-mode Gaussian filter used for the local SSIM moments.
fn gauss_filter_valid(x: &Array2<f64>, taps: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = x.dim();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    // Horizontal pass.
    let mut tmp = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for ox in 0..ow {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * x[[y, ox + k]];
            }
            tmp[[y, ox]] = acc;
        }
    }
    // Vertical pass.
    let mut out = Array2::<f64>::zeros((oh, ow));
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * tmp[[oy + k, ox]];
            }
            out[[oy, ox]] = acc;
        }
    }
    out
}

/// Mean structural similarity over valid 11×11 windows, per channel,
/// averaged across channels. Requires `H, W ≥ 11`.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.data().dim() != b.data().dim() {
        return Err(PhatError::Dimension(format!(
            "ssim: shape mismatch {:?} vs {:?}",
            a.data().dim(),
            b.data().dim()
        )));
    }
    let (h, w, c) = a.data().dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(PhatError::Parameter(format!(
            "ssim needs images at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let taps = gaussian_taps();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for ch in 0..c {
        let pa = a.channel(ch);
        let pb = b.channel(ch);
        let mu_a = gauss_filter_valid(&pa, &taps);
        let mu_b = gauss_filter_valid(&pb, &taps);
        let aa = gauss_filter_valid(&(&pa * &pa), &taps);
        let bb = gauss_filter_valid(&(&pb * &pb), &taps);
        let ab = gauss_filter_valid(&(&pa * &pb), &taps);
        let mut acc = 0.0;
        for ((&ma, &mb), ((&saa, &sbb), &sab)) in mu_a
            .iter()
            .zip(mu_b.iter())
            .zip(aa.iter().zip(bb.iter()).zip(ab.iter()))
        {
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            acc += num / den;
        }
        total += acc / (mu_a.len() as f64);
    }
    Ok(total / c as f64)
}

/// Per-image metric row. `psnr_db = None` encodes the +∞ sentinel (exact
/// match), which JSON cannot represent as a number.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    pub psnr_db: Option<f64>,
    pub ssim: f64,
}

impl ImageScore {
    pub fn new(name: impl Into<String>, psnr_db: f64, ssim: f64) -> Self {
        Self {
            name: name.into(),
            psnr_db: if psnr_db.is_finite() {
                Some(psnr_db)
            } else {
                None
            },
            ssim,
        }
    }
}

/// Aggregate report: per-image rows plus arithmetic means. Infinite PSNR
/// entries are excluded from the mean and counted separately.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub scores: Vec<ImageScore>,
    pub mean_psnr_db: Option<f64>,
    pub infinite_psnr_count: usize,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn from_scores(scores: Vec<ImageScore>) -> Self {
        let finite: Vec<f64> = scores.iter().filter_map(|s| s.psnr_db).collect();
        let infinite_psnr_count = scores.len() - finite.len();
        let mean_psnr_db = if finite.is_empty() {
            None
        } else {
            Some(finite.iter().sum::<f64>() / finite.len() as f64)
        };
        let mean_ssim = if scores.is_empty() {
            0.0
        } else {
            scores.iter().map(|s| s.ssim).sum::<f64>() / scores.len() as f64
        };
        Self {
            scores,
            mean_psnr_db,
            infinite_psnr_count,
            mean_ssim,
        }
    }

    /// CSV rendering: one row per image, aggregate footer. Infinite PSNR
    /// prints as `inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,psnr_db,ssim\n");
        let fmt = |p: Option<f64>| p.map_or_else(|| "inf".to_string(), |v| format!("{v:.6}"));
        for s in &self.scores {
            out.push_str(&format!("{},{},{:.6}\n", s.name, fmt(s.psnr_db), s.ssim));
        }
        out.push_str(&format!(
            "mean,{},{:.6}\n",
            fmt(self.mean_psnr_db),
            self.mean_ssim
        ));
        out
    }
}

/// Scores a list of (output, reference) pairs.
pub fn evaluate_pairs(pairs: &[(String, ImageTensor, ImageTensor)]) -> Result<MetricReport> {
    let mut scores = Vec::with_capacity(pairs.len());
    for (name, out, reference) in pairs {
        let p = psnr(out, reference)?;
        let s = ssim(out, reference)?;
        scores.push(ImageScore::new(name.clone(), p, s));
    }
    Ok(MetricReport::from_scores(scores))
}
