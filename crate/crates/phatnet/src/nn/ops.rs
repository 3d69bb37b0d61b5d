//! Elementwise and resampling operations with explicit adjoints.

use super::Scalar;
use ndarray::{Array1, Array3};

/// Pre-activation values above this are treated as saturated by
/// [`exp_neg_relu`]; `exp(-80)` is still a positive normal float in both
/// `f32` and `f64`, which keeps the (0, 1] range guarantee exact.
pub const EXP_NEG_CLAMP: f64 = 80.0;

pub fn leaky_relu<F: Scalar>(x: &Array3<F>, slope: f64) -> Array3<F> {
    let s = F::from_f64(slope);
    x.mapv(|v| if v > F::zero() { v } else { v * s })
}

pub fn leaky_relu_backward<F: Scalar>(x: &Array3<F>, gy: &Array3<F>, slope: f64) -> Array3<F> {
    let s = F::from_f64(slope);
    let mut gx = gy.clone();
    ndarray::Zip::from(&mut gx).and(x).for_each(|g, &v| {
        if v <= F::zero() {
            *g = *g * s;
        }
    });
    gx
}

/// Bound for [`squash_pre`]: haze-factor pre-activations are soft-limited to
/// (−B, B), so `exp(−ReLU(·))` stays above `e^{−B} ≈ 0.05` and the latent
/// fusion can never silence a coordinate entirely.
pub const PRE_SQUASH_BOUND: f64 = 3.0;

/// `B·tanh(x/B)` elementwise: identity-like near zero, saturating at ±B.
pub fn squash_pre<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    let b = F::from_f64(PRE_SQUASH_BOUND);
    x.mapv(|v| (v / b).tanh() * b)
}

/// Backward of [`squash_pre`]: `g·(1 − tanh²(x/B))`.
pub fn squash_pre_backward<F: Scalar>(x: &Array3<F>, gy: &Array3<F>) -> Array3<F> {
    let b = F::from_f64(PRE_SQUASH_BOUND);
    let mut gx = Array3::zeros(x.dim());
    ndarray::Zip::from(&mut gx).and(x).and(gy).for_each(|g, &xv, &gv| {
        let t = (xv / b).tanh();
        *g = gv * (F::one() - t * t);
    });
    gx
}

/// `exp(−ReLU(x))`, the normalization that maps unconstrained activations
/// into (0, 1]. Saturated inputs are clamped before the exponential so the
/// output can never underflow to zero.
pub fn exp_neg_relu<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    let hi = F::from_f64(EXP_NEG_CLAMP);
    x.mapv(|v| {
        let r = if v > F::zero() { v.min(hi) } else { F::zero() };
        (-r).exp()
    })
}

/// Backward of [`exp_neg_relu`]; needs both the input and the forward output.
pub fn exp_neg_relu_backward<F: Scalar>(
    x: &Array3<F>,
    y: &Array3<F>,
    gy: &Array3<F>,
) -> Array3<F> {
    let hi = F::from_f64(EXP_NEG_CLAMP);
    let mut gx = Array3::zeros(x.dim());
    ndarray::Zip::from(&mut gx)
        .and(x)
        .and(y)
        .and(gy)
        .for_each(|g, &xv, &yv, &gv| {
            if xv > F::zero() && xv < hi {
                *g = -yv * gv;
            }
        });
    gx
}

/// Mean over the spatial grid, producing one value per channel.
pub fn global_avg_pool<F: Scalar>(x: &Array3<F>) -> Array1<F> {
    let (c, h, w) = x.dim();
    let inv = F::from_f64(1.0 / (h * w) as f64);
    let mut out = Array1::zeros(c);
    for ch in 0..c {
        let mut acc = F::zero();
        for &v in x.index_axis(ndarray::Axis(0), ch).iter() {
            acc = acc + v;
        }
        out[ch] = acc * inv;
    }
    out
}

pub fn global_avg_pool_backward<F: Scalar>(
    gy: &Array1<F>,
    c: usize,
    h: usize,
    w: usize,
) -> Array3<F> {
    let inv = F::from_f64(1.0 / (h * w) as f64);
    let mut gx = Array3::zeros((c, h, w));
    for ch in 0..c {
        let g = gy[ch] * inv;
        gx.index_axis_mut(ndarray::Axis(0), ch).fill(g);
    }
    gx
}

/// Duplicates every pixel into a 2×2 block.
pub fn nearest_up2<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, 2 * h, 2 * w));
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let v = x[[ch, y, xx]];
                out[[ch, 2 * y, 2 * xx]] = v;
                out[[ch, 2 * y, 2 * xx + 1]] = v;
                out[[ch, 2 * y + 1, 2 * xx]] = v;
                out[[ch, 2 * y + 1, 2 * xx + 1]] = v;
            }
        }
    }
    out
}

pub fn nearest_up2_backward<F: Scalar>(gy: &Array3<F>) -> Array3<F> {
    let (c, h2, w2) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                gx[[ch, y, xx]] = gy[[ch, 2 * y, 2 * xx]]
                    + gy[[ch, 2 * y, 2 * xx + 1]]
                    + gy[[ch, 2 * y + 1, 2 * xx]]
                    + gy[[ch, 2 * y + 1, 2 * xx + 1]];
            }
        }
    }
    gx
}

/// Bilinear ×1/2 downsampling. With half-pixel centers an exact factor of
/// two reduces to the 2×2 block mean.
pub fn bilinear_down2<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "bilinear_down2 needs even dims");
    let q = F::from_f64(0.25);
    let mut out = Array3::zeros((c, h / 2, w / 2));
    for ch in 0..c {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                let s = x[[ch, 2 * y, 2 * xx]]
                    + x[[ch, 2 * y, 2 * xx + 1]]
                    + x[[ch, 2 * y + 1, 2 * xx]]
                    + x[[ch, 2 * y + 1, 2 * xx + 1]];
                out[[ch, y, xx]] = s * q;
            }
        }
    }
    out
}

pub fn bilinear_down2_backward<F: Scalar>(gy: &Array3<F>) -> Array3<F> {
    let (c, oh, ow) = gy.dim();
    let q = F::from_f64(0.25);
    let mut gx = Array3::zeros((c, oh * 2, ow * 2));
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let g = gy[[ch, y, xx]] * q;
                gx[[ch, 2 * y, 2 * xx]] = g;
                gx[[ch, 2 * y, 2 * xx + 1]] = g;
                gx[[ch, 2 * y + 1, 2 * xx]] = g;
                gx[[ch, 2 * y + 1, 2 * xx + 1]] = g;
            }
        }
    }
    gx
}

/// Source taps for one output index of the ×2 bilinear upsampler
/// (half-pixel centers, borders clamped).
#[inline]
fn up2_taps(o: usize, n: usize) -> (usize, f64, usize, f64) {
    let k = o / 2;
    if o % 2 == 0 {
        let i0 = k.saturating_sub(1);
        (i0, 0.25, k, 0.75)
    } else {
        let i1 = (k + 1).min(n - 1);
        (k, 0.75, i1, 0.25)
    }
}

/// Bilinear ×2 upsampling with half-pixel centers, separable in y and x.
pub fn bilinear_up2<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    // Pass 1: rows.
    let mut tmp = Array3::<F>::zeros((c, 2 * h, w));
    for ch in 0..c {
        for oy in 0..2 * h {
            let (i0, w0, i1, w1) = up2_taps(oy, h);
            let (w0, w1) = (F::from_f64(w0), F::from_f64(w1));
            for xx in 0..w {
                tmp[[ch, oy, xx]] = x[[ch, i0, xx]] * w0 + x[[ch, i1, xx]] * w1;
            }
        }
    }
    // Pass 2: columns.
    let mut out = Array3::<F>::zeros((c, 2 * h, 2 * w));
    for ch in 0..c {
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                let (i0, w0, i1, w1) = up2_taps(ox, w);
                out[[ch, oy, ox]] = tmp[[ch, oy, i0]] * F::from_f64(w0)
                    + tmp[[ch, oy, i1]] * F::from_f64(w1);
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_up2`].
pub fn bilinear_up2_backward<F: Scalar>(gy: &Array3<F>) -> Array3<F> {
    let (c, h2, w2) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    // Adjoint of the column pass.
    let mut tmp = Array3::<F>::zeros((c, h2, w));
    for ch in 0..c {
        for oy in 0..h2 {
            for ox in 0..w2 {
                let (i0, w0, i1, w1) = up2_taps(ox, w);
                let g = gy[[ch, oy, ox]];
                tmp[[ch, oy, i0]] = tmp[[ch, oy, i0]] + g * F::from_f64(w0);
                tmp[[ch, oy, i1]] = tmp[[ch, oy, i1]] + g * F::from_f64(w1);
            }
        }
    }
    // Adjoint of the row pass.
    let mut gx = Array3::<F>::zeros((c, h, w));
    for ch in 0..c {
        for oy in 0..h2 {
            let (i0, w0, i1, w1) = up2_taps(oy, h);
            let (w0, w1) = (F::from_f64(w0), F::from_f64(w1));
            for xx in 0..w {
                let g = tmp[[ch, oy, xx]];
                gx[[ch, i0, xx]] = gx[[ch, i0, xx]] + g * w0;
                gx[[ch, i1, xx]] = gx[[ch, i1, xx]] + g * w1;
            }
        }
    }
    gx
}
