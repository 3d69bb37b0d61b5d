//! 3×3 convolution with padding 1 and stride 1 or 2.
//!
//! Forward lowers the input to a column matrix and runs one GEMM per call;
//! backward recomputes the column matrix from the cached input, so only the
//! input tensor has to be kept alive between the passes.

use super::param::{Grads, ParamId, ParamStore};
use super::Scalar;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3};
use rand::Rng;

pub const KERNEL: usize = 3;
pub const PAD: usize = 1;

/// 3×3 convolution layer. Weights live in the parameter store as
/// `[cout, cin, 3, 3]` plus a `[cout]` bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl Conv2d {
    /// Allocates weights under `name` and initializes them with fan-in
    /// scaled uniform samples, `U(±√(6/fan_in))`, which keeps activation
    /// variance roughly constant through deep leaky-rectified stacks;
    /// biases start at zero.
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self::new_with_gain(store, name, cin, cout, stride, 1.0, rng)
    }

    /// [`Conv2d::new`] with the init bound multiplied by `gain`; small gains
    /// make a layer start close to the zero map while staying trainable.
    pub fn new_with_gain<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        assert!(stride == 1 || stride == 2, "unsupported stride {stride}");
        let w = store.alloc(format!("{name}.w"), &[cout, cin, KERNEL, KERNEL]);
        let b = store.alloc(format!("{name}.b"), &[cout]);
        let fan_in = (cin * KERNEL * KERNEL) as f64;
        store.init_uniform(w, gain * (6.0 / fan_in).sqrt(), rng);
        Self {
            w,
            b,
            cin,
            cout,
            stride,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (conv_out(h, self.stride), conv_out(w, self.stride))
    }

    pub fn forward<F: Scalar>(&self, store: &ParamStore<F>, x: &Array3<F>) -> Array3<F> {
        let (cin, h, w) = x.dim();
        assert_eq!(cin, self.cin, "conv input channel mismatch");
        let (oh, ow) = self.out_dims(h, w);
        let n = oh * ow;
        let k = self.cin * KERNEL * KERNEL;
        let col = im2col(x, self.stride);
        let wmat = store.view2(self.w, self.cout, k);
        let mut out = Array2::<F>::zeros((self.cout, n));
        general_mat_mul(F::one(), &wmat, &col.view(), F::zero(), &mut out.view_mut());
        let bias = store.slice(self.b);
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            let bv = bias[r];
            row.mapv_inplace(|v| v + bv);
        }
        let (vec, _) = out.into_raw_vec_and_offset();
        Array3::from_shape_vec((self.cout, oh, ow), vec).expect("conv output shape")
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &Array3<F>,
        gy: &Array3<F>,
        grads: &mut Grads<F>,
    ) -> Array3<F> {
        let (cin, h, w) = x.dim();
        let (cout, oh, ow) = gy.dim();
        assert_eq!(cin, self.cin);
        assert_eq!(cout, self.cout);
        debug_assert_eq!((oh, ow), self.out_dims(h, w));
        let n = oh * ow;
        let k = self.cin * KERNEL * KERNEL;

        let col = im2col(x, self.stride);
        let gy2 = gy
            .view()
            .into_shape_with_order((cout, n))
            .expect("grad reshape");

        {
            let mut dw = grads.view2_mut(store, self.w, cout, k);
            general_mat_mul(F::one(), &gy2, &col.t(), F::one(), &mut dw);
        }
        {
            let db = grads.slice_mut(store, self.b);
            for (r, row) in gy2.rows().into_iter().enumerate() {
                let mut acc = F::zero();
                for &v in row {
                    acc = acc + v;
                }
                db[r] = db[r] + acc;
            }
        }

        let wmat = store.view2(self.w, cout, k);
        let mut dcol = Array2::<F>::zeros((k, n));
        general_mat_mul(F::one(), &wmat.t(), &gy2, F::zero(), &mut dcol.view_mut());
        col2im(&dcol, cin, h, w, self.stride)
    }
}

pub fn conv_out(dim: usize, stride: usize) -> usize {
    (dim + 2 * PAD - KERNEL) / stride + 1
}

/// Lowers (C, H, W) into a (C·9, OH·OW) column matrix for a padded 3×3 patch
/// around every output position.
pub fn im2col<F: Scalar>(x: &Array3<F>, stride: usize) -> Array2<F> {
    let (cin, h, w) = x.dim();
    let oh = conv_out(h, stride);
    let ow = conv_out(w, stride);
    let n = oh * ow;
    let mut col = Array2::<F>::zeros((cin * KERNEL * KERNEL, n));
    let xs = x.as_slice().expect("contiguous input");
    let cs = col.as_slice_mut().expect("contiguous col");

    for c in 0..cin {
        let plane = &xs[c * h * w..(c + 1) * h * w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let dst_base = row * n;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - PAD as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = oy * ow;
                    if stride == 1 {
                        // ix = ox + kx - 1 must stay in [0, w)
                        let ox0 = if kx < PAD { PAD - kx } else { 0 };
                        let ox1 = (w + PAD - kx).min(ow);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let ix0 = ox0 + kx - PAD;
                        let len = ox1 - ox0;
                        cs[dst_base + dst_row + ox0..dst_base + dst_row + ox0 + len]
                            .copy_from_slice(&src_row[ix0..ix0 + len]);
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - PAD as isize;
                            if ix >= 0 && ix < w as isize {
                                cs[dst_base + dst_row + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: folds a (C·9, OH·OW) gradient back onto the input.
pub fn col2im<F: Scalar>(
    dcol: &Array2<F>,
    cin: usize,
    h: usize,
    w: usize,
    stride: usize,
) -> Array3<F> {
    let oh = conv_out(h, stride);
    let ow = conv_out(w, stride);
    let n = oh * ow;
    let mut dx = Array3::<F>::zeros((cin, h, w));
    let ds = dcol.as_slice().expect("contiguous dcol");
    let out = dx.as_slice_mut().expect("contiguous dx");

    for c in 0..cin {
        let plane_base = c * h * w;
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let src_base = row * n;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - PAD as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = plane_base + iy as usize * w;
                    let src_row = src_base + oy * ow;
                    if stride == 1 {
                        let ox0 = if kx < PAD { PAD - kx } else { 0 };
                        let ox1 = (w + PAD - kx).min(ow);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let ix0 = ox0 + kx - PAD;
                        for i in 0..ox1 - ox0 {
                            out[dst_row + ix0 + i] = out[dst_row + ix0 + i] + ds[src_row + ox0 + i];
                        }
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - PAD as isize;
                            if ix >= 0 && ix < w as isize {
                                out[dst_row + ix as usize] =
                                    out[dst_row + ix as usize] + ds[src_row + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
