//! Channel-last (NHWC) convolution and max pooling.

use ndarray::{ArrayD, ArrayView2, IxDyn};

use crate::graph::{Graph, Tensor, Var};
use crate::scalar::Scalar;

/// Stride-1 "same" convolution geometry. Kernel size must be odd.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.batch * self.height * self.width
    }

    fn patch(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub window_h: usize,
    pub window_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    /// Floor-mode pooling; an axis shorter than the window passes through
    /// with a window of one.
    pub fn new(height: usize, width: usize, pool: usize) -> Self {
        let window_h = pool.min(height).max(1);
        let window_w = pool.min(width).max(1);
        Self {
            window_h,
            window_w,
            out_h: height / window_h,
            out_w: width / window_w,
        }
    }
}

/// For output column `x0`, the kernel taps `kx in lo..hi` fall inside the
/// image and read input columns `x0 + lo - pad ..`.
fn tap_range(x0: usize, k: usize, width: usize) -> (usize, usize) {
    let pad = k / 2;
    let lo = pad.saturating_sub(x0);
    let hi = k.min(width + pad - x0);
    (lo, hi)
}

fn im2col<F: Scalar>(x: &[F], geom: &ConvGeom) -> Vec<F> {
    let ConvGeom {
        height,
        width,
        in_channels: cin,
        kernel: k,
        ..
    } = *geom;
    let pad = k / 2;
    let patch = geom.patch();
    let mut cols = vec![F::zero(); geom.rows() * patch];
    for (r, row) in cols.chunks_exact_mut(patch).enumerate() {
        let x0 = r % width;
        let y = (r / width) % height;
        let b = r / (width * height);
        let (lo, hi) = tap_range(x0, k, width);
        for ky in 0..k {
            let Some(iy) = (y + ky).checked_sub(pad).filter(|&iy| iy < height) else {
                continue;
            };
            // Taps lo..hi of this kernel row are contiguous in both buffers.
            let src = ((b * height + iy) * width + x0 + lo - pad) * cin;
            let dst = (ky * k + lo) * cin;
            let len = (hi - lo) * cin;
            row[dst..dst + len].copy_from_slice(&x[src..src + len]);
        }
    }
    cols
}

fn col2im<F: Scalar>(cols: &[F], geom: &ConvGeom) -> Vec<F> {
    let ConvGeom {
        batch,
        height,
        width,
        in_channels: cin,
        kernel: k,
        ..
    } = *geom;
    let pad = k / 2;
    let patch = geom.patch();
    let mut x = vec![F::zero(); batch * height * width * cin];
    for (r, row) in cols.chunks_exact(patch).enumerate() {
        let x0 = r % width;
        let y = (r / width) % height;
        let b = r / (width * height);
        let (lo, hi) = tap_range(x0, k, width);
        for ky in 0..k {
            let Some(iy) = (y + ky).checked_sub(pad).filter(|&iy| iy < height) else {
                continue;
            };
            let dst = ((b * height + iy) * width + x0 + lo - pad) * cin;
            let src = (ky * k + lo) * cin;
            let len = (hi - lo) * cin;
            for (d, &s) in x[dst..dst + len].iter_mut().zip(&row[src..src + len]) {
                *d += s;
            }
        }
    }
    x
}

impl<F: Scalar> Graph<F> {
    /// Stride-1 same-padded convolution without bias.
    ///
    /// `input` is `[batch, height, width, in_channels]`, `weight` is
    /// `[kernel * kernel * in_channels, out_channels]` with rows ordered
    /// `(ky, kx, in_channel)`.
    pub fn conv2d(&self, input: Var, weight: Var, kernel: usize) -> Var {
        assert!(kernel % 2 == 1, "conv2d kernel must be odd, got {kernel}");
        let xv = self.value(input);
        let wv = self.value(weight);
        let s = xv.shape();
        assert_eq!(s.len(), 4, "conv2d input must be NHWC, got {s:?}");
        let geom = ConvGeom {
            batch: s[0],
            height: s[1],
            width: s[2],
            in_channels: s[3],
            out_channels: wv.shape()[1],
            kernel,
        };
        assert_eq!(
            wv.shape(),
            &[geom.patch(), geom.out_channels],
            "conv2d weight shape for input {s:?}"
        );
        let x = xv.as_standard_layout();
        let cols = im2col(x.as_slice().expect("standard layout"), &geom);
        let w2 = wv
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-d weight");
        let out = ArrayView2::from_shape((geom.rows(), geom.patch()), &cols)
            .expect("cols shape")
            .dot(&w2);
        let value = out
            .into_shape_with_order(IxDyn(&[geom.batch, geom.height, geom.width, geom.out_channels]))
            .expect("conv output shape");
        self.conv_node(input, weight, value, cols, geom)
    }

    /// Non-overlapping max pooling over the two spatial axes of an NHWC map.
    pub fn max_pool2d(&self, input: Var, pool: usize) -> Var {
        let xv = self.value(input);
        let s = xv.shape().to_vec();
        assert_eq!(s.len(), 4, "max_pool2d input must be NHWC, got {s:?}");
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let geom = PoolGeom::new(h, w, pool);
        let x = xv.as_standard_layout();
        let x = x.as_slice().expect("standard layout");
        let n_out = b * geom.out_h * geom.out_w * c;
        let mut out = vec![F::neg_infinity(); n_out];
        let mut argmax = vec![0usize; n_out];
        for bi in 0..b {
            for oy in 0..geom.out_h {
                for ox in 0..geom.out_w {
                    let o = ((bi * geom.out_h + oy) * geom.out_w + ox) * c;
                    let (best, best_at) = (&mut out[o..o + c], &mut argmax[o..o + c]);
                    for dy in 0..geom.window_h {
                        for dx in 0..geom.window_w {
                            let iy = oy * geom.window_h + dy;
                            let ix = ox * geom.window_w + dx;
                            let at = ((bi * h + iy) * w + ix) * c;
                            for (ch, &v) in x[at..at + c].iter().enumerate() {
                                if v > best[ch] || v.is_nan() {
                                    best[ch] = v;
                                    best_at[ch] = at + ch;
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[b, geom.out_h, geom.out_w, c]), out)
            .expect("pool output shape");
        self.pool_node(input, value, argmax, geom)
    }
}

pub(crate) fn conv2d_backward<F: Scalar>(
    g: &Tensor<F>,
    cols: &[F],
    weight: &Tensor<F>,
    geom: &ConvGeom,
    want_input: bool,
    want_weight: bool,
) -> (Option<Tensor<F>>, Option<Tensor<F>>) {
    let g = g.as_standard_layout();
    let g2 = ArrayView2::from_shape((geom.rows(), geom.out_channels), g.as_slice().expect("standard"))
        .expect("grad shape");
    let gw = want_weight.then(|| {
        let c2 = ArrayView2::from_shape((geom.rows(), geom.patch()), cols).expect("cols shape");
        c2.t().dot(&g2).into_dyn()
    });
    let gx = want_input.then(|| {
        let w2 = weight
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-d weight");
        let dcols = g2.dot(&w2.t());
        let dcols = dcols.as_standard_layout();
        let x = col2im(dcols.as_slice().expect("standard"), geom);
        ArrayD::from_shape_vec(
            IxDyn(&[geom.batch, geom.height, geom.width, geom.in_channels]),
            x,
        )
        .expect("input grad shape")
    });
    (gx, gw)
}

pub(crate) fn max_pool_backward<F: Scalar>(g: &Tensor<F>, argmax: &[usize], input_dim: IxDyn) -> Tensor<F> {
    let mut gx = ArrayD::<F>::zeros(input_dim);
    let slice = gx.as_slice_mut().expect("fresh array is contiguous");
    for (&at, &gv) in argmax.iter().zip(g.iter()) {
        slice[at] += gv;
    }
    gx
}
