//! Per-channel normalization over every axis but the last.

use ndarray::{ArrayD, IxDyn};

use crate::graph::{Graph, Op, Tensor, Var};
use crate::scalar::Scalar;

/// Per-channel statistics measured by [`Graph::batch_norm`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Biased (divide-by-count) variance, as used for normalization.
    pub var: Vec<F>,
    /// Number of values averaged per channel.
    pub count: usize,
}

fn channels_of<F: Scalar>(x: &Tensor<F>) -> usize {
    *x.shape().last().expect("normalization needs at least one axis")
}

impl<F: Scalar> Graph<F> {
    /// Normalizes each channel (last axis) with the batch mean and biased
    /// variance: `(x - mean) / sqrt(var + eps)`. No affine step.
    pub fn batch_norm(&self, input: Var, eps: F) -> (Var, BatchStats<F>) {
        let xv = self.value(input);
        let c = channels_of(&xv);
        let x = xv.as_standard_layout();
        let x = x.as_slice().expect("standard layout");
        let count = x.len() / c;
        let n = F::from_usize(count).expect("count fits");
        let mut mean = vec![F::zero(); c];
        for row in x.chunks_exact(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![F::zero(); c];
        for row in x.chunks_exact(c) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s /= n);
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let out = normalize(x, &mean, &inv_std);
        let value = ArrayD::from_shape_vec(xv.raw_dim(), out).expect("same shape");
        let var_out = self.unary(input, value, Op::BatchNorm { input, inv_std });
        (var_out, BatchStats { mean, var, count })
    }

    /// Normalizes each channel with fixed statistics.
    pub fn fixed_norm(&self, input: Var, mean: &[F], var: &[F], eps: F) -> Var {
        let xv = self.value(input);
        let c = channels_of(&xv);
        assert_eq!(mean.len(), c, "fixed_norm mean length");
        assert_eq!(var.len(), c, "fixed_norm var length");
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let x = xv.as_standard_layout();
        let x = x.as_slice().expect("standard layout");
        let out = normalize(x, mean, &inv_std);
        let value = ArrayD::from_shape_vec(xv.raw_dim(), out).expect("same shape");
        self.unary(input, value, Op::FixedNorm { input, inv_std })
    }

    /// `x * gamma + beta` per channel of `x` (`[B, ..., C]`). `gamma` and
    /// `beta` are each `[C]` (shared by every row) or `[B, C]` (one per
    /// leading index).
    pub fn channel_affine(&self, input: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(input);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let c = channels_of(&xv);
        let rows = xv.shape()[0];
        let gs = affine_stride(&gv, rows, c, "gamma");
        let bs = affine_stride(&bv, rows, c, "beta");
        let x = xv.as_standard_layout();
        let x = x.as_slice().expect("standard layout");
        let (gv, bv) = (gv.as_standard_layout(), bv.as_standard_layout());
        let (ga, ba) = (gv.as_slice().expect("standard"), bv.as_slice().expect("standard"));
        let per_row = x.len() / rows.max(1);
        let mut out = vec![F::zero(); x.len()];
        for (r, (xr, or)) in x.chunks_exact(per_row.max(1)).zip(out.chunks_exact_mut(per_row.max(1))).enumerate() {
            let gr = &ga[r * gs..r * gs + c];
            let br = &ba[r * bs..r * bs + c];
            for (px, po) in xr.chunks_exact(c).zip(or.chunks_exact_mut(c)) {
                for (((o, &v), &g), &b) in po.iter_mut().zip(px).zip(gr).zip(br) {
                    *o = v * g + b;
                }
            }
        }
        let value = ArrayD::from_shape_vec(xv.raw_dim(), out).expect("same shape");
        let rg = self.any_grad(&[input, gamma, beta]);
        self.push(value, Op::ChannelAffine { input, gamma, beta }, rg)
    }
}

fn normalize<F: Scalar>(x: &[F], mean: &[F], inv_std: &[F]) -> Vec<F> {
    let c = mean.len();
    let mut out = vec![F::zero(); x.len()];
    for (orow, row) in out.chunks_exact_mut(c).zip(x.chunks_exact(c)) {
        for (((o, &v), &m), &s) in orow.iter_mut().zip(row).zip(mean).zip(inv_std) {
            *o = (v - m) * s;
        }
    }
    out
}

/// Row stride (0 or `c`) of an affine parameter.
fn affine_stride<F: Scalar>(p: &Tensor<F>, rows: usize, c: usize, what: &str) -> usize {
    match p.shape() {
        [n] if *n == c => 0,
        [r, n] if *r == rows && *n == c => c,
        s => panic!("channel_affine {what} must be [{c}] or [{rows}, {c}], got {s:?}"),
    }
}

/// Gradients of [`Graph::channel_affine`] with respect to `x`, `gamma`
/// and `beta`, each computed only when wanted.
pub(crate) fn channel_affine_backward<F: Scalar>(
    g: &Tensor<F>,
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta_shape: &[usize],
    want: [bool; 3],
) -> [Option<Tensor<F>>; 3] {
    let c = channels_of(x);
    let rows = x.shape()[0];
    let gs = affine_stride(gamma, rows, c, "gamma");
    let bs = if beta_shape.len() == 2 { c } else { 0 };
    let g = g.as_standard_layout();
    let gsl = g.as_slice().expect("standard layout");
    let xs = x.as_slice().expect("node values are contiguous");
    let gam = gamma.as_standard_layout();
    let gam = gam.as_slice().expect("standard");
    let per_row = (xs.len() / rows.max(1)).max(1);
    let mut dx = want[0].then(|| vec![F::zero(); xs.len()]);
    let mut dgamma = vec![F::zero(); if gs == 0 { c } else { rows * c }];
    let mut dbeta = vec![F::zero(); if bs == 0 { c } else { rows * c }];
    for (r, (gr, xr)) in gsl.chunks_exact(per_row).zip(xs.chunks_exact(per_row)).enumerate() {
        let gam_r = &gam[r * gs..r * gs + c];
        let (go, bo) = (r * gs, r * bs);
        let (dg, db) = (&mut dgamma[go..go + c], &mut dbeta[bo..bo + c]);
        for (gp, xp) in gr.chunks_exact(c).zip(xr.chunks_exact(c)) {
            for (((d, e), &gv), &xv) in dg.iter_mut().zip(db.iter_mut()).zip(gp).zip(xp) {
                *d += gv * xv;
                *e += gv;
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dr = &mut dx[r * per_row..(r + 1) * per_row];
            for (dp, gp) in dr.chunks_exact_mut(c).zip(gr.chunks_exact(c)) {
                for ((d, &gv), &m) in dp.iter_mut().zip(gp).zip(gam_r) {
                    *d = gv * m;
                }
            }
        }
    }
    [
        dx.map(|d| ArrayD::from_shape_vec(x.raw_dim(), d).expect("same shape")),
        want[1].then(|| ArrayD::from_shape_vec(IxDyn(gamma.shape()), dgamma).expect("gamma shape")),
        want[2].then(|| ArrayD::from_shape_vec(IxDyn(beta_shape), dbeta).expect("beta shape")),
    ]
}

pub(crate) fn batch_norm_backward<F: Scalar>(g: &Tensor<F>, xhat: &Tensor<F>, inv_std: &[F]) -> Tensor<F> {
    let c = inv_std.len();
    let g = g.as_standard_layout();
    let gs = g.as_slice().expect("standard layout");
    let xh = xhat.as_slice().expect("node values are contiguous");
    let count = gs.len() / c;
    let n = F::from_usize(count).expect("count fits");
    let mut sum_g = vec![F::zero(); c];
    let mut sum_gx = vec![F::zero(); c];
    for (grow, xrow) in gs.chunks_exact(c).zip(xh.chunks_exact(c)) {
        for (((a, b), &gv), &xv) in sum_g.iter_mut().zip(sum_gx.iter_mut()).zip(grow).zip(xrow) {
            *a += gv;
            *b += gv * xv;
        }
    }
    // dx = inv_std * (g - mean(g) - xhat * mean(g * xhat))
    let mean_g: Vec<F> = sum_g.iter().map(|&v| v / n).collect();
    let mean_gx: Vec<F> = sum_gx.iter().map(|&v| v / n).collect();
    let mut out = vec![F::zero(); gs.len()];
    for ((orow, grow), xrow) in out.chunks_exact_mut(c).zip(gs.chunks_exact(c)).zip(xh.chunks_exact(c)) {
        for (ch, o) in orow.iter_mut().enumerate() {
            *o = (grow[ch] - mean_g[ch] - xrow[ch] * mean_gx[ch]) * inv_std[ch];
        }
    }
    ArrayD::from_shape_vec(IxDyn(xhat.shape()), out).expect("same shape")
}

pub(crate) fn fixed_norm_backward<F: Scalar>(g: &Tensor<F>, inv_std: &[F]) -> Tensor<F> {
    let c = inv_std.len();
    let g = g.as_standard_layout();
    let gs = g.as_slice().expect("standard layout");
    let mut out = vec![F::zero(); gs.len()];
    for (orow, row) in out.chunks_exact_mut(c).zip(gs.chunks_exact(c)) {
        for ((o, &g), &s) in orow.iter_mut().zip(row).zip(inv_std) {
            *o = g * s;
        }
    }
    ArrayD::from_shape_vec(IxDyn(g.shape()), out).expect("same shape")
}
