use metamod_autograd::gradcheck::{check_gradients, GradCheckOptions};
use metamod_autograd::{Graph, Tensor, Var};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn assert_grads<B>(inputs: &[Tensor<f64>], build: B)
where
    B: Fn(&Graph<f64>, &[Var]) -> Var,
{
    let report = check_gradients(inputs, build, &GradCheckOptions::default());
    for (i, r) in report.inputs.iter().enumerate() {
        assert!(r.rel_err < 1e-6, "input {i}: {r:?}");
    }
}

// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted_sum(g: &Graph<f64>, v: Var, seed: u64) -> Var {
    let w = g.constant(random(&g.shape(v), seed));
    let p = g.mul(v, w);
    g.sum(p)
}

#[test]
fn broadcasting_arithmetic() {
    let inputs = [random(&[3, 4], 1), random(&[1, 4], 2), random(&[4], 3)];
    assert_grads(&inputs, |g, v| {
        let a = g.add(v[0], v[1]);
        let b = g.mul(a, v[2]);
        let c = g.sub(b, v[1]);
        let d = g.add_scalar(g.square(v[2]), 1.5);
        let e = g.div(c, d);
        weighted_sum(g, g.neg(e), 9)
    });
}

#[test]
fn unary_functions() {
    let inputs = [random(&[5, 3], 4)];
    assert_grads(&inputs, |g, v| {
        let e = g.exp(v[0]);
        let l = g.log(g.add_scalar(e, 0.5));
        let r = g.relu(g.scale(l, 3.0));
        let c = g.clamp(v[0], -0.5, 0.5);
        weighted_sum(g, g.add(r, c), 10)
    });
}

#[test]
fn matmul_and_reductions() {
    let inputs = [random(&[4, 3], 5), random(&[3, 2], 6)];
    assert_grads(&inputs, |g, v| {
        let m = g.matmul(v[0], v[1]);
        let s = g.sum_axis(m, 0);
        let t = g.mean_axis(m, 1);
        let a = weighted_sum(g, s, 11);
        let b = weighted_sum(g, t, 12);
        g.add(a, g.mean(g.square(g.add(a, b))))
    });
}

#[test]
fn shape_ops() {
    let inputs = [random(&[4, 2, 3], 7), random(&[2, 6], 8)];
    assert_grads(&inputs, |g, v| {
        let f = g.flatten(v[0]);
        let c = g.concat(&[f, v[1]], 0);
        let s = g.slice_rows(c, 1, 5);
        let r = g.gather_rows(s, &[0, 3, 3, 1]);
        let cols = g.slice_axis(r, 1, 2, 5);
        let r = g.concat(&[cols, g.slice_axis(r, 1, 0, 3)], 1);
        let back = g.reshape(r, &[4, 3, 2]);
        weighted_sum(g, back, 13)
    });
}

#[test]
fn distance_softmax_pick() {
    let inputs = [random(&[6, 4], 14), random(&[3, 4], 15)];
    assert_grads(&inputs, |g, v| {
        let d = g.sq_dist(v[0], v[1]);
        let ls = g.log_softmax(g.neg(d));
        let p = g.pick_per_row(ls, &[0, 1, 2, 2, 1, 0]);
        g.neg(g.mean(p))
    });
}

#[test]
fn conv_pool_norm_pipeline() {
    let inputs = [random(&[2, 5, 4, 3], 16), random(&[27, 4], 17)];
    assert_grads(&inputs, |g, v| {
        let h = g.conv2d(v[0], v[1], 3);
        let (n, _) = g.batch_norm(h, 1e-5);
        let p = g.max_pool2d(n, 2);
        weighted_sum(g, p, 18)
    });
}

#[test]
fn fixed_norm_gradient() {
    let inputs = [random(&[3, 2, 2, 2], 19)];
    assert_grads(&inputs, |g, v| {
        let n = g.fixed_norm(v[0], &[0.1, -0.2], &[0.5, 2.0], 1e-5);
        weighted_sum(g, n, 20)
    });
}

#[test]
fn channel_affine_shared_and_per_row() {
    let inputs = [random(&[3, 2, 2, 4], 30), random(&[4], 31), random(&[3, 4], 32)];
    assert_grads(&inputs, |g, v| {
        let a = g.channel_affine(v[0], v[1], v[2]);
        let b = g.channel_affine(v[0], v[2], v[1]);
        weighted_sum(g, g.add(a, b), 33)
    });
    let g = Graph::<f64>::new();
    let x = g.constant(random(&[3, 2, 2, 4], 34));
    let (ga, be) = (g.constant(random(&[3, 4], 35)), g.constant(random(&[4], 36)));
    let fused = g.channel_affine(x, ga, be);
    let plain = g.add(g.mul(x, g.reshape(ga, &[3, 1, 1, 4])), be);
    assert_eq!(*g.value(fused), *g.value(plain));
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, k: usize) -> Tensor<f64> {
    let s = x.shape();
    let (b, h, wd, cin) = (s[0], s[1], s[2], s[3]);
    let cout = w.shape()[1];
    let pad = (k / 2) as isize;
    let mut out = ArrayD::zeros(IxDyn(&[b, h, wd, cout]));
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..wd {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as isize + ky as isize - pad;
                            let ix = xx as isize + kx as isize - pad;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x[[bi, iy as usize, ix as usize, ci]] * w[[(ky * k + kx) * cin + ci, co]];
                            }
                        }
                    }
                    out[[bi, y, xx, co]] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_summation() {
    let x = random(&[2, 6, 5, 3], 21);
    let w = random(&[27, 4], 22);
    let g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let out = g.value(g.conv2d(xv, wv, 3));
    let expected = naive_conv(&x, &w, 3);
    for (a, b) in out.iter().zip(expected.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn max_pool_shapes() {
    let g = Graph::<f64>::new();
    let x = g.constant(random(&[1, 84, 84, 2], 23));
    let mut h = x;
    for _ in 0..4 {
        h = g.max_pool2d(h, 2);
    }
    assert_eq!(g.shape(h), vec![1, 5, 5, 2]);
    // an axis shorter than the window passes through
    let t = g.constant(random(&[2, 1, 1, 7], 24));
    assert_eq!(g.shape(g.max_pool2d(t, 2)), vec![2, 1, 1, 7]);
}

#[test]
fn batch_norm_of_unit_pair_is_identity() {
    let g = Graph::<f64>::new();
    let x = g.constant(ArrayD::from_shape_vec(IxDyn(&[2, 1]), vec![-1.0, 1.0]).unwrap());
    let (n, stats) = g.batch_norm(x, 0.0);
    assert_eq!(g.value(n).as_slice().unwrap(), &[-1.0, 1.0]);
    assert_eq!(stats.mean, vec![0.0]);
    assert_eq!(stats.var, vec![1.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let g = Graph::<f64>::new();
    let p = g.param(random(&[3], 25));
    let c = g.constant(random(&[3], 26));
    let out = g.sum(g.mul(p, c));
    let grads = g.backward(out);
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(p).unwrap(), &*g.value(c));
}

#[test]
fn nan_survives_relu_clamp_and_pooling() {
    let g = Graph::<f64>::new();
    let x = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2, 2, 1]), vec![f64::NAN, -1.0, 2.0, 0.5]).unwrap());
    assert!(g.value(g.relu(x)).iter().next().unwrap().is_nan());
    assert!(g.value(g.clamp(x, -0.5, 0.5)).iter().next().unwrap().is_nan());
    assert!(g.value(g.max_pool2d(x, 2)).iter().all(|v| v.is_nan()));
}
