mod common;

use metamod_autograd::{Graph, Tensor};
use metamod_core::backbone::Mode;
use metamod_core::baselines::{mix_maps, mlti_interpolate, MixupConfig};
use metamod_core::episodes::{pair_tasks, sample_episode, Phase};
use metamod_core::nn::Session;
use metamod_core::trainer::{Method, Model};
use ndarray::IxDyn;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn mixed_maps_stay_inside_the_envelope(
        (a, b) in (1usize..40).prop_flat_map(|n| (
            prop::collection::vec(-10.0f64..10.0, n),
            prop::collection::vec(-10.0f64..10.0, n),
        )),
        lambda in 0.0f64..=1.0,
    ) {
        let g = Graph::<f64>::new();
        let n = a.len();
        let ha = g.constant(Tensor::from_shape_vec(IxDyn(&[n]), a.clone()).unwrap());
        let hb = g.constant(Tensor::from_shape_vec(IxDyn(&[n]), b.clone()).unwrap());
        let m = g.value(mix_maps(&g, ha, hb, lambda)).clone();
        for ((x, y), v) in a.iter().zip(&b).zip(m.iter()) {
            prop_assert!(*v >= x.min(*y) - 1e-12 && *v <= x.max(*y) + 1e-12);
        }
    }
}

#[test]
fn beta_two_two_has_mean_one_half() {
    let cfg = MixupConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 100_000;
    let draws: Vec<f64> = (0..n).map(|_| cfg.sample_lambda(&mut rng).unwrap()).collect();
    assert!(draws.iter().all(|l| (0.0..=1.0).contains(l)));
    let mean = draws.iter().sum::<f64>() / n as f64;
    assert!((mean - 0.5).abs() < 0.01, "{mean}");
}

/// Interpolated embeddings at the endpoints equal plain forwards of the
/// base task (`lambda = 0`) and of the class-aligned conditioning task
/// (`lambda = 1`), at every mixing layer.
#[test]
fn endpoint_weights_select_one_task() {
    let ds = common::tiny_dataset(6, 6, 8, 4);
    let mut cfg = common::mini_config(Method::Mlti);
    cfg.q_per_class = 3;
    let model = Model::<f64>::new(&cfg, ds.spec.image_size).unwrap();
    let eps: Vec<_> = (0..2).map(|s| sample_episode(&ds, Phase::Train, 2, 1, 3, 20 + s).unwrap()).collect();
    let pair = pair_tasks(&eps, 4).unwrap().remove(0);
    let enc = &model.encoder;
    for layer in 0..=cfg.n_blocks {
        let g = Graph::new();
        let s = Session::new(&g, &model.store);
        let xb = s.constant(ds.episode_tensor(&pair.base));
        let xc = s.constant(ds.episode_tensor(&pair.conditioning));
        let ns = pair.base.n_support();
        let base = enc.encode(&s, xb, ns, Mode::Train, None).unwrap();
        let cond = enc.encode(&s, xc, ns, Mode::Train, None).unwrap();
        let aligned = enc.encode(&s, s.gather_rows(xc, &pair.aligned_rows().unwrap()), ns, Mode::Train, None).unwrap();
        let close = |a: metamod_autograd::Var, b: metamod_autograd::Var| {
            s.value(a).iter().zip(s.value(b).iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        };
        let at = |lambda| mlti_interpolate(&s, enc, &pair, xb, xc, &base.activations, &cond.activations, layer, lambda).unwrap();
        let zero = at(0.0);
        assert!(close(zero.output.embedding, base.embedding) < 1e-12, "layer {layer}");
        let one = at(1.0);
        assert!(close(one.output.embedding, aligned.embedding) < 1e-9, "layer {layer}");
        assert_eq!((one.layer, one.lambda), (layer, 1.0));
    }
}

#[test]
fn weights_outside_the_unit_interval_are_rejected() {
    let ds = common::tiny_dataset(6, 6, 8, 4);
    let model = Model::<f64>::new(&common::mini_config(Method::Mlti), ds.spec.image_size).unwrap();
    let eps: Vec<_> = (0..2).map(|s| sample_episode(&ds, Phase::Train, 2, 1, 2, s).unwrap()).collect();
    let pair = pair_tasks(&eps, 0).unwrap().remove(0);
    let g = Graph::new();
    let s = Session::new(&g, &model.store);
    let x = s.constant(ds.episode_tensor(&pair.base));
    let out = model.encoder.encode(&s, x, 2, Mode::Train, None).unwrap();
    let a = &out.activations;
    assert!(mlti_interpolate(&s, &model.encoder, &pair, x, x, a, a, 1, 1.5).is_err());
    assert!(mlti_interpolate(&s, &model.encoder, &pair, x, x, a, a, 9, 0.5).is_err());
}
