#![allow(dead_code)]

use metamod_autograd::gradcheck::{check_gradients, GradCheckOptions, InputReport};
use metamod_autograd::{Graph, Tensor, Var};
use metamod_core::episodes::{
    generate_synthetic, sample_episode, split_classes, Dataset, Episode, Phase, SyntheticFamily, SyntheticOptions,
};
use metamod_core::nn::{ParamId, Session};
use metamod_core::trainer::{batch_objective, Method, Model, TrainConfig};
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Small stripes dataset with a fresh train/test split.
pub fn tiny_dataset(n_classes: usize, per_class: usize, size: usize, n_train: usize) -> Dataset {
    family_dataset(SyntheticFamily::Stripes, n_classes, per_class, size, n_train)
}

pub fn family_dataset(family: SyntheticFamily, n_classes: usize, per_class: usize, size: usize, n_train: usize) -> Dataset {
    let opts = SyntheticOptions {
        n_classes,
        per_class,
        image_size: (size, size, 3),
        family,
        ..SyntheticOptions::default()
    };
    let ds = generate_synthetic(&opts, 0).unwrap();
    let spec = split_classes(&ds.spec, n_train, 0).unwrap();
    ds.with_spec(spec).unwrap()
}

/// Two-block miniature used wherever a full encoder would be too slow.
pub fn mini_config(method: Method) -> TrainConfig {
    TrainConfig {
        method,
        iterations: 20,
        meta_batch: 2,
        n_way: 2,
        k_shot: 1,
        q_per_class: 2,
        mc_samples: 2,
        n_blocks: 2,
        channels: 4,
        log_every: 5,
        eval_every: 10,
        val_episodes: 10,
        checkpoint_every: 10,
        ..TrainConfig::default()
    }
}

pub fn random(shape: &[usize], std: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| d.sample(&mut rng)).collect()).unwrap()
}

/// Model with every trainable tensor jittered, so zero-initialized heads
/// carry gradient into the layers behind them.
fn perturbed_model(cfg: &TrainConfig, ds: &Dataset) -> (Model<f64>, Vec<ParamId>) {
    let mut model = Model::<f64>::new(cfg, ds.spec.image_size).unwrap();
    let ids: Vec<ParamId> = model.store.ids().filter(|id| model.store.entries()[id.index()].trainable).collect();
    for (k, &id) in ids.iter().enumerate() {
        let shape = model.store.get(id).shape().to_vec();
        let noise = random(&shape, 0.3, 100 + k as u64);
        *model.store.get_mut(id) += &noise;
    }
    (model, ids)
}

fn batch(cfg: &TrainConfig, ds: &Dataset) -> Vec<Episode> {
    (0..cfg.meta_batch)
        .map(|t| sample_episode(ds, Phase::Train, cfg.n_way, cfg.k_shot, cfg.q_per_class, 40 + t as u64).unwrap())
        .collect()
}

/// Finite-difference check of one meta-batch objective on the miniature,
/// per trainable tensor. Noise is frozen: each evaluation rebuilds the
/// same seeded streams.
pub fn objective_gradcheck(method: Method, extra: impl FnOnce(&mut TrainConfig)) -> Vec<(String, InputReport)> {
    let ds = tiny_dataset(6, 4, 8, 4);
    let mut cfg = mini_config(method);
    cfg.lambda_orig = 0.5;
    cfg.kl_weight = 0.1;
    extra(&mut cfg);
    let (model, ids) = perturbed_model(&cfg, &ds);
    let episodes = batch(&cfg, &ds);
    let inputs: Vec<Tensor<f64>> = ids.iter().map(|&id| model.store.get(id).clone()).collect();
    let report = check_gradients(
        &inputs,
        |g: &Graph<f64>, vars: &[Var]| {
            let s = Session::new(g, &model.store);
            for (&id, &v) in ids.iter().zip(vars) {
                s.bind(id, v);
            }
            batch_objective(&s, &model, &cfg, &ds, &episodes, 3).unwrap().loss
        },
        &GradCheckOptions::default(),
    );
    ids.iter().map(|&id| model.store.name(id).to_string()).zip(report.inputs).collect()
}
