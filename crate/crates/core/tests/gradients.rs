//! Finite-difference checks of whole objectives in double precision on a
//! two-block miniature. Noise is frozen: each evaluation rebuilds the same
//! seeded streams.

mod common;

use metamod_autograd::gradcheck::{check_gradients, GradCheckOptions};
use metamod_autograd::Tensor;
use metamod_core::protonet::{ce_loss, class_means};
use metamod_core::trainer::{Method, TrainConfig};

const TOL: f64 = 1e-3;

fn random(shape: &[usize], std: f64, seed: u64) -> Tensor<f64> {
    common::random(shape, std, seed)
}

fn check_method(method: Method, extra: impl FnOnce(&mut TrainConfig)) {
    let report = common::objective_gradcheck(method, extra);
    for (name, r) in &report {
        assert!(r.analytic_norm > 0.0 || r.numeric_norm < 1e-9, "{name}: {r:?}");
        assert!(r.rel_err < TOL, "{method}: {name} {r:?}");
    }
}

#[test]
fn ce_loss_gradient() {
    let q = random(&[6, 5], 1.0, 1);
    let p = random(&[3, 5], 1.0, 2);
    let labels = [0, 1, 2, 2, 1, 0];
    let r = check_gradients(&[q, p], |g, v| ce_loss(g, v[0], &labels, v[1]).unwrap(), &GradCheckOptions::default());
    assert!(r.max_rel_err() < TOL, "{r:?}");
}

#[test]
fn prototype_loss_gradient_through_class_means() {
    let support = random(&[4, 3], 1.0, 3);
    let query = random(&[4, 3], 1.0, 4);
    let r = check_gradients(
        &[support, query],
        |g, v| {
            let protos = class_means(g, v[0], &[0, 1, 0, 1], 2).unwrap();
            ce_loss(g, v[1], &[1, 0, 1, 0], protos).unwrap()
        },
        &GradCheckOptions::default(),
    );
    assert!(r.max_rel_err() < TOL, "{r:?}");
}

#[test]
fn vanilla_objective_gradient() {
    check_method(Method::Vanilla, |_| {});
}

#[test]
fn mtm_objective_gradient() {
    check_method(Method::Mtm, |_| {});
}

#[test]
fn mtm_per_task_objective_gradient() {
    check_method(Method::Mtm, |c| c.per_task_deltas = true);
}

#[test]
fn vtm_objective_gradient() {
    check_method(Method::Vtm, |c| c.vtm_layer = 1);
}

#[test]
fn hvtm_objective_gradient() {
    check_method(Method::Hvtm, |_| {});
}

#[test]
fn hvtm_split_latent_objective_gradient() {
    check_method(Method::Hvtm, |c| c.split_latent = true);
}

#[test]
fn mlti_objective_gradient() {
    check_method(Method::Mlti, |c| c.mixup_layer = "1".into());
}
