use metamod_autograd::{Scalar, Tensor};
use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::nn::{ParamGrads, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<F> {
    pub m: Tensor<F>,
    pub v: Tensor<F>,
    pub step: u64,
}

/// Adam with a step count per parameter: a parameter that received no
/// gradient this step is left untouched and its bias correction does not
/// advance.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub config: AdamConfig,
    pub state: Vec<Option<Moments<F>>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            state: vec![None; n_params],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &ParamGrads<F>) {
        let c = self.config;
        let (b1, b2) = (F::from_f64_lossy(c.beta1), F::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
        let eps = F::from_f64_lossy(c.eps);
        for (id, g) in grads.iter() {
            let st = self.state[id.index()].get_or_insert_with(|| Moments {
                m: Tensor::zeros(g.raw_dim()),
                v: Tensor::zeros(g.raw_dim()),
                step: 0,
            });
            st.step += 1;
            let t = st.step as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let step_size = F::from_f64_lossy(c.lr * bc2.sqrt() / bc1);
            let eps_hat = eps * F::from_f64_lossy(bc2.sqrt());
            Zip::from(&mut st.m).and(&mut st.v).and(g).for_each(|m, v, &gi| {
                *m = b1 * *m + one_b1 * gi;
                *v = b2 * *v + one_b2 * gi * gi;
            });
            let param = store.get_mut(id);
            Zip::from(param).and(&st.m).and(&st.v).for_each(|p, &m, &v| {
                *p -= step_size * m / (v.sqrt() + eps_hat);
            });
        }
    }

    pub fn step_of(&self, id: ParamId) -> u64 {
        self.state[id.index()].as_ref().map_or(0, |s| s.step)
    }
}
