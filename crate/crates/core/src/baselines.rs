//! Task interpolation baseline: mix the features of two tasks at one layer
//! and train on the mixed task.

use metamod_autograd::{Graph, Scalar, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::backbone::{EncodeOutput, Encoder, LayerActivations, Mode};
use crate::episodes::{Dataset, EpisodePair};
use crate::evaluator::{evaluate, EvalOptions, MetricsRecord};
use crate::error::{Error, Result};
use crate::nn::Session;
use crate::trainer::{run_training, Method, Model, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerChoice {
    /// Layer `l`: 0 mixes inputs, `l >= 1` mixes block `l`'s
    /// pre-normalization maps.
    Fixed(usize),
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixupConfig {
    pub alpha: f64,
    pub beta: f64,
    pub layer: LayerChoice,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 2.0,
            layer: LayerChoice::Random,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config(format!(
                "mixup Beta parameters must be positive, got ({}, {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    pub fn sample_lambda(&self, rng: &mut ChaCha8Rng) -> Result<f64> {
        self.validate()?;
        let dist = Beta::new(self.alpha, self.beta).map_err(|e| Error::Config(e.to_string()))?;
        Ok(dist.sample(rng))
    }

    pub fn sample_layer(&self, n_blocks: usize, rng: &mut ChaCha8Rng) -> Result<usize> {
        match self.layer {
            LayerChoice::Fixed(l) if l <= n_blocks => Ok(l),
            LayerChoice::Fixed(l) => Err(Error::Config(format!("mixup layer {l} outside [0, {n_blocks}]"))),
            LayerChoice::Random => Ok(rng.random_range(0..=n_blocks)),
        }
    }
}

/// `lambda * h_i + (1 - lambda) * h_j`; `h_i` rows must already be aligned
/// with `h_j` rows.
pub fn mix_maps<F: Scalar>(g: &Graph<F>, h_i: Var, h_j: Var, lambda: f64) -> Var {
    g.lerp(h_j, h_i, F::from_f64_lossy(lambda))
}

pub struct Interpolated<F> {
    pub output: EncodeOutput<F>,
    pub lambda: f64,
    pub layer: usize,
}

/// Mixes the conditioning task `T_i` into the base task `T_j` at `layer`
/// with weight `lambda` on `T_i`, pairing class `n` of `T_i` with class
/// `class_pairing[n]` of `T_j`, and finishes the forward pass. The mixed
/// task keeps the base episode's labels.
#[allow(clippy::too_many_arguments)]
pub fn mlti_interpolate<F: Scalar>(
    s: &Session<F>,
    encoder: &Encoder,
    pair: &EpisodePair,
    base_input: Var,
    conditioning_input: Var,
    base: &LayerActivations,
    conditioning: &LayerActivations,
    layer: usize,
    lambda: f64,
) -> Result<Interpolated<F>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("mixup weight {lambda} outside [0, 1]")));
    }
    let rows = pair.aligned_rows()?;
    let n_support = pair.base.n_support();
    let output = if layer == 0 {
        let mixed = mix_maps(s, s.gather_rows(conditioning_input, &rows), base_input, lambda);
        encoder.encode(s, mixed, n_support, Mode::Train, None)?
    } else {
        let (hi, hj) = match (conditioning.pre_norm.get(layer - 1), base.pre_norm.get(layer - 1)) {
            (Some(&a), Some(&b)) => (a, b),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "mixup layer {layer} outside [0, {}]",
                    encoder.blocks.len()
                )))
            }
        };
        let mixed = mix_maps(s, s.gather_rows(hi, &rows), hj, lambda);
        encoder.encode_from(s, mixed, layer - 1, n_support, Mode::Train, None)?
    };
    Ok(Interpolated { output, lambda, layer })
}

/// Plain prototypical-network meta-training: `config` with the method
/// forced to vanilla, followed by the meta-test protocol.
pub fn train_vanilla(config: &TrainConfig, dataset: &Dataset, eval: &EvalOptions) -> Result<(Model, MetricsRecord)> {
    let config = TrainConfig {
        method: Method::Vanilla,
        ..config.clone()
    };
    let (model, _) = run_training(config, dataset, None)?;
    let record = evaluate(&model.encoder, &model.store, dataset, eval)?;
    Ok((model, record))
}
