//! Deterministic task modulation: per-layer MLPs map the conditioning
//! task's activations to additive changes of the base task's batch-norm
//! scale and shift.

use metamod_autograd::{Graph, Scalar, Var};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BlockModulation, EncodeOutput, Encoder, LayerActivations, Mode};
use crate::episodes::EpisodePair;
use crate::error::{Error, Result};
use crate::nn::{Mlp, ParamId, ParamStore, Session};
use crate::protonet::class_means;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Support,
    Query,
}

/// Global average pool of a `[B, H, W, C]` map, `[B, C]`.
pub fn spatial_mean<F: Scalar>(g: &Graph<F>, h: Var) -> Var {
    g.mean_axis(g.mean_axis(h, 1), 1)
}

/// Per-layer `[n_way, C]` summaries of one split: pooled maps averaged per
/// class, or over the whole split when `per_task` (then repeated per class).
pub fn summarize_conditioning<F: Scalar>(
    g: &Graph<F>,
    acts: &LayerActivations,
    row_labels: &[usize],
    n_way: usize,
    split: Split,
    per_task: bool,
) -> Result<Vec<Var>> {
    let ns = acts.n_support;
    let rows = row_labels.len();
    let (lo, hi) = match split {
        Split::Support => (0, ns),
        Split::Query => (ns, rows),
    };
    if lo >= hi {
        return Err(Error::InvalidArgument(format!("{split:?} split is empty")));
    }
    acts.pre_norm
        .iter()
        .map(|&h| {
            if g.shape(h)[0] != rows {
                return Err(Error::shape("activation rows", rows, g.shape(h)[0]));
            }
            let pooled = g.slice_rows(spatial_mean(g, h), lo, hi);
            if per_task {
                let mean = class_means(g, pooled, &vec![0; hi - lo], 1)?;
                Ok(g.gather_rows(mean, &vec![0; n_way]))
            } else {
                class_means(g, pooled, &row_labels[lo..hi], n_way)
            }
        })
        .collect()
}

/// `(Δγ, Δβ)` of one layer, one row per conditioning class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerDelta {
    pub dgamma: Var,
    pub dbeta: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModulationDelta {
    pub support: Vec<LayerDelta>,
    pub query: Vec<LayerDelta>,
}

/// One `(f_γ, f_β)` pair per encoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaPredictor {
    pub gamma: Vec<Mlp>,
    pub beta: Vec<Mlp>,
    pub channels: usize,
    pub per_task: bool,
}

impl DeltaPredictor {
    /// Hidden width `channels`; final layers start at zero.
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, n_layers: usize, channels: usize, per_task: bool, rng: &mut ChaCha8Rng) -> Self {
        let c = channels;
        let gamma = (0..n_layers)
            .map(|l| Mlp::zero_output(store, &format!("predictor.{l}.gamma"), c, c, c, rng))
            .collect();
        let beta = (0..n_layers)
            .map(|l| Mlp::zero_output(store, &format!("predictor.{l}.beta"), c, c, c, rng))
            .collect();
        Self {
            gamma,
            beta,
            channels,
            per_task,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.gamma.iter().chain(&self.beta).flat_map(Mlp::params).collect()
    }

    fn layer<F: Scalar>(&self, s: &Session<F>, l: usize, summary: Var) -> Result<LayerDelta> {
        let shape = s.shape(summary);
        if shape.len() != 2 || shape[1] != self.channels {
            return Err(Error::shape("predictor input", format!("[N, {}]", self.channels), format!("{shape:?}")));
        }
        Ok(LayerDelta {
            dgamma: self.gamma[l].forward(s, summary),
            dbeta: self.beta[l].forward(s, summary),
        })
    }

    pub fn predict_deltas<F: Scalar>(&self, s: &Session<F>, support: &[Var], query: &[Var]) -> Result<ModulationDelta> {
        let n = self.gamma.len();
        if support.len() != n || query.len() != n {
            return Err(Error::shape("summary layer count", n, format!("{} / {}", support.len(), query.len())));
        }
        Ok(ModulationDelta {
            support: support.iter().enumerate().map(|(l, &x)| self.layer(s, l, x)).collect::<Result<_>>()?,
            query: query.iter().enumerate().map(|(l, &x)| self.layer(s, l, x)).collect::<Result<_>>()?,
        })
    }
}

/// Expands per-class deltas to per-row modulation of the base episode:
/// base row with label `n'` in split `s` receives the split-`s` delta of
/// conditioning class `inverse_pairing[n']`.
pub fn route_deltas<F: Scalar>(g: &Graph<F>, pair: &EpisodePair, deltas: &ModulationDelta) -> Result<Vec<Option<BlockModulation>>> {
    let inv = pair.inverse_pairing();
    let n = inv.len();
    let base = &pair.base;
    let index: Vec<usize> = base
        .support_labels()
        .into_iter()
        .map(|l| inv[l])
        .chain(base.query_labels().into_iter().map(|l| n + inv[l]))
        .collect();
    deltas
        .support
        .iter()
        .zip(&deltas.query)
        .map(|(s, q)| {
            for v in [s.dgamma, s.dbeta, q.dgamma, q.dbeta] {
                if g.shape(v)[0] != n {
                    return Err(Error::shape("delta rows", n, g.shape(v)[0]));
                }
            }
            let stack = |a: Var, b: Var| g.gather_rows(g.concat(&[a, b], 0), &index);
            Ok(Some(BlockModulation {
                dgamma: stack(s.dgamma, q.dgamma),
                dbeta: stack(s.dbeta, q.dbeta),
            }))
        })
        .collect()
}

/// Runs the base episode through the encoder with deltas predicted from
/// the conditioning episode's activations. In train mode batch statistics
/// come from the base episode; labels are the base episode's.
pub fn modulated_forward<F: Scalar>(
    s: &Session<F>,
    encoder: &Encoder,
    predictor: &DeltaPredictor,
    pair: &EpisodePair,
    base_input: Var,
    conditioning: &LayerActivations,
    mode: Mode,
) -> Result<EncodeOutput<F>> {
    if predictor.gamma.len() != encoder.blocks.len() {
        return Err(Error::shape("predictor layers", encoder.blocks.len(), predictor.gamma.len()));
    }
    let labels = pair.conditioning.row_labels();
    let n = pair.conditioning.n_way;
    let sum_s = summarize_conditioning(s, conditioning, &labels, n, Split::Support, predictor.per_task)?;
    let sum_q = summarize_conditioning(s, conditioning, &labels, n, Split::Query, predictor.per_task)?;
    let deltas = predictor.predict_deltas(s, &sum_s, &sum_q)?;
    let m = route_deltas(s, pair, &deltas)?;
    encoder.encode(s, base_input, pair.base.n_support(), mode, Some(&m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::from_vec;
    use metamod_autograd::Graph;

    #[test]
    fn summary_of_constant_maps() {
        let g = Graph::<f64>::new();
        // two support rows of class 0 with maps all-0 and all-2, one query row all-5
        let mut data = vec![0.0; 4 * 3];
        data.extend(vec![2.0; 4 * 3]);
        data.extend(vec![5.0; 4 * 3]);
        let h = g.constant(from_vec(&[3, 2, 2, 3], data));
        let acts = LayerActivations {
            pre_norm: vec![h],
            n_support: 2,
        };
        let s = summarize_conditioning(&g, &acts, &[0, 0, 0], 1, Split::Support, false).unwrap();
        assert_eq!(g.value(s[0]).as_slice().unwrap(), &[1.0, 1.0, 1.0]);
        let q = summarize_conditioning(&g, &acts, &[0, 0, 0], 1, Split::Query, false).unwrap();
        assert_eq!(g.value(q[0]).as_slice().unwrap(), &[5.0, 5.0, 5.0]);
    }
}
