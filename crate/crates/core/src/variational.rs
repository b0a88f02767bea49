//! Variational task modulation: the batch-norm deltas are Gaussian latents
//! with an amortized prior `p(z | T_i)` and posterior `q(z | T_i, T_j)`.
//! A chain of latent layers, each conditioned on the sample of the layer
//! before it, gives the hierarchical variant; a chain of one gives the
//! flat variant.

use metamod_autograd::{Graph, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::{EncodeOutput, Encoder, LayerActivations, Mode};
use crate::episodes::EpisodePair;
use crate::error::{Error, Result};
use crate::modulation::{route_deltas, summarize_conditioning, LayerDelta, ModulationDelta, Split};
use crate::nn::{from_vec, Linear, ParamId, ParamStore, Session};
use crate::protonet::episode_loss;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;
/// Initial log-variance of every latent (σ ≈ 0.14).
pub const INIT_LOG_VAR: f64 = -4.0;

/// Diagonal Gaussian on the graph. `log_var` is already clamped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianLatent {
    pub mu: Var,
    pub log_var: Var,
}

/// `z = mu + exp(log_var / 2) * noise`.
pub fn reparameterize<F: Scalar>(g: &Graph<F>, latent: GaussianLatent, noise: Var) -> Var {
    let sigma = g.exp(g.scale(latent.log_var, F::from_f64_lossy(0.5)));
    g.add(latent.mu, g.mul(sigma, noise))
}

/// `KL(q || p)` for diagonal Gaussians, summed over every element.
pub fn kl_gaussian<F: Scalar>(g: &Graph<F>, q: GaussianLatent, p: GaussianLatent) -> Var {
    // 0.5 * (lv_p - lv_q + (exp(lv_q) + (mu_q - mu_p)^2) / exp(lv_p) - 1)
    let diff = g.square(g.sub(q.mu, p.mu));
    let ratio = g.div(g.add(g.exp(q.log_var), diff), g.exp(p.log_var));
    let terms = g.add(g.sub(p.log_var, q.log_var), g.add_scalar(ratio, -F::one()));
    g.scale(g.sum(terms), F::from_f64_lossy(0.5))
}

/// Plain-number version of [`kl_gaussian`].
pub fn kl_diag(mu_q: &[f64], lv_q: &[f64], mu_p: &[f64], lv_p: &[f64]) -> f64 {
    (0..mu_q.len())
        .map(|i| 0.5 * (lv_p[i] - lv_q[i] + (lv_q[i].exp() + (mu_q[i] - mu_p[i]).powi(2)) / lv_p[i].exp() - 1.0))
        .sum()
}

/// Splits `z = [Δγ | Δβ]` (`[rows, 2C]`) into its halves.
pub fn decode_deltas<F: Scalar>(g: &Graph<F>, z: Var, channels: usize) -> Result<LayerDelta> {
    let shape = g.shape(z);
    if shape.len() != 2 || shape[1] != 2 * channels {
        return Err(Error::shape("latent", format!("[N, {}]", 2 * channels), format!("{shape:?}")));
    }
    Ok(LayerDelta {
        dgamma: g.slice_axis(z, 1, 0, channels),
        dbeta: g.slice_axis(z, 1, channels, 2 * channels),
    })
}

/// Deterministic standard-normal noise, or all zeros (latent means).
pub struct NoiseStream {
    rng: Option<ChaCha8Rng>,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn zero() -> Self {
        Self { rng: None }
    }

    pub fn sample<F: Scalar>(&mut self, shape: &[usize]) -> Tensor<F> {
        let n = shape.iter().product();
        let Some(rng) = self.rng.as_mut() else {
            return Tensor::zeros(ndarray::IxDyn(shape));
        };
        let data = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                F::from_f64_lossy(v)
            })
            .collect();
        from_vec(shape, data)
    }
}

/// Shared ReLU trunk with mean and log-variance heads. Heads start at zero
/// weight with bias `(0, INIT_LOG_VAR)`, so every net initially outputs
/// the same distribution whatever its input.
#[derive(Clone, Debug, PartialEq)]
pub struct AmortizationNet {
    pub trunk: Linear,
    pub mu: Linear,
    pub log_var: Linear,
}

impl AmortizationNet {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, in_dim: usize, hidden: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            trunk: Linear::new(store, &format!("{name}.trunk"), in_dim, hidden, rng),
            mu: Linear::constant(store, &format!("{name}.mu"), hidden, out_dim, 0.0),
            log_var: Linear::constant(store, &format!("{name}.log_var"), hidden, out_dim, INIT_LOG_VAR),
        }
    }

    pub fn forward<F: Scalar>(&self, s: &Session<F>, input: Var) -> Result<GaussianLatent> {
        let shape = s.shape(input);
        if shape.len() != 2 || shape[1] != self.trunk.in_dim {
            return Err(Error::shape("amortization input", format!("[N, {}]", self.trunk.in_dim), format!("{shape:?}")));
        }
        let h = s.relu(self.trunk.forward(s, input));
        let lv = self.log_var.forward(s, h);
        Ok(GaussianLatent {
            mu: self.mu.forward(s, h),
            log_var: s.clamp(lv, F::from_f64_lossy(LOG_VAR_MIN), F::from_f64_lossy(LOG_VAR_MAX)),
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.trunk, &self.mu, &self.log_var].into_iter().flat_map(Linear::params).collect()
    }
}

/// Latent for encoder block `block`. The prior sees the conditioning
/// summary and the previous sample; the posterior additionally sees the
/// base summary.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentLayer {
    pub block: usize,
    pub prior: AmortizationNet,
    pub posterior: AmortizationNet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmortizationNets {
    pub chain: Vec<LatentLayer>,
    pub channels: usize,
    /// Separate latents for the support and query paths.
    pub split_latent: bool,
}

impl AmortizationNets {
    /// One latent layer per listed block, chained in the given order.
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, blocks: &[usize], channels: usize, split_latent: bool, rng: &mut ChaCha8Rng) -> Self {
        let c = channels;
        let chain = blocks
            .iter()
            .map(|&b| LatentLayer {
                block: b,
                prior: AmortizationNet::new(store, &format!("latent.{b}.prior"), 3 * c, 2 * c, 2 * c, rng),
                posterior: AmortizationNet::new(store, &format!("latent.{b}.posterior"), 4 * c, 2 * c, 2 * c, rng),
            })
            .collect();
        Self {
            chain,
            channels,
            split_latent,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.chain
            .iter()
            .flat_map(|l| l.prior.params().into_iter().chain(l.posterior.params()))
            .collect()
    }
}

/// Per-layer class summaries of a pair, aligned to conditioning classes.
pub struct PairSummaries {
    /// `[n_way, C]` per encoder block, conditioning task.
    pub conditioning: Vec<Var>,
    /// Base summaries routed so row `n` holds base class `class_pairing[n]`.
    pub base: Vec<Var>,
}

pub fn pair_summaries<F: Scalar>(
    g: &Graph<F>,
    pair: &EpisodePair,
    conditioning: &LayerActivations,
    base: &LayerActivations,
    split: Split,
) -> Result<PairSummaries> {
    let n = pair.base.n_way;
    let cond = summarize_conditioning(g, conditioning, &pair.conditioning.row_labels(), n, split, false)?;
    let base = summarize_conditioning(g, base, &pair.base.row_labels(), n, split, false)?
        .into_iter()
        .map(|b| g.gather_rows(b, &pair.class_pairing))
        .collect();
    Ok(PairSummaries {
        conditioning: cond,
        base,
    })
}

pub struct ChainSample {
    /// Sample per chain layer, `[n_way, 2C]`.
    pub z: Vec<Var>,
    /// `KL(q || p)` per chain layer.
    pub kl: Vec<Var>,
    pub posterior: Vec<GaussianLatent>,
    pub prior: Vec<GaussianLatent>,
}

/// Walks the chain once: `z^0 = 0`, then for each layer evaluates prior
/// and posterior given `z^{l-1}` and draws `z^l` from the posterior.
pub fn sample_chain<F: Scalar>(s: &Session<F>, nets: &AmortizationNets, summaries: &PairSummaries, noise: &mut NoiseStream) -> Result<ChainSample> {
    let c = nets.channels;
    let n = s.shape(summaries.conditioning[0])[0];
    let mut prev = s.constant(Tensor::zeros(ndarray::IxDyn(&[n, 2 * c])));
    let mut out = ChainSample {
        z: Vec::new(),
        kl: Vec::new(),
        posterior: Vec::new(),
        prior: Vec::new(),
    };
    for layer in &nets.chain {
        let (cs, bs) = (summaries.conditioning[layer.block], summaries.base[layer.block]);
        let p = layer.prior.forward(s, s.concat(&[cs, prev], 1))?;
        let q = layer.posterior.forward(s, s.concat(&[cs, bs, prev], 1))?;
        let eps = s.constant(noise.sample(&[n, 2 * c]));
        let z = reparameterize(s, q, eps);
        out.kl.push(kl_gaussian(s, q, p));
        out.z.push(z);
        out.posterior.push(q);
        out.prior.push(p);
        prev = z;
    }
    Ok(out)
}

/// One modulated pass of the base episode: samples every chain (one, or
/// one per split) and decodes the samples into per-block deltas. Blocks
/// without a latent are left unmodulated.
#[allow(clippy::too_many_arguments)]
pub fn variational_forward<F: Scalar>(
    s: &Session<F>,
    encoder: &Encoder,
    nets: &AmortizationNets,
    pair: &EpisodePair,
    base_input: Var,
    conditioning: &LayerActivations,
    base: &LayerActivations,
    noise: &mut NoiseStream,
    mode: Mode,
) -> Result<(EncodeOutput<F>, Vec<ChainSample>)> {
    if nets.chain.is_empty() {
        return Err(Error::InvalidArgument("latent chain is empty".into()));
    }
    if let Some(l) = nets.chain.iter().find(|l| l.block >= encoder.blocks.len()) {
        return Err(Error::InvalidArgument(format!("latent block {} out of range", l.block)));
    }
    let splits: &[Split] = if nets.split_latent {
        &[Split::Support, Split::Query]
    } else {
        &[Split::Support]
    };
    let chains = splits
        .iter()
        .map(|&sp| sample_chain(s, nets, &pair_summaries(s, pair, conditioning, base, sp)?, noise))
        .collect::<Result<Vec<_>>>()?;
    let decode = |chain: &ChainSample| -> Result<Vec<Option<LayerDelta>>> {
        let mut per_block = vec![None; encoder.blocks.len()];
        for (layer, &z) in nets.chain.iter().zip(&chain.z) {
            per_block[layer.block] = Some(decode_deltas(s, z, nets.channels)?);
        }
        Ok(per_block)
    };
    let sup = decode(&chains[0])?;
    let qry = decode(chains.last().expect("one chain"))?;
    let zero = s.constant(Tensor::zeros(ndarray::IxDyn(&[pair.base.n_way, nets.channels])));
    let fill = |d: Option<LayerDelta>| d.unwrap_or(LayerDelta { dgamma: zero, dbeta: zero });
    let deltas = ModulationDelta {
        support: sup.into_iter().map(fill).collect(),
        query: qry.into_iter().map(fill).collect(),
    };
    let mut m = route_deltas(s, pair, &deltas)?;
    for (b, slot) in m.iter_mut().enumerate() {
        if !nets.chain.iter().any(|l| l.block == b) {
            *slot = None;
        }
    }
    let out = encoder.encode(s, base_input, pair.base.n_support(), mode, Some(&m))?;
    Ok((out, chains))
}

pub struct ObjectiveOutput {
    pub loss: Var,
    /// Monte-Carlo mean negative log-likelihood.
    pub nll: f64,
    /// Monte-Carlo mean of the total KL.
    pub kl: f64,
    pub kl_per_layer: Vec<f64>,
}

/// `mean_s NLL(z_s) + kl_weight * mean_s Σ_l KL_l(z_s)` for one pair.
#[allow(clippy::too_many_arguments)]
pub fn variational_objective<F: Scalar>(
    s: &Session<F>,
    encoder: &Encoder,
    nets: &AmortizationNets,
    pair: &EpisodePair,
    base_input: Var,
    conditioning: &LayerActivations,
    base: &LayerActivations,
    mc_samples: usize,
    kl_weight: f64,
    noise: &mut NoiseStream,
) -> Result<ObjectiveOutput> {
    if mc_samples == 0 {
        return Err(Error::InvalidArgument("mc_samples must be at least 1".into()));
    }
    let (sl, ql) = (pair.base.support_labels(), pair.base.query_labels());
    let n_layers = nets.chain.len();
    let mut nll_terms = Vec::with_capacity(mc_samples);
    let mut kl_terms = Vec::with_capacity(mc_samples);
    let mut kl_per_layer = vec![0.0; n_layers];
    for _ in 0..mc_samples {
        let (out, chains) = variational_forward(s, encoder, nets, pair, base_input, conditioning, base, noise, Mode::Train)?;
        nll_terms.push(episode_loss(s, out.embedding, &sl, &ql, pair.base.n_way)?);
        let mut kl_total = Vec::new();
        for chain in &chains {
            for (l, &k) in chain.kl.iter().enumerate() {
                kl_per_layer[l] += s.scalar(k).to_f64_lossy() / mc_samples as f64;
                kl_total.push(k);
            }
        }
        kl_terms.push(sum_vars(s, &kl_total));
    }
    let inv = F::from_f64_lossy(1.0 / mc_samples as f64);
    let nll = s.scale(sum_vars(s, &nll_terms), inv);
    let kl = s.scale(sum_vars(s, &kl_terms), inv);
    let loss = s.add(nll, s.scale(kl, F::from_f64_lossy(kl_weight)));
    Ok(ObjectiveOutput {
        loss,
        nll: s.scalar(nll).to_f64_lossy(),
        kl: s.scalar(kl).to_f64_lossy(),
        kl_per_layer,
    })
}

pub(crate) fn sum_vars<F: Scalar>(g: &Graph<F>, vars: &[Var]) -> Var {
    let mut it = vars.iter().copied();
    let first = it.next().expect("at least one term");
    it.fold(first, |acc, v| g.add(acc, v))
}

/// Flat variant: requires a single-layer chain.
#[allow(clippy::too_many_arguments)]
pub fn vtm_objective<F: Scalar>(
    s: &Session<F>,
    encoder: &Encoder,
    nets: &AmortizationNets,
    pair: &EpisodePair,
    base_input: Var,
    conditioning: &LayerActivations,
    base: &LayerActivations,
    mc_samples: usize,
    kl_weight: f64,
    noise: &mut NoiseStream,
) -> Result<ObjectiveOutput> {
    if nets.chain.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "flat variational modulation uses one latent layer, got {}",
            nets.chain.len()
        )));
    }
    variational_objective(s, encoder, nets, pair, base_input, conditioning, base, mc_samples, kl_weight, noise)
}

/// Hierarchical variant: a latent per chain layer, total KL summed over
/// layers.
#[allow(clippy::too_many_arguments)]
pub fn hvtm_objective<F: Scalar>(
    s: &Session<F>,
    encoder: &Encoder,
    nets: &AmortizationNets,
    pair: &EpisodePair,
    base_input: Var,
    conditioning: &LayerActivations,
    base: &LayerActivations,
    mc_samples: usize,
    kl_weight: f64,
    noise: &mut NoiseStream,
) -> Result<ObjectiveOutput> {
    variational_objective(s, encoder, nets, pair, base_input, conditioning, base, mc_samples, kl_weight, noise)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_of_unit_shift_is_half() {
        assert!((kl_diag(&[1.0], &[0.0], &[0.0], &[0.0]) - 0.5).abs() < 1e-15);
        let g = Graph::<f64>::new();
        let c = |v: f64| g.constant(from_vec(&[1], vec![v]));
        let q = GaussianLatent { mu: c(1.0), log_var: c(0.0) };
        let p = GaussianLatent { mu: c(0.0), log_var: c(0.0) };
        assert!((g.scalar(kl_gaussian(&g, q, p)) - 0.5).abs() < 1e-15);
        assert_eq!(g.scalar(kl_gaussian(&g, q, q)), 0.0);
    }

    #[test]
    fn reparameterize_endpoints() {
        let g = Graph::<f64>::new();
        let c = |v: Vec<f64>| g.constant(from_vec(&[2], v));
        let lat = GaussianLatent {
            mu: c(vec![1.0, -2.0]),
            log_var: c(vec![0.0, 0.0]),
        };
        let z0 = reparameterize(&g, lat, c(vec![0.0, 0.0]));
        assert_eq!(g.value(z0).as_slice().unwrap(), &[1.0, -2.0]);
        let z1 = reparameterize(&g, lat, c(vec![0.5, 3.0]));
        assert_eq!(g.value(z1).as_slice().unwrap(), &[1.5, 1.0]);
    }

    #[test]
    fn decode_splits_halves() {
        let g = Graph::<f64>::new();
        let z = g.constant(from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]));
        let d = decode_deltas(&g, z, 2).unwrap();
        assert_eq!(g.value(d.dgamma).as_slice().unwrap(), &[1.0, 2.0]);
        assert_eq!(g.value(d.dbeta).as_slice().unwrap(), &[3.0, 4.0]);
        let back = g.concat(&[d.dgamma, d.dbeta], 1);
        assert_eq!(*g.value(back), *g.value(z));
        assert!(decode_deltas(&g, z, 3).is_err());
    }
}
