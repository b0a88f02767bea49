//! Conv4-style encoder: `conv -> batch norm -> affine -> ReLU -> max-pool`
//! per block, with an optional additive modulation of the affine step.

use std::cell::Cell;

use metamod_autograd::{BatchStats, Graph, PoolGeom, Scalar, Var};
use ndarray::{ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episodes::{Dataset, Episode};
use crate::error::{Error, Result};
use crate::nn::{he_normal, ParamId, ParamStore, Session};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// `(height, width, channels)` of the input.
    pub input_shape: (usize, usize, usize),
    pub n_blocks: usize,
    pub channels: usize,
    pub kernel: usize,
    pub pool: usize,
    pub bn_epsilon: f64,
    /// Weight kept on the old running statistics at each update.
    pub bn_momentum: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_shape: (84, 84, 3),
            n_blocks: 4,
            channels: 32,
            kernel: 3,
            pool: 2,
            bn_epsilon: 1e-5,
            bn_momentum: 0.9,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.input_shape;
        if self.n_blocks == 0 || self.channels == 0 || self.kernel == 0 || self.pool == 0 || h * w * c == 0 {
            return Err(Error::Config(format!("encoder sizes must be positive: {self:?}")));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel must be odd, got {}", self.kernel)));
        }
        if !(self.bn_epsilon > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!(
                "bn_epsilon must be > 0 and bn_momentum in [0, 1): {} {}",
                self.bn_epsilon, self.bn_momentum
            )));
        }
        Ok(())
    }

    /// `(height, width, channels)` after every block.
    pub fn block_output_shapes(&self) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w, _) = self.input_shape;
        (0..self.n_blocks)
            .map(|_| {
                let g = PoolGeom::new(h, w, self.pool);
                h = g.out_h;
                w = g.out_w;
                (h, w, self.channels)
            })
            .collect()
    }

    pub fn embedding_dim(&self) -> usize {
        let (h, w, c) = *self.block_output_shapes().last().expect("at least one block");
        h * w * c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Normalize with the batch's own statistics.
    Train,
    /// Normalize with running statistics.
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub conv: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub blocks: Vec<Block>,
}

/// Additive change to one block's affine parameters. `dgamma` and `dbeta`
/// are either `[C]` (every row) or `[B, C]` (one delta per row).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockModulation {
    pub dgamma: Var,
    pub dbeta: Var,
}

/// Pre-normalization maps `H^l` of every block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerActivations {
    pub pre_norm: Vec<Var>,
    /// Rows `0..n_support` are support instances, the rest query.
    pub n_support: usize,
}

pub struct EncodeOutput<F> {
    /// `[B, embedding_dim]`.
    pub embedding: Var,
    pub activations: LayerActivations,
    /// Batch statistics per block in train mode.
    pub stats: Vec<Option<BatchStats<F>>>,
}

thread_local! {
    static MODULATED_FORWARDS: Cell<usize> = const { Cell::new(0) };
}

/// Number of forward passes on this thread that applied a modulation.
pub fn modulated_forward_count() -> usize {
    MODULATED_FORWARDS.with(Cell::get)
}

pub(crate) fn note_modulation() {
    MODULATED_FORWARDS.with(|c| c.set(c.get() + 1));
}

impl Encoder {
    pub fn new<F: Scalar>(config: EncoderConfig, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let k = config.kernel;
        let mut cin = config.input_shape.2;
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for l in 0..config.n_blocks {
            let fan_in = k * k * cin;
            let ones = ArrayD::from_elem(IxDyn(&[c]), F::one());
            let zeros = ArrayD::zeros(IxDyn(&[c]));
            blocks.push(Block {
                conv: store.add(format!("encoder.{l}.conv"), he_normal(rng, &[fan_in, c], fan_in)),
                gamma: store.add(format!("encoder.{l}.gamma"), ones.clone()),
                beta: store.add(format!("encoder.{l}.beta"), zeros.clone()),
                running_mean: store.add_buffer(format!("encoder.{l}.running_mean"), zeros),
                running_var: store.add_buffer(format!("encoder.{l}.running_var"), ones),
            });
            cin = c;
        }
        Ok(Self { config, blocks })
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim()
    }

    /// Trainable parameters (running statistics excluded).
    pub fn params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| [b.conv, b.gamma, b.beta]).collect()
    }

    /// Full forward pass of an NHWC batch.
    pub fn encode<F: Scalar>(
        &self,
        s: &Session<F>,
        x: Var,
        n_support: usize,
        mode: Mode,
        modulation: Option<&[Option<BlockModulation>]>,
    ) -> Result<EncodeOutput<F>> {
        let shape = s.shape(x);
        let (h, w, c) = self.config.input_shape;
        if shape.len() != 4 || shape[1..] != [h, w, c] {
            return Err(Error::shape("encoder input", format!("[B, {h}, {w}, {c}]"), format!("{shape:?}")));
        }
        self.run(s, x, 0, false, n_support, mode, modulation)
    }

    /// Continues a forward pass from a replacement pre-normalization map
    /// `h_pre` of block `block` (normalization, affine, ReLU, pooling and
    /// every later block). The returned activations start at `block`.
    pub fn encode_from<F: Scalar>(
        &self,
        s: &Session<F>,
        h_pre: Var,
        block: usize,
        n_support: usize,
        mode: Mode,
        modulation: Option<&[Option<BlockModulation>]>,
    ) -> Result<EncodeOutput<F>> {
        if block >= self.blocks.len() {
            return Err(Error::InvalidArgument(format!(
                "block {block} out of range for {} blocks",
                self.blocks.len()
            )));
        }
        self.run(s, h_pre, block, true, n_support, mode, modulation)
    }

    fn check_modulation<F: Scalar>(&self, s: &Graph<F>, rows: usize, m: &[Option<BlockModulation>]) -> Result<()> {
        if m.len() != self.blocks.len() {
            return Err(Error::shape("modulation layer count", self.blocks.len(), m.len()));
        }
        let c = self.config.channels;
        for bm in m.iter().flatten() {
            for v in [bm.dgamma, bm.dbeta] {
                let shape = s.shape(v);
                let ok = shape == [c] || shape == [rows, c];
                if !ok {
                    return Err(Error::shape(
                        "modulation delta",
                        format!("[{c}] or [{rows}, {c}]"),
                        format!("{shape:?}"),
                    ));
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn run<F: Scalar>(
        &self,
        s: &Session<F>,
        mut x: Var,
        start: usize,
        start_pre_norm: bool,
        n_support: usize,
        mode: Mode,
        modulation: Option<&[Option<BlockModulation>]>,
    ) -> Result<EncodeOutput<F>> {
        let rows = s.shape(x)[0];
        if let Some(m) = modulation {
            self.check_modulation(s, rows, m)?;
            note_modulation();
        }
        let eps = F::from_f64_lossy(self.config.bn_epsilon);
        let c = self.config.channels;
        let mut pre_norm = Vec::new();
        let mut stats = Vec::new();
        for (l, block) in self.blocks.iter().enumerate().skip(start) {
            let h = if start_pre_norm && l == start {
                let shape = s.shape(x);
                if shape.len() != 4 || shape[3] != c {
                    return Err(Error::shape("pre-norm map", format!("[B, H, W, {c}]"), format!("{shape:?}")));
                }
                x
            } else {
                s.conv2d(x, s.p(block.conv), self.config.kernel)
            };
            pre_norm.push(h);
            let normed = match mode {
                Mode::Train => {
                    let (n, st) = s.batch_norm(h, eps);
                    stats.push(Some(st));
                    n
                }
                Mode::Test => {
                    let store = s.store();
                    let mean = store.get(block.running_mean);
                    let var = store.get(block.running_var);
                    stats.push(None);
                    s.fixed_norm(h, mean.as_slice().expect("contiguous"), var.as_slice().expect("contiguous"), eps)
                }
            };
            let (mut gamma, mut beta) = (s.p(block.gamma), s.p(block.beta));
            if let Some(bm) = modulation.and_then(|m| m[l]) {
                gamma = s.add(gamma, bm.dgamma);
                beta = s.add(beta, bm.dbeta);
            }
            let y = s.channel_affine(normed, gamma, beta);
            // ReLU commutes with max pooling; pooling first touches fewer values.
            x = s.relu(s.max_pool2d(y, self.config.pool));
        }
        Ok(EncodeOutput {
            embedding: s.flatten(x),
            activations: LayerActivations { pre_norm, n_support },
            stats,
        })
    }

    /// Folds train-mode batch statistics into the running statistics.
    /// Running variance tracks the unbiased estimate.
    pub fn update_running_stats<F: Scalar>(&self, store: &mut ParamStore<F>, stats: &[Option<BatchStats<F>>]) {
        let m = self.config.bn_momentum;
        for (block, st) in self.blocks.iter().zip(stats) {
            let Some(st) = st else { continue };
            let unbias = if st.count > 1 {
                st.count as f64 / (st.count - 1) as f64
            } else {
                1.0
            };
            let mix = |old: F, new: f64| F::from_f64_lossy(m * old.to_f64_lossy() + (1.0 - m) * new);
            for (r, &b) in store.get_mut(block.running_mean).iter_mut().zip(&st.mean) {
                *r = mix(*r, b.to_f64_lossy());
            }
            for (r, &b) in store.get_mut(block.running_var).iter_mut().zip(&st.var) {
                *r = mix(*r, b.to_f64_lossy() * unbias);
            }
        }
    }

    /// Test-mode embeddings of dataset instances, `[n, embedding_dim]`.
    pub fn embed_instances(&self, store: &ParamStore<f32>, dataset: &Dataset, ids: &[usize]) -> Result<ndarray::Array2<f32>> {
        let g = Graph::new();
        let s = Session::frozen(&g, store);
        let x = s.constant(dataset.batch(ids.iter().copied()));
        let out = self.encode(&s, x, ids.len(), Mode::Test, None)?;
        let e = (*s.value(out.embedding)).clone();
        Ok(e.into_dimensionality().expect("embedding is a matrix"))
    }

    /// Instance pooling: mean test-mode embedding over the support and
    /// query instances of an episode.
    pub fn pooled_task_repr(&self, store: &ParamStore<f32>, dataset: &Dataset, episode: &Episode) -> Result<Vec<f32>> {
        let ids = episode.instance_ids();
        if ids.is_empty() {
            return Err(Error::InvalidArgument("episode has no instances".into()));
        }
        let e = self.embed_instances(store, dataset, &ids)?;
        Ok(e.mean_axis(Axis(0)).expect("non-empty").to_vec())
    }
}
