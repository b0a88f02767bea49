//! Meta-training loop shared by every method.

mod checkpoint;
pub mod config;

use std::path::{Path, PathBuf};
use std::time::Instant;

use metamod_autograd::{BatchStats, Scalar, Var};
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{Method, TrainConfig, CONFIG_VERSION};

use crate::backbone::{Encoder, Mode};
use crate::baselines::mlti_interpolate;
use crate::episodes::{pair_tasks, sample_episode, Dataset, Episode, EpisodePair, Phase};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalOptions};
use crate::modulation::{modulated_forward, DeltaPredictor};
use crate::nn::{ParamStore, Session};
use crate::optim::{Adam, AdamConfig};
use crate::protonet::episode_loss;
use crate::rng::{self, derive_seed, rng_for};
use crate::variational::{sum_vars, variational_forward, variational_objective, AmortizationNets, NoiseStream};

/// Encoder plus the method's auxiliary networks, all in one store.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<F = f32> {
    pub method: Method,
    pub store: ParamStore<F>,
    pub encoder: Encoder,
    pub predictor: Option<DeltaPredictor>,
    pub latents: Option<AmortizationNets>,
}

impl<F: Scalar> Model<F> {
    /// Deterministic in `config.seed`. The encoder is drawn first from its
    /// own stream, so every method starts from the same encoder weights.
    pub fn new(config: &TrainConfig, input_shape: (usize, usize, usize)) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(config.encoder(input_shape), &mut store, &mut rng_for(config.seed, &[rng::TAG_INIT]))?;
        let mut aux = rng_for(config.seed, &[rng::TAG_INIT, 1]);
        let (n, c) = (config.n_blocks, config.channels);
        let predictor = (config.method == Method::Mtm)
            .then(|| DeltaPredictor::new(&mut store, n, c, config.per_task_deltas, &mut aux));
        let latents = match config.method {
            Method::Vtm => Some(AmortizationNets::new(&mut store, &[config.vtm_layer], c, config.split_latent, &mut aux)),
            Method::Hvtm => {
                let blocks: Vec<usize> = (0..n).collect();
                Some(AmortizationNets::new(&mut store, &blocks, c, config.split_latent, &mut aux))
            }
            _ => None,
        };
        Ok(Self {
            method: config.method,
            store,
            encoder,
            predictor,
            latents,
        })
    }

    /// Rebuilds the model layout for `config` and adopts `store`, which
    /// must hold the same entries.
    pub fn with_store(config: &TrainConfig, input_shape: (usize, usize, usize), store: ParamStore<F>) -> Result<Self> {
        let mut model = Self::new(config, input_shape)?;
        let fresh = model.store.entries();
        let loaded = store.entries();
        if fresh.len() != loaded.len() {
            return Err(Error::shape("stored parameter count", fresh.len(), loaded.len()));
        }
        for (a, b) in fresh.iter().zip(loaded) {
            if a.name != b.name || a.value.shape() != b.value.shape() || a.trainable != b.trainable {
                return Err(Error::shape(
                    "stored parameter",
                    format!("{} {:?}", a.name, a.value.shape()),
                    format!("{} {:?}", b.name, b.value.shape()),
                ));
            }
        }
        model.store = store;
        Ok(model)
    }
}

/// Graph of one meta-batch objective.
pub struct BatchObjective<F> {
    pub loss: Var,
    /// Mean classification loss of the generated (or, for vanilla,
    /// original) tasks.
    pub nll: f64,
    /// Mean total KL of the variational methods.
    pub kl: Option<f64>,
    /// Train-mode statistics of the unmodulated pass of each episode.
    pub stats: Vec<Vec<Option<BatchStats<F>>>>,
}

/// Loss of one meta-batch at `iteration`. Vanilla averages the episodes'
/// losses; every other method averages, over pairs, the generated task's
/// loss plus `lambda_orig` times the base episode's own loss.
pub fn batch_objective<F: Scalar>(
    s: &Session<F>,
    model: &Model<F>,
    config: &TrainConfig,
    dataset: &Dataset,
    episodes: &[Episode],
    iteration: u64,
) -> Result<BatchObjective<F>> {
    let enc = &model.encoder;
    let inputs: Vec<Var> = episodes.iter().map(|e| s.constant(dataset.episode_tensor(e))).collect();
    let mut outs = Vec::with_capacity(episodes.len());
    let mut orig = Vec::with_capacity(episodes.len());
    for (e, &x) in episodes.iter().zip(&inputs) {
        let out = enc.encode(s, x, e.n_support(), Mode::Train, None)?;
        orig.push(episode_loss(s, out.embedding, &e.support_labels(), &e.query_labels(), e.n_way)?);
        outs.push(out);
    }
    let t = F::from_f64_lossy(1.0 / episodes.len() as f64);
    if model.method == Method::Vanilla {
        let loss = s.scale(sum_vars(s, &orig), t);
        let stats = outs.into_iter().map(|o| o.stats).collect();
        return Ok(BatchObjective {
            loss,
            nll: s.scalar(loss).to_f64_lossy(),
            kl: None,
            stats,
        });
    }
    let pairs = pair_tasks(episodes, derive_seed(config.seed, &[iteration]))?;
    let mut terms = Vec::with_capacity(pairs.len());
    let (mut nll, mut kl) = (0.0, 0.0);
    for p in &pairs {
        let (b, c) = (p.base_index, p.conditioning_index);
        let tags = [iteration, b as u64];
        let (sl, ql) = (p.base.support_labels(), p.base.query_labels());
        let n_way = p.base.n_way;
        let generated = match model.method {
            Method::Mtm => {
                let predictor = model.predictor.as_ref().expect("mtm model has a predictor");
                let out = modulated_forward(s, enc, predictor, p, inputs[b], &outs[c].activations, Mode::Train)?;
                episode_loss(s, out.embedding, &sl, &ql, n_way)?
            }
            Method::Mlti => {
                let mix = config.mixup()?;
                let mut r = rng_for(config.seed, &[rng::TAG_MIXUP, tags[0], tags[1]]);
                let layer = mix.sample_layer(enc.blocks.len(), &mut r)?;
                let lambda = mix.sample_lambda(&mut r)?;
                let out = mlti_interpolate(s, enc, p, inputs[b], inputs[c], &outs[b].activations, &outs[c].activations, layer, lambda)?;
                episode_loss(s, out.output.embedding, &sl, &ql, n_way)?
            }
            Method::Vtm | Method::Hvtm => {
                let nets = model.latents.as_ref().expect("variational model has latents");
                let mut noise = NoiseStream::new(derive_seed(config.seed, &[rng::TAG_NOISE, tags[0], tags[1]]));
                let obj = variational_objective(
                    s,
                    enc,
                    nets,
                    p,
                    inputs[b],
                    &outs[c].activations,
                    &outs[b].activations,
                    config.mc_samples,
                    config.kl_weight,
                    &mut noise,
                )?;
                nll += obj.nll;
                kl += obj.kl;
                terms.push(s.add(obj.loss, s.scale(orig[b], F::from_f64_lossy(config.lambda_orig))));
                continue;
            }
            Method::Vanilla => unreachable!(),
        };
        nll += s.scalar(generated).to_f64_lossy();
        terms.push(s.add(generated, s.scale(orig[b], F::from_f64_lossy(config.lambda_orig))));
    }
    let n = pairs.len() as f64;
    Ok(BatchObjective {
        loss: s.scale(sum_vars(s, &terms), t),
        nll: nll / n,
        kl: model.method.is_variational().then_some(kl / n),
        stats: outs.into_iter().map(|o| o.stats).collect(),
    })
}

impl Model<f32> {
    /// Pooled test-mode embedding of `pair.base` after modulation by
    /// `pair.conditioning`. Variational models use latent means. Models
    /// without a modulation return the unmodulated representation.
    pub fn modulated_task_repr(&self, dataset: &Dataset, pair: &EpisodePair) -> Result<Vec<f32>> {
        let g = metamod_autograd::Graph::new();
        let s = Session::frozen(&g, &self.store);
        let enc = &self.encoder;
        let xb = s.constant(dataset.episode_tensor(&pair.base));
        let xc = s.constant(dataset.episode_tensor(&pair.conditioning));
        let cond = enc.encode(&s, xc, pair.conditioning.n_support(), Mode::Test, None)?;
        let out = match (&self.predictor, &self.latents) {
            (Some(pred), _) => modulated_forward(&s, enc, pred, pair, xb, &cond.activations, Mode::Test)?,
            (None, Some(nets)) => {
                let base = enc.encode(&s, xb, pair.base.n_support(), Mode::Test, None)?;
                let mut zero = NoiseStream::zero();
                variational_forward(&s, enc, nets, pair, xb, &cond.activations, &base.activations, &mut zero, Mode::Test)?.0
            }
            (None, None) => return enc.pooled_task_repr(&self.store, dataset, &pair.base),
        };
        let e = s.value(out.embedding);
        Ok(e.mean_axis(ndarray::Axis(0)).expect("non-empty").iter().copied().collect())
    }
}

/// Running sums between two metrics lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Window {
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
    pub steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub nll: f64,
    pub kl: Option<f64>,
}

/// One line of `metrics.jsonl`; losses are window means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub iter: usize,
    pub loss: f64,
    pub nll: f64,
    pub kl: Option<f64>,
    pub val_acc: Option<f64>,
    pub ci95: Option<f64>,
    pub wallclock: Option<f64>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const BEST_FILE: &str = "best.bin";
pub const ABORT_FILE: &str = "abort.json";

pub struct Trainer<'d> {
    pub config: TrainConfig,
    pub model: Model,
    dataset: &'d Dataset,
    adam: Adam<f32>,
    iteration: usize,
    window: Window,
    metrics: Vec<String>,
    best_val: Option<f64>,
    out_dir: Option<PathBuf>,
    started: Instant,
}

impl<'d> Trainer<'d> {
    pub fn new(config: TrainConfig, dataset: &'d Dataset) -> Result<Self> {
        config.validate()?;
        for phase in [Phase::Train, Phase::Test] {
            let available = dataset.spec.classes(phase).len();
            if available < config.n_way {
                return Err(Error::TooFewClasses {
                    required: config.n_way,
                    available,
                });
            }
        }
        let model = Model::new(&config, dataset.spec.image_size)?;
        let adam = Adam::new(
            AdamConfig {
                lr: config.lr,
                ..Default::default()
            },
            model.store.len(),
        );
        Ok(Self {
            config,
            model,
            dataset,
            adam,
            iteration: 0,
            window: Window::default(),
            metrics: Vec::new(),
            best_val: None,
            out_dir: None,
            started: Instant::now(),
        })
    }

    /// Continues a run from a checkpoint; the remaining iterations replay
    /// exactly what an uninterrupted run would have done.
    pub fn resume(checkpoint: Checkpoint, dataset: &'d Dataset) -> Result<Self> {
        if checkpoint.input_shape != dataset.spec.image_size {
            return Err(Error::shape(
                "dataset instance shape",
                format!("{:?}", checkpoint.input_shape),
                format!("{:?}", dataset.spec.image_size),
            ));
        }
        let mut t = Self::new(checkpoint.config.clone(), dataset)?;
        t.model = Model::with_store(&checkpoint.config, checkpoint.input_shape, checkpoint.store)?;
        if checkpoint.adam.state.len() != t.model.store.len() {
            return Err(Error::shape("optimizer state", t.model.store.len(), checkpoint.adam.state.len()));
        }
        t.adam = checkpoint.adam;
        t.iteration = checkpoint.iteration;
        t.window = checkpoint.window;
        t.metrics = checkpoint.metrics;
        t.best_val = checkpoint.best_val;
        Ok(t)
    }

    /// Writes metrics and checkpoints under `dir` (created if missing).
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Serialized metrics lines so far.
    pub fn metrics(&self) -> &[String] {
        &self.metrics
    }

    pub fn best_val(&self) -> Option<f64> {
        self.best_val
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            input_shape: self.dataset.spec.image_size,
            iteration: self.iteration,
            best_val: self.best_val,
            window: self.window.clone(),
            metrics: self.metrics.clone(),
            store: self.model.store.clone(),
            adam: self.adam.clone(),
        }
    }

    fn batch(&self, iteration: usize) -> Result<Vec<Episode>> {
        let c = &self.config;
        (0..c.meta_batch)
            .map(|t| {
                let seed = derive_seed(c.seed, &[rng::TAG_BATCH, iteration as u64, t as u64]);
                sample_episode(self.dataset, Phase::Train, c.n_way, c.k_shot, c.q_per_class, seed)
            })
            .collect()
    }

    /// Runs one iteration: objective, Adam update, running statistics,
    /// then logging, validation and checkpointing when due.
    pub fn step(&mut self) -> Result<StepStats> {
        let it = self.iteration + 1;
        let episodes = self.batch(it)?;
        let g = metamod_autograd::Graph::new();
        let (stats, grads, obj_loss, nll, kl) = {
            let s = Session::new(&g, &self.model.store);
            let obj = batch_objective(&s, &self.model, &self.config, self.dataset, &episodes, it as u64)?;
            let loss = s.scalar(obj.loss) as f64;
            if !loss.is_finite() {
                return Err(self.abort(it, loss, &episodes));
            }
            let grads = s.param_grads(obj.loss);
            (obj.stats, grads, loss, obj.nll, obj.kl)
        };
        self.adam.step(&mut self.model.store, &grads);
        for st in &stats {
            self.model.encoder.update_running_stats(&mut self.model.store, st);
        }
        self.iteration = it;
        self.window.loss += obj_loss;
        self.window.nll += nll;
        self.window.kl += kl.unwrap_or(0.0);
        self.window.steps += 1;
        self.after_step()?;
        Ok(StepStats {
            loss: obj_loss,
            nll,
            kl,
        })
    }

    fn abort(&self, iteration: usize, loss: f64, episodes: &[Episode]) -> Error {
        let batch_seed = derive_seed(self.config.seed, &[rng::TAG_BATCH, iteration as u64]);
        if let Some(dir) = &self.out_dir {
            let dump = serde_json::json!({
                "iteration": iteration,
                "loss": loss.to_string(),
                "batch_seed": batch_seed,
                "episode_seeds": episodes.iter().map(|e| e.episode_seed).collect::<Vec<_>>(),
                "config": &self.config,
            });
            let text = serde_json::to_string_pretty(&dump).expect("dump serializes");
            // Best effort: the returned error carries the same facts.
            let _ = crate::io::write_atomic(&dir.join(ABORT_FILE), text.as_bytes());
        }
        Error::NonFiniteLoss {
            iteration,
            batch_seed,
            loss,
        }
    }

    fn after_step(&mut self) -> Result<()> {
        let c = &self.config;
        let it = self.iteration;
        let last = it == c.iterations;
        if it % c.log_every == 0 || it % c.eval_every == 0 || last {
            let val = if it % c.eval_every == 0 || last {
                Some(self.validate()?)
            } else {
                None
            };
            let w = std::mem::take(&mut self.window);
            let n = w.steps.max(1) as f64;
            let line = MetricsLine {
                iter: it,
                loss: w.loss / n,
                nll: w.nll / n,
                kl: c.method.is_variational().then_some(w.kl / n),
                val_acc: val.map(|v| v.0),
                ci95: val.map(|v| v.1),
                wallclock: c.record_wallclock.then(|| self.started.elapsed().as_secs_f64()),
            };
            self.metrics.push(serde_json::to_string(&line)?);
            let improved = match (val, self.best_val) {
                (Some((v, _)), Some(b)) => v > b,
                (Some(_), None) => true,
                _ => false,
            };
            if improved {
                self.best_val = val.map(|v| v.0);
            }
            if let Some(dir) = &self.out_dir {
                let mut text = self.metrics.join("\n");
                text.push('\n');
                crate::io::write_atomic(&dir.join(METRICS_FILE), text.as_bytes())?;
                if improved {
                    self.checkpoint().save(&dir.join(BEST_FILE))?;
                }
            }
        }
        if let Some(dir) = &self.out_dir {
            if it % self.config.checkpoint_every == 0 || last {
                self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
            }
        }
        Ok(())
    }

    /// Accuracy on meta-test classes with a seed stream disjoint from the
    /// final evaluation's.
    fn validate(&self) -> Result<(f64, f64)> {
        let c = &self.config;
        let opts = EvalOptions {
            n_episodes: c.val_episodes,
            n_way: c.n_way,
            k_shot: c.k_shot,
            q_per_class: c.q_per_class,
            seed: derive_seed(c.seed, &[rng::TAG_VAL]),
        };
        let r = evaluate(&self.model.encoder, &self.model.store, self.dataset, &opts)?;
        Ok((r.accuracy_mean, r.ci95))
    }

    /// Steps until `iteration` iterations are complete.
    pub fn run_until(&mut self, iteration: usize) -> Result<()> {
        while self.iteration < iteration.min(self.config.iterations) {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.iterations)
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

/// Trains `config` on `dataset` to completion and returns the final model
/// and its metrics lines.
pub fn run_training(config: TrainConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<(Model, Vec<String>)> {
    let mut t = Trainer::new(config, dataset)?;
    if let Some(dir) = out_dir {
        t = t.with_output(dir)?;
    }
    t.run()?;
    let metrics = t.metrics.clone();
    Ok((t.into_model(), metrics))
}
