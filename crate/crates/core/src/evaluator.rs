//! Meta-test protocol, cross-domain evaluation and task-similarity analysis.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{modulated_forward_count, Encoder};
use crate::episodes::{pair_tasks, sample_episode, Dataset, Episode, Phase};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::protonet::episode_accuracy;
use crate::rng;
use crate::trainer::Model;

/// Hex SHA-256 of the JSON form of `value`.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("serializable");
    hex::encode(Sha256::digest(&json))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub n_episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_episodes: 600,
            n_way: 5,
            k_shot: 1,
            q_per_class: 15,
            seed: 0,
        }
    }
}

/// Accuracies in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub accuracy_mean: f64,
    /// Half-width of the normal 95% interval of the mean.
    pub ci95: f64,
    pub per_episode: Vec<f64>,
    pub n_episodes: usize,
    pub config_fingerprint: String,
}

impl MetricsRecord {
    /// `ci95 = 1.96 * std / sqrt(n)` with the sample standard deviation.
    pub fn from_accuracies(per_episode: Vec<f64>, config_fingerprint: String) -> Self {
        let n = per_episode.len();
        let mean = if n == 0 { 0.0 } else { per_episode.iter().sum::<f64>() / n as f64 };
        let std = if n > 1 {
            (per_episode.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let ci95 = if n == 0 { 0.0 } else { 1.96 * std / (n as f64).sqrt() };
        Self {
            accuracy_mean: mean,
            ci95,
            per_episode,
            n_episodes: n,
            config_fingerprint,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        crate::io::write_atomic(path, text.as_bytes())
    }
}

/// Meta-test episodes sampled by [`evaluate`].
pub fn test_episodes(dataset: &Dataset, opts: &EvalOptions) -> Result<Vec<Episode>> {
    (0..opts.n_episodes)
        .map(|e| {
            let seed = rng::derive_seed(opts.seed, &[rng::TAG_TEST, e as u64]);
            sample_episode(dataset, Phase::Test, opts.n_way, opts.k_shot, opts.q_per_class, seed)
        })
        .collect()
}

/// Prototypes from each test episode's support set, nearest-prototype
/// classification of its queries, no modulation. Normalization uses the
/// encoder's running statistics.
pub fn evaluate(encoder: &Encoder, store: &ParamStore<f32>, dataset: &Dataset, opts: &EvalOptions) -> Result<MetricsRecord> {
    let before = modulated_forward_count();
    let mut acc = Vec::with_capacity(opts.n_episodes);
    for ep in test_episodes(dataset, opts)? {
        let emb = encoder.embed_instances(store, dataset, &ep.instance_ids())?;
        acc.push(100.0 * episode_accuracy(&emb, &ep.support_labels(), &ep.query_labels(), ep.n_way)?);
    }
    debug_assert_eq!(modulated_forward_count(), before, "evaluation must not modulate");
    Ok(MetricsRecord::from_accuracies(
        acc,
        fingerprint(&(opts, &encoder.config, &dataset.spec)),
    ))
}

/// [`evaluate`] on the meta-test classes of another dataset.
pub fn cross_domain_eval(encoder: &Encoder, store: &ParamStore<f32>, target: &Dataset, opts: &EvalOptions) -> Result<MetricsRecord> {
    if target.spec.image_size != encoder.config.input_shape {
        return Err(Error::shape(
            "cross-domain input",
            format!("{:?}", encoder.config.input_shape),
            format!("{:?}", target.spec.image_size),
        ));
    }
    evaluate(encoder, store, target, opts)
}

/// Euclidean distances, `out[i][j] = ||a_i - b_j||`.
pub fn distance_matrix(a: &[Vec<f32>], b: &[Vec<f32>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|x| {
            b.iter()
                .map(|y| x.iter().zip(y).map(|(u, v)| ((u - v) as f64).powi(2)).sum::<f64>().sqrt())
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// Rows: meta-train tasks; columns: meta-test tasks.
    pub distances: Vec<Vec<f64>>,
    pub mean_distance: f64,
}

impl SimilarityReport {
    pub fn new(train: &[Vec<f32>], test: &[Vec<f32>]) -> Result<Self> {
        if train.is_empty() || test.is_empty() {
            return Err(Error::InvalidArgument("task similarity needs tasks on both sides".into()));
        }
        let distances = distance_matrix(train, test);
        let n = (train.len() * test.len()) as f64;
        let mean_distance = distances.iter().flatten().sum::<f64>() / n;
        Ok(Self {
            distances,
            mean_distance,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let cols = self.distances.first().map_or(0, Vec::len);
        let mut header = vec!["train_task".to_string()];
        header.extend((0..cols).map(|j| format!("test_{j}")));
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        w.write_record(&header).map_err(csv_err)?;
        for (i, row) in self.distances.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(|d| format!("{d}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        crate::io::write_atomic(path, &bytes)
    }

    /// Grayscale heatmap of `exp(-d / mean)` with `cell` pixels per entry;
    /// brighter is more similar.
    pub fn write_heatmap(&self, path: &Path, cell: u32) -> Result<()> {
        let rows = self.distances.len() as u32;
        let cols = self.distances.first().map_or(0, Vec::len) as u32;
        let scale = if self.mean_distance > 0.0 { self.mean_distance } else { 1.0 };
        let img = image::GrayImage::from_fn(cols * cell, rows * cell, |x, y| {
            let d = self.distances[(y / cell) as usize][(x / cell) as usize];
            image::Luma([((-d / scale).exp() * 255.0).round().clamp(0.0, 255.0) as u8])
        });
        let mut bytes = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?;
        crate::io::write_atomic(path, &bytes)
    }
}

/// Pooled test-mode representation of each episode.
pub fn task_representations(encoder: &Encoder, store: &ParamStore<f32>, dataset: &Dataset, episodes: &[Episode]) -> Result<Vec<Vec<f32>>> {
    episodes.iter().map(|e| encoder.pooled_task_repr(store, dataset, e)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityOptions {
    pub n_train_tasks: usize,
    pub n_test_tasks: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    /// Meta-train episodes paired with each other per batch.
    pub meta_batch: usize,
    pub seed: u64,
    /// Represent meta-train tasks after modulation; `false` pools the
    /// same base episodes unmodulated.
    pub modulate: bool,
}

impl Default for SimilarityOptions {
    fn default() -> Self {
        Self {
            n_train_tasks: 300,
            n_test_tasks: 300,
            n_way: 5,
            k_shot: 1,
            q_per_class: 15,
            meta_batch: 4,
            seed: 0,
            modulate: true,
        }
    }
}

/// Distances between the tasks `model` trains on and meta-test tasks.
/// Meta-train episodes are paired within batches as in training and, with
/// `opts.modulate`, represented after modulation (models without one use
/// the plain pooled representation); meta-test episodes are never
/// modulated.
pub fn task_similarity(model: &Model, dataset: &Dataset, opts: &SimilarityOptions) -> Result<SimilarityReport> {
    let mut train = Vec::with_capacity(opts.n_train_tasks);
    let mut batch_index = 0u64;
    while train.len() < opts.n_train_tasks {
        let batch = (0..opts.meta_batch as u64)
            .map(|t| {
                let seed = rng::derive_seed(opts.seed, &[rng::TAG_BATCH, batch_index, t]);
                sample_episode(dataset, Phase::Train, opts.n_way, opts.k_shot, opts.q_per_class, seed)
            })
            .collect::<Result<Vec<_>>>()?;
        let pairs = pair_tasks(&batch, rng::derive_seed(opts.seed, &[rng::TAG_PAIRING, batch_index]))?;
        for pair in pairs.iter().take(opts.n_train_tasks - train.len()) {
            train.push(if opts.modulate {
                model.modulated_task_repr(dataset, pair)?
            } else {
                model.encoder.pooled_task_repr(&model.store, dataset, &pair.base)?
            });
        }
        batch_index += 1;
    }
    let test_opts = EvalOptions {
        n_episodes: opts.n_test_tasks,
        n_way: opts.n_way,
        k_shot: opts.k_shot,
        q_per_class: opts.q_per_class,
        seed: opts.seed,
    };
    let test = task_representations(&model.encoder, &model.store, dataset, &test_episodes(dataset, &test_opts)?)?;
    SimilarityReport::new(&train, &test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_formula() {
        let r = MetricsRecord::from_accuracies(vec![20.0, 40.0, 60.0], "x".into());
        assert!((r.accuracy_mean - 40.0).abs() < 1e-12);
        assert!((r.ci95 - 1.96 * 20.0 / 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn distances_are_a_metric() {
        let a = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
        let d = distance_matrix(&a, &a);
        assert_eq!(d[0][0], 0.0);
        assert_eq!(d[0][1], 5.0);
        assert_eq!(d[0][1], d[1][0]);
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let r = SimilarityReport::new(&[vec![0.0], vec![1.0]], &[vec![0.0], vec![2.0], vec![4.0]]).unwrap();
        r.write_csv(&dir.path().join("d.csv")).unwrap();
        r.write_heatmap(&dir.path().join("d.png"), 4).unwrap();
        let text = std::fs::read_to_string(dir.path().join("d.csv")).unwrap();
        assert_eq!(text.lines().count(), 3);
        let img = image::open(dir.path().join("d.png")).unwrap();
        assert_eq!((img.width(), img.height()), (12, 8));
    }
}
