//! Datasets, few-task class splits, N-way k-shot episodes and task pairing.

mod blob;
mod loaders;
mod synthetic;

use std::collections::BTreeSet;

use metamod_autograd::{Scalar, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use blob::{read_dataset, write_dataset, DATASET_BLOB_VERSION};
pub use loaders::{load_image_folder, load_tabular_csv, resize_bilinear, ImageFolderOptions, TabularOptions};
pub use synthetic::{generate_synthetic, SyntheticFamily, SyntheticOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Synthetic,
    ImageFolder,
    TabularCsv,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub source: Source,
    /// `(height, width, channels)` of every instance.
    pub image_size: (usize, usize, usize),
    pub meta_train_classes: Vec<usize>,
    pub meta_test_classes: Vec<usize>,
}

impl DatasetSpec {
    pub fn feature_len(&self) -> usize {
        let (h, w, c) = self.image_size;
        h * w * c
    }

    pub fn all_classes(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .meta_train_classes
            .iter()
            .chain(&self.meta_test_classes)
            .copied()
            .collect();
        set.into_iter().collect()
    }

    pub fn classes(&self, phase: Phase) -> &[usize] {
        match phase {
            Phase::Train => &self.meta_train_classes,
            Phase::Test => &self.meta_test_classes,
        }
    }

    /// Checks that the train and test class lists are disjoint.
    pub fn validate(&self) -> Result<()> {
        let train: BTreeSet<_> = self.meta_train_classes.iter().collect();
        if let Some(c) = self.meta_test_classes.iter().find(|c| train.contains(c)) {
            return Err(Error::InvalidArgument(format!(
                "class {c} is in both meta-train and meta-test lists"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Test,
}

/// Materialized instances. Features are stored row-major, one row of
/// `height * width * channels` values (HWC order) per instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub class_names: Vec<String>,
    pub features: Vec<f32>,
    pub instance_class: Vec<usize>,
    pub class_instances: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(spec: DatasetSpec, class_names: Vec<String>, features: Vec<f32>, instance_class: Vec<usize>) -> Result<Self> {
        let len = spec.feature_len();
        if features.len() != len * instance_class.len() {
            return Err(Error::shape(
                "dataset features",
                format!("{} x {len}", instance_class.len()),
                features.len(),
            ));
        }
        let mut class_instances = vec![Vec::new(); class_names.len()];
        for (id, &c) in instance_class.iter().enumerate() {
            let slot = class_instances
                .get_mut(c)
                .ok_or_else(|| Error::InvalidArgument(format!("instance {id} has unknown class {c}")))?;
            slot.push(id);
        }
        spec.validate()?;
        Ok(Self {
            spec,
            class_names,
            features,
            instance_class,
            class_instances,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn n_instances(&self) -> usize {
        self.instance_class.len()
    }

    pub fn instance(&self, id: usize) -> &[f32] {
        let len = self.spec.feature_len();
        &self.features[id * len..(id + 1) * len]
    }

    /// Stacks instances into an NHWC tensor.
    pub fn batch<F: Scalar>(&self, ids: impl IntoIterator<Item = usize>) -> Tensor<F> {
        let (h, w, c) = self.spec.image_size;
        let mut data = Vec::new();
        let mut n = 0;
        for id in ids {
            data.extend(self.instance(id).iter().map(|&v| F::from_f64_lossy(v as f64)));
            n += 1;
        }
        ArrayD::from_shape_vec(IxDyn(&[n, h, w, c]), data).expect("instance length matches spec")
    }

    /// Support rows followed by query rows.
    pub fn episode_tensor<F: Scalar>(&self, episode: &Episode) -> Tensor<F> {
        self.batch(episode.instance_ids())
    }

    pub fn with_spec(mut self, spec: DatasetSpec) -> Result<Self> {
        spec.validate()?;
        self.spec = spec;
        Ok(self)
    }
}

/// One N-way k-shot task with episode-local labels in `[0, n_way)`.
///
/// Support is ordered by label then shot, query by label then index, so
/// row `label * k_shot + shot` is a support instance and row
/// `label * q_per_class + i` a query instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    /// `(instance id, label)`.
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    /// Source class of each episode-local label.
    pub class_ids: Vec<usize>,
    pub episode_seed: u64,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|&(_, l)| l).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|&(_, l)| l).collect()
    }

    /// Labels of every row of [`Dataset::episode_tensor`].
    pub fn row_labels(&self) -> Vec<usize> {
        self.support.iter().chain(&self.query).map(|&(_, l)| l).collect()
    }

    pub fn instance_ids(&self) -> Vec<usize> {
        self.support.iter().chain(&self.query).map(|&(id, _)| id).collect()
    }

    pub fn n_support(&self) -> usize {
        self.support.len()
    }

    pub fn n_rows(&self) -> usize {
        self.support.len() + self.query.len()
    }
}

/// Base task `T_j` whose features are modulated, conditioning task `T_i`
/// supplying the modulation, and the class pairing between them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodePair {
    pub base: Episode,
    pub conditioning: Episode,
    pub base_index: usize,
    pub conditioning_index: usize,
    /// `class_pairing[n] = n'` routes conditioning class `n` to base class `n'`.
    pub class_pairing: Vec<usize>,
}

impl EpisodePair {
    pub fn new(base: Episode, conditioning: Episode, class_pairing: Vec<usize>) -> Result<Self> {
        Self::indexed(base, conditioning, 0, 1, class_pairing)
    }

    pub(crate) fn indexed(
        base: Episode,
        conditioning: Episode,
        base_index: usize,
        conditioning_index: usize,
        class_pairing: Vec<usize>,
    ) -> Result<Self> {
        if base.n_way != conditioning.n_way {
            return Err(Error::shape("episode pair n_way", base.n_way, conditioning.n_way));
        }
        let mut seen = vec![false; base.n_way];
        for &p in &class_pairing {
            if p >= base.n_way || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidArgument(format!(
                    "class pairing {class_pairing:?} is not a permutation of 0..{}",
                    base.n_way
                )));
            }
        }
        if class_pairing.len() != base.n_way {
            return Err(Error::shape("class pairing length", base.n_way, class_pairing.len()));
        }
        Ok(Self {
            base,
            conditioning,
            base_index,
            conditioning_index,
            class_pairing,
        })
    }

    /// `inverse[n'] = n`: the conditioning class routed to base class `n'`.
    pub fn inverse_pairing(&self) -> Vec<usize> {
        let mut inv = vec![0; self.class_pairing.len()];
        for (n, &np) in self.class_pairing.iter().enumerate() {
            inv[np] = n;
        }
        inv
    }

    /// For every row of the base episode tensor, the row of the
    /// conditioning episode tensor it is aligned with: same split, same
    /// within-class position, conditioning class `inverse[label]`.
    ///
    /// Requires both episodes to share `k_shot` and `q_per_class`.
    pub fn aligned_rows(&self) -> Result<Vec<usize>> {
        let (b, c) = (&self.base, &self.conditioning);
        if b.k_shot != c.k_shot || b.q_per_class != c.q_per_class {
            return Err(Error::shape(
                "aligned episodes (k_shot, q_per_class)",
                format!("({}, {})", b.k_shot, b.q_per_class),
                format!("({}, {})", c.k_shot, c.q_per_class),
            ));
        }
        let inv = self.inverse_pairing();
        let (k, q, n_s) = (b.k_shot, b.q_per_class, c.support.len());
        let mut rows = Vec::with_capacity(b.n_rows());
        for (i, &(_, label)) in b.support.iter().enumerate() {
            rows.push(inv[label] * k + i % k);
        }
        for (i, &(_, label)) in b.query.iter().enumerate() {
            rows.push(n_s + inv[label] * q + i % q);
        }
        Ok(rows)
    }
}

/// Re-draws the train/test class split: `n_train` meta-train classes, the
/// rest meta-test.
pub fn split_classes(spec: &DatasetSpec, n_train: usize, seed: u64) -> Result<DatasetSpec> {
    let mut classes = spec.all_classes();
    if classes.len() < n_train + 1 {
        return Err(Error::TooFewClasses {
            required: n_train + 1,
            available: classes.len(),
        });
    }
    classes.shuffle(&mut rng::rng_for(seed, &[rng::TAG_SPLIT]));
    let (train, test) = classes.split_at(n_train);
    let mut train = train.to_vec();
    let mut test = test.to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(DatasetSpec {
        meta_train_classes: train,
        meta_test_classes: test,
        ..spec.clone()
    })
}

/// Samples one N-way k-shot episode from the phase's class pool.
pub fn sample_episode(
    dataset: &Dataset,
    phase: Phase,
    n_way: usize,
    k_shot: usize,
    q_per_class: usize,
    seed: u64,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::InvalidArgument(format!(
            "n_way ({n_way}) and k_shot ({k_shot}) must be positive"
        )));
    }
    let pool = dataset.spec.classes(phase);
    if pool.len() < n_way {
        return Err(Error::TooFewClasses {
            required: n_way,
            available: pool.len(),
        });
    }
    let mut rng = rng::rng_for(seed, &[]);
    let class_ids: Vec<usize> = pool.choose_multiple(&mut rng, n_way).copied().collect();
    let needed = k_shot + q_per_class;
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * q_per_class);
    for (label, &class) in class_ids.iter().enumerate() {
        let members = dataset.class_instances.get(class).map(Vec::as_slice).unwrap_or(&[]);
        if members.len() < needed {
            return Err(Error::TooFewInstances {
                class,
                name: dataset.class_names.get(class).cloned().unwrap_or_default(),
                required: needed,
                available: members.len(),
            });
        }
        let picked: Vec<usize> = members.choose_multiple(&mut rng, needed).copied().collect();
        support.extend(picked[..k_shot].iter().map(|&id| (id, label)));
        query.extend(picked[k_shot..].iter().map(|&id| (id, label)));
    }
    Ok(Episode {
        support,
        query,
        n_way,
        k_shot,
        q_per_class,
        class_ids,
        episode_seed: seed,
    })
}

/// Pairs every episode, as base, with a different episode of the batch as
/// conditioning task. Conditioning indices form a uniformly random
/// derangement, so each episode is used once in each role.
pub fn pair_tasks(batch: &[Episode], seed: u64) -> Result<Vec<EpisodePair>> {
    let t = batch.len();
    if t < 2 {
        return Err(Error::SingletonBatch(t));
    }
    let mut rng = rng::rng_for(seed, &[rng::TAG_PAIRING]);
    let mut cond: Vec<usize> = (0..t).collect();
    loop {
        cond.shuffle(&mut rng);
        if cond.iter().enumerate().all(|(i, &c)| i != c) {
            break;
        }
    }
    let mut pairs = Vec::with_capacity(t);
    for (base_index, &conditioning_index) in cond.iter().enumerate() {
        let n_way = batch[base_index].n_way;
        let mut pairing: Vec<usize> = (0..n_way).collect();
        pairing.shuffle(&mut rng);
        pairs.push(EpisodePair::indexed(
            batch[base_index].clone(),
            batch[conditioning_index].clone(),
            base_index,
            conditioning_index,
            pairing,
        )?);
    }
    Ok(pairs)
}
