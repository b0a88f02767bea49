use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use metamod_core::episodes::DatasetSpec;
use metamod_core::evaluator::EvalOptions;
use metamod_core::io::write_atomic;
use metamod_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::data::DataArgs;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const EVAL_FILE: &str = "eval.json";
pub const MANIFEST_VERSION: u32 = 1;
/// Version of the `metrics.jsonl` line layout.
pub const METRICS_SCHEMA: u32 = 1;
/// Version of the sweep CSV layout (`value,accuracy_mean,ci95`).
pub const SWEEP_CSV_SCHEMA: u32 = 1;

pub fn source_version() -> String {
    format!("{} ({})", env!("CARGO_PKG_VERSION"), env!("METAMOD_SOURCE_REV"))
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Running,
    Planned,
    Completed,
    /// Checkpointed before the last iteration on request.
    Stopped,
    Aborted,
}

/// Record of one training run, rewritten when the run ends.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub metrics_schema: u32,
    pub version: String,
    pub seed: u64,
    pub data: DataArgs,
    pub dataset_spec: DatasetSpec,
    pub config: TrainConfig,
    /// Options of the meta-test run that ends training.
    pub eval: Option<EvalOptions>,
    pub started: String,
    pub finished: Option<String>,
    pub status: Status,
    pub error: Option<String>,
    /// Artifact name to file name, relative to the run directory.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(config: &TrainConfig, data: &DataArgs, spec: &DatasetSpec) -> Self {
        Self {
            manifest_version: MANIFEST_VERSION,
            metrics_schema: METRICS_SCHEMA,
            version: source_version(),
            seed: config.seed,
            data: data.clone(),
            dataset_spec: spec.clone(),
            config: config.clone(),
            eval: None,
            started: now(),
            finished: None,
            status: Status::Running,
            error: None,
            outputs: BTreeMap::new(),
        }
    }

    /// Lists every artifact present in `dir` under its name.
    pub fn collect_outputs(&mut self, dir: &Path, names: &[(&str, &str)]) {
        self.outputs = names
            .iter()
            .filter(|(_, file)| dir.join(file).is_file())
            .map(|(k, f)| (k.to_string(), f.to_string()))
            .collect();
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// Creates `<root>/<UTC timestamp>-<label>`, adding a counter if that
/// directory already exists.
pub fn fresh_dir(root: &Path, label: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let stem = format!("{}-{label}", Utc::now().format("%Y%m%d-%H%M%S"));
    for n in 1.. {
        let name = if n == 1 { stem.clone() } else { format!("{stem}-{n}") };
        let dir = root.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}
