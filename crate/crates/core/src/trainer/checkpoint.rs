//! Binary checkpoint: magic `MMCK`, format version, a JSON header, then the
//! raw little-endian `f32` payload (every store entry in order, then the
//! Adam first and second moments of every parameter that has them).

use std::path::Path;

use metamod_autograd::Tensor;
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::Window;
use crate::error::{Error, Result};
use crate::nn::{Entry, ParamStore};
use crate::optim::{Adam, AdamConfig, Moments};

const MAGIC: &[u8; 4] = b"MMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub input_shape: (usize, usize, usize),
    /// Iterations completed.
    pub iteration: usize,
    pub best_val: Option<f64>,
    pub window: Window,
    /// Metrics lines written so far.
    pub metrics: Vec<String>,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
}

#[derive(Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    input_shape: (usize, usize, usize),
    iteration: usize,
    /// `f64` bit patterns keep resumed runs bit-identical.
    best_val_bits: Option<u64>,
    window_bits: [u64; 3],
    window_steps: usize,
    metrics: Vec<String>,
    entries: Vec<EntryMeta>,
    adam: AdamConfig,
    /// Per entry: Adam step count, `None` if it has no moments.
    adam_steps: Vec<Option<u64>>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        msg: msg.into(),
    }
}

fn put(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            input_shape: self.input_shape,
            iteration: self.iteration,
            best_val_bits: self.best_val.map(f64::to_bits),
            window_bits: [self.window.loss.to_bits(), self.window.nll.to_bits(), self.window.kl.to_bits()],
            window_steps: self.window.steps,
            metrics: self.metrics.clone(),
            entries: self
                .store
                .entries()
                .iter()
                .map(|e| EntryMeta {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    trainable: e.trainable,
                })
                .collect(),
            adam: self.adam.config,
            adam_steps: self.adam.state.iter().map(|s| s.as_ref().map(|m| m.step)).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 12 * self.store.n_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for e in self.store.entries() {
            put(&mut out, &e.value);
        }
        for m in self.adam.state.iter().flatten() {
            put(&mut out, &m.m);
            put(&mut out, &m.v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(format_err("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| format_err("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| format_err(e.to_string()))?;
        if header.adam_steps.len() != header.entries.len() {
            return Err(format_err("optimizer state does not match entries"));
        }
        let mut payload = &bytes[12 + hlen..];
        let mut take = |shape: &[usize]| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            if payload.len() < 4 * n {
                return Err(format_err("truncated payload"));
            }
            let data = payload[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            payload = &payload[4 * n..];
            Ok(Tensor::from_shape_vec(IxDyn(shape), data).expect("length checked"))
        };
        let mut entries = Vec::with_capacity(header.entries.len());
        for m in &header.entries {
            entries.push(Entry {
                name: m.name.clone(),
                value: take(&m.shape)?,
                trainable: m.trainable,
            });
        }
        let mut state = Vec::with_capacity(entries.len());
        for (m, step) in header.entries.iter().zip(&header.adam_steps) {
            state.push(match step {
                Some(step) => Some(Moments {
                    m: take(&m.shape)?,
                    v: take(&m.shape)?,
                    step: *step,
                }),
                None => None,
            });
        }
        if !payload.is_empty() {
            return Err(format_err(format!("{} trailing bytes", payload.len())));
        }
        let [loss, nll, kl] = header.window_bits.map(f64::from_bits);
        Ok(Self {
            config: header.config,
            input_shape: header.input_shape,
            iteration: header.iteration,
            best_val: header.best_val_bits.map(f64::from_bits),
            window: Window {
                loss,
                nll,
                kl,
                steps: header.window_steps,
            },
            metrics: header.metrics,
            store: ParamStore::from_entries(entries),
            adam: Adam { config: header.adam, state },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { what, msg } => Error::Format {
                what,
                msg: format!("{}: {msg}", path.display()),
            },
            other => other,
        })
    }
}
