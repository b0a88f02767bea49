//! Single-file dataset serialization.
//!
//! Layout: `b"MMDS"`, `u32` version, `u32` header length, JSON header
//! (spec, class names, instance classes), then every feature as a
//! little-endian `f32`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSpec};
use crate::error::{Error, Result};

pub const DATASET_BLOB_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"MMDS";

#[derive(Serialize, Deserialize)]
struct Header {
    spec: DatasetSpec,
    class_names: Vec<String>,
    instance_class: Vec<usize>,
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        spec: dataset.spec.clone(),
        class_names: dataset.class_names.clone(),
        instance_class: dataset.instance_class.clone(),
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + dataset.features.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&DATASET_BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in &dataset.features {
        out.write_all(&v.to_le_bytes()).expect("vec write");
    }
    crate::io::write_atomic(path, &out)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Format {
        what: "dataset blob",
        msg,
    };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad(format!("{} is not a dataset blob", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != DATASET_BLOB_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body)?;
    let payload = &bytes[12 + hlen..];
    if payload.len() % 4 != 0 {
        return Err(bad("payload is not a whole number of f32 values".into()));
    }
    let features = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Dataset::new(header.spec, header.class_names, features, header.instance_class)
}
