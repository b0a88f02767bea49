use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Args;
use metamod_core::episodes::{
    generate_synthetic, load_image_folder, load_tabular_csv, read_dataset, split_classes, Dataset, ImageFolderOptions,
    SyntheticFamily, SyntheticOptions, TabularOptions,
};
use serde::{Deserialize, Serialize};

/// Where episodes come from.
#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataArgs {
    /// `synthetic` (stripes), `synthetic-blobs`, a dataset blob, an image
    /// folder (`root/<class>/<image>`) or a CSV with a `label` column.
    #[arg(long, default_value = "synthetic")]
    pub dataset: String,
    /// Meta-train classes; the rest are meta-test. Defaults to half when
    /// the source has no split of its own.
    #[arg(long)]
    pub train_classes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Seed of the synthetic generator.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Side length images from a folder are resized to.
    #[arg(long, default_value_t = 84)]
    pub image_size: usize,
}

impl DataArgs {
    /// The same selection as command-line arguments.
    pub fn to_args(&self) -> Vec<String> {
        let mut out = vec![
            "--dataset".to_string(),
            self.dataset.clone(),
            "--split-seed".into(),
            self.split_seed.to_string(),
            "--data-seed".into(),
            self.data_seed.to_string(),
            "--image-size".into(),
            self.image_size.to_string(),
        ];
        if let Some(n) = self.train_classes {
            out.extend(["--train-classes".to_string(), n.to_string()]);
        }
        out
    }

    pub fn load(&self) -> Result<Dataset> {
        let family = match self.dataset.as_str() {
            "synthetic" | "synthetic-stripes" => Some(SyntheticFamily::Stripes),
            "synthetic-blobs" => Some(SyntheticFamily::Blobs),
            _ => None,
        };
        let ds = match family {
            Some(family) => generate_synthetic(&SyntheticOptions { family, ..Default::default() }, self.data_seed)?,
            None => {
                let path = Path::new(&self.dataset);
                if !path.exists() {
                    bail!(
                        "dataset {:?} is neither a built-in (synthetic, synthetic-blobs) nor an existing path",
                        self.dataset
                    );
                }
                let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                if path.is_dir() {
                    let opts = ImageFolderOptions {
                        name,
                        resize: (self.image_size, self.image_size),
                    };
                    load_image_folder(path, &opts)?
                } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
                    load_tabular_csv(path, &TabularOptions { name, ..Default::default() })?
                } else {
                    read_dataset(path)?
                }
            }
        };
        let needs_split = ds.spec.meta_test_classes.is_empty() || self.train_classes.is_some();
        if !needs_split {
            return Ok(ds);
        }
        let n_train = self.train_classes.unwrap_or(ds.n_classes() / 2);
        let spec = split_classes(&ds.spec, n_train, self.split_seed)
            .with_context(|| format!("splitting {} classes", ds.n_classes()))?;
        Ok(ds.with_spec(spec)?)
    }
}
