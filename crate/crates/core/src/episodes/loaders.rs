use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSpec, Source};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageFolderOptions {
    pub name: String,
    /// `(height, width)` every image is resized to.
    pub resize: (usize, usize),
}

impl Default for ImageFolderOptions {
    fn default() -> Self {
        Self {
            name: "image-folder".into(),
            resize: (84, 84),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularOptions {
    pub name: String,
    pub label_column: String,
}

impl Default for TabularOptions {
    fn default() -> Self {
        Self {
            name: "tabular".into(),
            label_column: "label".into(),
        }
    }
}

/// Bilinear resampling of an HWC image (pixel-centre aligned).
pub fn resize_bilinear(src: &[f32], from: (usize, usize, usize), to: (usize, usize)) -> Vec<f32> {
    let (h, w, c) = from;
    let (oh, ow) = to;
    let mut out = Vec::with_capacity(oh * ow * c);
    let scale_y = h as f32 / oh as f32;
    let scale_x = w as f32 / ow as f32;
    for y in 0..oh {
        let sy = ((y as f32 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f32;
        for x in 0..ow {
            let sx = ((x as f32 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f32;
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Loads `root/<class_name>/<image files>`. Classes are numbered in sorted
/// name order, pixels scaled to `[0, 1]`, every image resized to
/// `opts.resize` with three channels. All classes start as meta-train.
pub fn load_image_folder(root: &Path, opts: &ImageFolderOptions) -> Result<Dataset> {
    let (oh, ow) = opts.resize;
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} contains no class folders",
            root.display()
        )));
    }
    let mut names = Vec::new();
    let mut features = Vec::new();
    let mut instance_class = Vec::new();
    for (class, dir) in class_dirs.iter().enumerate() {
        let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_file()).collect();
        if files.is_empty() {
            return Err(Error::InvalidArgument(format!("class folder {} is empty", dir.display())));
        }
        for file in files {
            let img = image::open(&file)
                .map_err(|source| Error::Image {
                    path: file.clone(),
                    source,
                })?
                .to_rgb8();
            let (w, h) = img.dimensions();
            let pixels: Vec<f32> = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
            features.extend(resize_bilinear(&pixels, (h as usize, w as usize, 3), (oh, ow)));
            instance_class.push(class);
        }
        names.push(dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
    }
    let spec = DatasetSpec {
        name: opts.name.clone(),
        source: Source::ImageFolder,
        image_size: (oh, ow, 3),
        meta_train_classes: (0..names.len()).collect(),
        meta_test_classes: Vec::new(),
    };
    Dataset::new(spec, names, features, instance_class)
}

/// Loads a headed CSV with one label column; every other column is a
/// numeric feature, z-scored per column. Instances have shape `(1, 1, D)`.
pub fn load_tabular_csv(path: &Path, opts: &TabularOptions) -> Result<Dataset> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let label_at = headers.iter().position(|h| h == opts.label_column).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "{}: no label column {:?} (columns: {})",
            path.display(),
            opts.label_column,
            headers.iter().collect::<Vec<_>>().join(", ")
        ))
    })?;
    let dim = headers.len() - 1;
    let mut labels = Vec::new();
    let mut rows: Vec<f32> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        for (col, field) in record.iter().enumerate() {
            if col == label_at {
                labels.push(field.to_string());
                continue;
            }
            let v: f32 = field.trim().parse().map_err(|_| Error::Format {
                what: "tabular csv",
                msg: format!("row {}: column {:?} is not numeric: {field:?}", line + 1, &headers[col]),
            })?;
            rows.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument(format!("{} has no rows", path.display())));
    }
    let n = labels.len();
    for col in 0..dim {
        let mean = (0..n).map(|r| rows[r * dim + col] as f64).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (rows[r * dim + col] as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        for r in 0..n {
            let v = &mut rows[r * dim + col];
            *v = ((*v as f64 - mean) / std) as f32;
        }
    }
    let classes: BTreeMap<String, usize> = labels
        .iter()
        .cloned()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, name)| (name, i))
        .collect();
    let instance_class = labels.iter().map(|l| classes[l]).collect();
    let spec = DatasetSpec {
        name: opts.name.clone(),
        source: Source::TabularCsv,
        image_size: (1, 1, dim),
        meta_train_classes: (0..classes.len()).collect(),
        meta_test_classes: Vec::new(),
    };
    Dataset::new(spec, classes.into_keys().collect(), rows, instance_class)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_folder_enumerates_classes() {
        let dir = tempfile::tempdir().unwrap();
        for (ci, name) in ["zebra", "apple", "moth"].iter().enumerate() {
            let class_dir = dir.path().join(name);
            std::fs::create_dir(&class_dir).unwrap();
            for i in 0..10u8 {
                let img = image::RgbImage::from_pixel(8, 6, image::Rgb([i * 20, ci as u8 * 100, 255]));
                img.save(class_dir.join(format!("{i}.png"))).unwrap();
            }
        }
        let ds = load_image_folder(
            dir.path(),
            &ImageFolderOptions {
                resize: (12, 12),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(ds.class_names, vec!["apple", "moth", "zebra"]);
        assert!(ds.class_instances.iter().all(|m| m.len() == 10));
        assert_eq!(ds.spec.image_size, (12, 12, 3));
        assert!(ds.features.iter().all(|v| (0.0..=1.0).contains(v)));
        // blue channel was 255 everywhere
        assert!((ds.instance(0)[2] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_class_folder_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("empty")).unwrap();
        let err = load_image_folder(dir.path(), &ImageFolderOptions::default()).unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");
    }

    #[test]
    fn unreadable_image_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("a")).unwrap();
        std::fs::write(dir.path().join("a").join("x.png"), b"not a png").unwrap();
        let err = load_image_folder(dir.path(), &ImageFolderOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Image { .. }), "{err}");
    }

    #[test]
    fn tabular_is_z_scored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cells.csv");
        std::fs::write(&path, "g1,cell_type,g2\n1,b,10\n2,a,20\n3,b,30\n6,a,40\n").unwrap();
        let ds = load_tabular_csv(
            &path,
            &TabularOptions {
                label_column: "cell_type".into(),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(ds.spec.image_size, (1, 1, 2));
        assert_eq!(ds.class_names, vec!["a", "b"]);
        assert_eq!(ds.instance_class, vec![1, 0, 1, 0]);
        for col in 0..2 {
            let mean: f32 = (0..4).map(|r| ds.instance(r)[col]).sum::<f32>() / 4.0;
            assert!(mean.abs() < 1e-6);
        }
    }

    #[test]
    fn tabular_missing_label_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        let err = load_tabular_csv(&path, &TabularOptions::default()).unwrap_err();
        assert!(err.to_string().contains("label"), "{err}");
    }

    #[test]
    fn rescale_to_84() {
        let src = vec![0.5f32; 32 * 32 * 3];
        let out = resize_bilinear(&src, (32, 32, 3), (84, 84));
        assert_eq!(out.len(), 84 * 84 * 3);
        assert!(out.iter().all(|v| (v - 0.5).abs() < 1e-6));
    }
}
