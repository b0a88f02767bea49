//! Procedural image classes for desk-scale experiments.
//!
//! Each class is a point in a pattern family's parameter space; instances
//! jitter those parameters and add pixel noise. Two families with unrelated
//! parameterizations give a source/target pair for cross-domain runs.

use std::f32::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSpec, Source};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticFamily {
    /// Oriented sinusoidal gratings over a two-colour palette plus a disc.
    Stripes,
    /// Three coloured Gaussian blobs on a tinted background.
    Blobs,
}

impl SyntheticFamily {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticFamily::Stripes => "stripes",
            SyntheticFamily::Blobs => "blobs",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOptions {
    pub n_classes: usize,
    pub per_class: usize,
    pub image_size: (usize, usize, usize),
    pub family: SyntheticFamily,
    /// Standard deviation of additive pixel noise.
    pub pixel_noise: f32,
    /// Multiplier on every per-instance parameter jitter.
    pub jitter: f32,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self {
            n_classes: 24,
            per_class: 40,
            image_size: (32, 32, 3),
            family: SyntheticFamily::Stripes,
            pixel_noise: 0.15,
            jitter: 1.0,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng, std: f32) -> f32 {
    if std <= 0.0 {
        return 0.0;
    }
    Normal::new(0.0, std).expect("positive std").sample(rng)
}

fn color(rng: &mut ChaCha8Rng, channels: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..channels).map(|_| rng.random_range(lo..hi)).collect()
}

struct StripeClass {
    angle: f32,
    freq: f32,
    fg: Vec<f32>,
    bg: Vec<f32>,
    disc: (f32, f32, f32),
    disc_color: Vec<f32>,
}

impl StripeClass {
    fn draw(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        Self {
            angle: rng.random_range(0.0..PI),
            freq: rng.random_range(1.5..5.0),
            fg: color(rng, channels, 0.0, 1.0),
            bg: color(rng, channels, 0.0, 1.0),
            disc: (
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.1..0.25),
            ),
            disc_color: color(rng, channels, 0.0, 1.0),
        }
    }

    fn render(&self, rng: &mut ChaCha8Rng, opts: &SyntheticOptions, out: &mut Vec<f32>) {
        let (h, w, c) = opts.image_size;
        let j = opts.jitter;
        let angle = self.angle + normal(rng, 0.2 * j);
        let freq = self.freq * normal(rng, 0.15 * j).exp();
        let phase = rng.random_range(0.0..2.0 * PI);
        let fg: Vec<f32> = self.fg.iter().map(|v| v + normal(rng, 0.08 * j)).collect();
        let bg: Vec<f32> = self.bg.iter().map(|v| v + normal(rng, 0.08 * j)).collect();
        let dc: Vec<f32> = self.disc_color.iter().map(|v| v + normal(rng, 0.08 * j)).collect();
        let cx = self.disc.0 + normal(rng, 0.06 * j);
        let cy = self.disc.1 + normal(rng, 0.06 * j);
        let r = self.disc.2 * normal(rng, 0.15 * j).exp();
        let gain = normal(rng, 0.1 * j).exp();
        let (ca, sa) = (angle.cos(), angle.sin());
        for y in 0..h {
            for x in 0..w {
                let u = (x as f32 + 0.5) / w as f32;
                let v = (y as f32 + 0.5) / h as f32;
                let s = (2.0 * PI * freq * ((u - 0.5) * ca + (v - 0.5) * sa) + phase).sin();
                let t = 0.5 * (s + 1.0);
                let in_disc = (u - cx).powi(2) + (v - cy).powi(2) < r * r;
                for ch in 0..c {
                    let base = if in_disc { dc[ch] } else { fg[ch] * t + bg[ch] * (1.0 - t) };
                    let px = base * gain + normal(rng, opts.pixel_noise);
                    out.push(px.clamp(0.0, 1.0));
                }
            }
        }
    }
}

struct BlobClass {
    blobs: Vec<(f32, f32, f32, Vec<f32>)>,
    background: Vec<f32>,
}

impl BlobClass {
    fn draw(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        let blobs = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.15..0.85),
                    rng.random_range(0.15..0.85),
                    rng.random_range(0.06..0.18),
                    color(rng, channels, 0.0, 1.0),
                )
            })
            .collect();
        Self {
            blobs,
            background: color(rng, channels, 0.0, 0.3),
        }
    }

    fn render(&self, rng: &mut ChaCha8Rng, opts: &SyntheticOptions, out: &mut Vec<f32>) {
        let (h, w, c) = opts.image_size;
        let j = opts.jitter;
        let blobs: Vec<_> = self
            .blobs
            .iter()
            .map(|(x, y, s, col)| {
                (
                    x + normal(rng, 0.05 * j),
                    y + normal(rng, 0.05 * j),
                    s * normal(rng, 0.15 * j).exp(),
                    col.iter().map(|v| v + normal(rng, 0.08 * j)).collect::<Vec<_>>(),
                )
            })
            .collect();
        let bg: Vec<f32> = self.background.iter().map(|v| v + normal(rng, 0.05 * j)).collect();
        for y in 0..h {
            for x in 0..w {
                let u = (x as f32 + 0.5) / w as f32;
                let v = (y as f32 + 0.5) / h as f32;
                let weights: Vec<f32> = blobs
                    .iter()
                    .map(|(bx, by, s, _)| (-((u - bx).powi(2) + (v - by).powi(2)) / (2.0 * s * s)).exp())
                    .collect();
                for ch in 0..c {
                    let mut px = bg[ch];
                    for (wt, (_, _, _, col)) in weights.iter().zip(&blobs) {
                        px += wt * col[ch];
                    }
                    px += normal(rng, opts.pixel_noise);
                    out.push(px.clamp(0.0, 1.0));
                }
            }
        }
    }
}

enum Pattern {
    Stripes(StripeClass),
    Blobs(BlobClass),
}

/// Generates `n_classes * per_class` instances. Every class starts in the
/// meta-train list; apply [`split_classes`](super::split_classes) to carve
/// out meta-test classes.
pub fn generate_synthetic(opts: &SyntheticOptions, seed: u64) -> Result<Dataset> {
    if opts.n_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic dataset needs at least 2 classes, got {}",
            opts.n_classes
        )));
    }
    let (h, w, c) = opts.image_size;
    if h == 0 || w == 0 || c == 0 || opts.per_class == 0 {
        return Err(Error::InvalidArgument(format!(
            "empty synthetic dataset: image {:?}, {} per class",
            opts.image_size, opts.per_class
        )));
    }
    let family_tag = opts.family as u64;
    let mut features = Vec::with_capacity(opts.n_classes * opts.per_class * h * w * c);
    let mut instance_class = Vec::with_capacity(opts.n_classes * opts.per_class);
    for class in 0..opts.n_classes {
        let mut class_rng = rng::rng_for(seed, &[rng::TAG_SYNTH, family_tag, class as u64]);
        let pattern = match opts.family {
            SyntheticFamily::Stripes => Pattern::Stripes(StripeClass::draw(&mut class_rng, c)),
            SyntheticFamily::Blobs => Pattern::Blobs(BlobClass::draw(&mut class_rng, c)),
        };
        for i in 0..opts.per_class {
            let mut inst_rng = rng::rng_for(seed, &[rng::TAG_SYNTH, family_tag, class as u64, 1 + i as u64]);
            match &pattern {
                Pattern::Stripes(p) => p.render(&mut inst_rng, opts, &mut features),
                Pattern::Blobs(p) => p.render(&mut inst_rng, opts, &mut features),
            }
            instance_class.push(class);
        }
    }
    let spec = DatasetSpec {
        name: format!("synthetic-{}", opts.family.name()),
        source: Source::Synthetic,
        image_size: opts.image_size,
        meta_train_classes: (0..opts.n_classes).collect(),
        meta_test_classes: Vec::new(),
    };
    let names = (0..opts.n_classes)
        .map(|i| format!("{}-{i:03}", opts.family.name()))
        .collect();
    Dataset::new(spec, names, features, instance_class)
}
