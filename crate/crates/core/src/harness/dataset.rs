//! Labeled image collections: CIFAR-10 binary batches and synthetic gratings.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{ClabError, Result};
use crate::rng::RngStream;
use crate::tensor::ImageTensor;

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;
const CIFAR_PLANE: usize = CIFAR_SIDE * CIFAR_SIDE;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub channels: usize,
    /// Weight of uniform noise mixed into each pixel, in `[0, 1]`.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            per_class: 128,
            size: 16,
            channels: 1,
            noise: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SynthSpec),
    Cifar10 {
        path: PathBuf,
        /// Keep only the first `limit` records.
        limit: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub label_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic(SynthSpec::default()),
            label_fraction: 0.0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.label_fraction) {
            return Err(ClabError::Config(format!(
                "label fraction {} outside [0, 1]",
                self.label_fraction
            )));
        }
        if let DataSource::Synthetic(s) = &self.source {
            if s.classes < 2 || s.per_class == 0 || s.size == 0 {
                return Err(ClabError::Config(
                    "synthetic data needs >= 2 classes and non-empty images".into(),
                ));
            }
            if !matches!(s.channels, 1 | 3) {
                return Err(ClabError::Config(format!(
                    "{} channels; expected 1 or 3",
                    s.channels
                )));
            }
            if !(0.0..=1.0).contains(&s.noise) {
                return Err(ClabError::Config(format!(
                    "noise {} outside [0, 1]",
                    s.noise
                )));
            }
        }
        Ok(())
    }

    pub fn load(&self, seed: u64) -> Result<Dataset> {
        self.validate()?;
        match &self.source {
            DataSource::Synthetic(s) => Ok(synth_dataset(s, seed)),
            DataSource::Cifar10 { path, limit } => {
                let mut d = load_cifar10(path)?;
                if let Some(n) = limit {
                    d.truncate(*n);
                }
                Ok(d)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn new(images: Vec<ImageTensor>, labels: Vec<u32>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(ClabError::Shape(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(first) = images.first() {
            if let Some(i) = images.iter().position(|img| !img.same_shape(first)) {
                return Err(ClabError::Shape(format!(
                    "image {i} differs in shape from image 0"
                )));
            }
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Distinct label values.
    pub fn num_classes(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }

    pub fn image_size(&self) -> Option<(usize, usize, usize)> {
        self.images
            .first()
            .map(|i| (i.height(), i.width(), i.channels()))
    }

    pub fn truncate(&mut self, n: usize) {
        self.images.truncate(n);
        self.labels.truncate(n);
    }
}

/// Parses concatenated CIFAR-10 binary records.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(ClabError::format(
            "CIFAR-10",
            format!(
                "{} bytes is not a multiple of the {CIFAR_RECORD}-byte record",
                bytes.len()
            ),
        ));
    }
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(ClabError::format(
                "CIFAR-10",
                format!("record {i} has label byte {}", rec[0]),
            ));
        }
        let planes = &rec[1..];
        let mut data = Vec::with_capacity(3 * CIFAR_PLANE);
        for p in 0..CIFAR_PLANE {
            for c in 0..3 {
                data.push(f32::from(planes[c * CIFAR_PLANE + p]) / 255.0);
            }
        }
        images.push(ImageTensor::new(CIFAR_SIDE, CIFAR_SIDE, 3, data)?);
        labels.push(u32::from(rec[0]));
    }
    Dataset::new(images, labels)
}

pub fn load_cifar10(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| ClabError::io(path, e))?;
    parse_cifar10(&bytes)
}

/// Grating parameters for class `c`: orientations in `[0, π/2)` so a
/// horizontal flip never turns one class into another, cycled through two
/// spatial frequencies.
fn grating(c: usize, classes: usize) -> (f64, f64) {
    let orientations = classes.div_ceil(2);
    let theta = (c % orientations) as f64 * (PI / 2.0) / orientations as f64;
    let cycles = if c / orientations == 0 { 2.0 } else { 4.0 };
    (theta, cycles)
}

/// Class-balanced sinusoidal gratings with uniform pixel noise, class-major order.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Dataset {
    let mut rng = RngStream::new(seed).fork(0x5EED);
    let n = spec.size as f64;
    let mut images = Vec::with_capacity(spec.classes * spec.per_class);
    let mut labels = Vec::with_capacity(spec.classes * spec.per_class);
    for c in 0..spec.classes {
        let (theta, cycles) = grating(c, spec.classes);
        let (s, co) = theta.sin_cos();
        for _ in 0..spec.per_class {
            let img = ImageTensor::from_fn(spec.size, spec.size, spec.channels, |r, col, ch| {
                let u = (col as f64 * co + r as f64 * s) / n;
                // Colour channels get a fixed phase offset so RGB gratings are not grey.
                let g = 0.5 + 0.5 * (2.0 * PI * cycles * u + ch as f64 * 0.7).sin();
                let noise = if spec.noise > 0.0 { rng.uniform() } else { 0.0 };
                ((1.0 - spec.noise) * g + spec.noise * noise) as f32
            })
            .expect("synthetic dims are validated");
            images.push(img);
            labels.push(c as u32);
        }
    }
    Dataset { images, labels }
}

/// Marks the first `⌈f·n⌉` entries of a seeded shuffle as labeled. The
/// shuffle does not depend on `f`, so labeled sets nest as `f` grows.
pub fn label_split(n: usize, fraction: f64, rng: &mut RngStream) -> Vec<bool> {
    let perm = rng.permutation(n);
    // Guard against 0.3 * 10 = 3.0000000000000004 rounding up to 4.
    let count = ((fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n);
    let mut labeled = vec![false; n];
    for &i in &perm[..count] {
        labeled[i] = true;
    }
    labeled
}
