//! Synthetic image tasks and the CIFAR-10 binary record format.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Labeled images with pixels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// N × C × H × W
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
        provenance: String,
    ) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Contract(format!("images must be N×C×H×W, got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Contract(format!("{} images but {} labels", images.shape()[0], labels.len())));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Contract(format!("label {l} outside {num_classes} classes")));
        }
        if !images.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Contract("pixels must lie in [0, 1]".into()));
        }
        Ok(Self { images, labels, num_classes, split, provenance })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// C, H, W of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Images at `indices`, converted to `T`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let x = self.images.select_rows(indices).cast();
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            provenance: format!("{} (subset of {})", self.provenance, indices.len()),
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Mirrors each image row of a single N×C×H×W example in place.
pub fn flip_horizontal<T: Copy>(image: &mut [T], width: usize) {
    for row in image.chunks_mut(width) {
        row.reverse();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// A bright gaussian spot at a class-specific position.
    Blobs,
    /// Sinusoidal stripes at a class-specific orientation.
    Stripes,
    /// Checkerboards with a class-specific cell size.
    Checker,
}

fn default_amplitude() -> f64 {
    0.6
}

fn default_background() -> f64 {
    0.2
}

/// Parameters of a synthetic task. Both splits share the class patterns and
/// draw their pixel noise from disjoint streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub classes: usize,
    /// C, H, W
    pub size: [usize; 3],
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise_std: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default = "default_background")]
    pub background: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Contract(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.size.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!("invalid image size {:?}", self.size)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Contract(format!("noise_std must be a nonnegative number, got {}", self.noise_std)));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Contract("per-class counts must be positive".into()));
        }
        Ok(())
    }

    pub fn generate(&self, split: Split) -> Result<Dataset> {
        let n = match split {
            Split::Train => self.train_per_class,
            Split::Test => self.test_per_class,
        };
        synth_generate_with(self, n, split)
    }
}

/// Noise-free pattern of each class, H × W.
fn class_patterns(spec: &SynthSpec) -> Vec<Vec<f64>> {
    let [_, h, w] = spec.size;
    let mut rng = seed::stream(&[spec.seed, seed::purpose::DATA_PATTERN]);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (a, bg) = (spec.amplitude, spec.background);
    (0..spec.classes)
        .map(|k| {
            let angle = phase + std::f64::consts::TAU * k as f64 / spec.classes as f64;
            let mut img = vec![0.0; h * w];
            match spec.kind {
                SynthKind::Blobs => {
                    let (cy, cx) = (
                        (h as f64 - 1.0) / 2.0 + h as f64 / 4.0 * angle.sin(),
                        (w as f64 - 1.0) / 2.0 + w as f64 / 4.0 * angle.cos(),
                    );
                    let sigma = h.min(w) as f64 / 8.0;
                    for y in 0..h {
                        for x in 0..w {
                            let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            img[y * w + x] = bg + a * (-r2 / (2.0 * sigma * sigma)).exp();
                        }
                    }
                }
                SynthKind::Stripes => {
                    let theta = std::f64::consts::PI * k as f64 / spec.classes as f64;
                    let freq = std::f64::consts::TAU * 2.0 / h.max(w) as f64;
                    for y in 0..h {
                        for x in 0..w {
                            let t = x as f64 * theta.cos() + y as f64 * theta.sin();
                            img[y * w + x] = 0.5 + 0.5 * a * (freq * t).sin();
                        }
                    }
                }
                SynthKind::Checker => {
                    let cell = k + 1;
                    for y in 0..h {
                        for x in 0..w {
                            let on = ((y / cell) + (x / cell)) % 2 == 0;
                            img[y * w + x] = if on { 0.5 + 0.5 * a } else { 0.5 - 0.5 * a };
                        }
                    }
                }
            }
            img
        })
        .collect()
}

fn synth_generate_with(spec: &SynthSpec, n_per_class: usize, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let [c, h, w] = spec.size;
    let patterns = class_patterns(spec);
    let stream = match split {
        Split::Train => seed::purpose::DATA_TRAIN,
        Split::Test => seed::purpose::DATA_TEST,
    };
    let mut rng = seed::stream(&[spec.seed, stream]);
    let n = n_per_class * spec.classes;
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % spec.classes;
        labels.push(k);
        for _ in 0..c {
            for &p in &patterns[k] {
                let z: f64 = if spec.noise_std > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                data.push((p + spec.noise_std * z).clamp(0.0, 1.0) as f32);
            }
        }
    }
    let images = Tensor::new(vec![n, c, h, w], data)?;
    let provenance = format!("synth:{:?}:seed={}", spec.kind, spec.seed).to_lowercase();
    Dataset::new(images, labels, spec.classes, split, provenance)
}

/// One split of a synthetic task with default amplitude and background.
pub fn synth_generate(
    kind: SynthKind,
    classes: usize,
    size: [usize; 3],
    n_per_class: usize,
    noise_std: f64,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    let spec = SynthSpec {
        kind,
        classes,
        size,
        train_per_class: n_per_class,
        test_per_class: n_per_class,
        noise_std,
        amplitude: default_amplitude(),
        background: default_background(),
        seed,
    };
    spec.generate(split)
}

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;

/// Parses CIFAR-10 binary batches: `[label][R plane][G plane][B plane]` per 32×32 record.
pub fn read_cifar10_binary<P: AsRef<Path>>(paths: &[P], split: Split) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let bytes = fs::read(p)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            let offset = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
            return Err(Error::Format(format!(
                "{}: truncated record at offset {offset} (file length {} is not a multiple of {CIFAR_RECORD})",
                p.display(),
                bytes.len()
            )));
        }
        for (r, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
            if rec[0] > 9 {
                return Err(Error::Format(format!(
                    "{}: label {} > 9 at offset {}",
                    p.display(),
                    rec[0],
                    r * CIFAR_RECORD
                )));
            }
            labels.push(rec[0] as usize);
            data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(Error::Format("no CIFAR-10 records found".into()));
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], data)?;
    let provenance = paths.iter().map(|p| p.as_ref().display().to_string()).collect::<Vec<_>>().join(",");
    Dataset::new(images, labels, 10, split, format!("cifar10:{provenance}"))
}

/// Inverse of [`read_cifar10_binary`] for 3×32×32 datasets with at most 10 classes.
pub fn write_cifar10_binary(ds: &Dataset, path: &Path) -> Result<()> {
    if ds.image_shape() != [3, 32, 32] || ds.num_classes > 10 {
        return Err(Error::Format(format!(
            "records need 3×32×32 images and ≤ 10 classes, got {:?} with {}",
            ds.image_shape(),
            ds.num_classes
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (i, &l) in ds.labels.iter().enumerate() {
        out.push(l as u8);
        out.extend(ds.images.row(i).iter().map(|&v| (v * 255.0).round() as u8));
    }
    debug_assert_eq!(out.len(), ds.len() * (CIFAR_PIXELS + 1));
    fs::write(path, out)?;
    Ok(())
}
