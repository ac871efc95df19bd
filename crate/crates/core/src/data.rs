//! Dataset ingestion and the synthetic small-image benchmark.
//!
//! Synthetic images carry two class signals: a colored disc whose color is
//! jittered around a class palette entry (large amplitude, only partly
//! separable), and a fixed per-class ±1 texture added at a few gray levels
//! (tiny amplitude, perfectly separable). Clean training leans on the
//! texture, which an ε-bounded adversary can rewrite.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batch::{ImageBatch, ImageShape};
use crate::error::{Error, Result};

pub const CIFAR_LABELS: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

/// Labeled images with values on the 1/255 grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: ImageBatch<f32>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(images: ImageBatch<f32>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if labels.len() != images.len() {
            return Err(Error::Dataset(format!("{} labels for {} images", labels.len(), images.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: class_names.len(),
            });
        }
        Ok(Self {
            images,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Seeded shuffle, then the first `floor(n * fraction)` examples go to
    /// the first split.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Dataset(format!("split fraction {fraction} outside [0, 1]")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = (self.len() as f64 * fraction).floor() as usize;
        let (a, b) = idx.split_at(cut);
        if a.is_empty() || b.is_empty() {
            return Err(Error::Dataset(format!("split {fraction} of {} leaves an empty side", self.len())));
        }
        Ok((self.select(a), self.select(b)))
    }

    /// First `n` examples after a seeded shuffle.
    pub fn subset(&self, n: usize, seed: u64) -> Self {
        if n >= self.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        self.select(&idx)
    }
}

/// Generator settings for the synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    /// Texture amplitude in 1/255 units.
    pub texture_levels: f64,
    /// Side of the repeating texture tile; 0 draws one untiled pattern.
    pub texture_period: usize,
    /// Std of the per-image disc color jitter.
    pub color_jitter: f64,
    /// Probability that the disc carries its class color; other images get
    /// the palette color of a random other class.
    pub color_fraction: f64,
    /// Std of per-pixel Gaussian noise.
    pub pixel_noise: f64,
    /// Seed of the class palette and textures (shared by every split).
    pub class_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            channels: 3,
            size: 16,
            texture_levels: 3.0,
            texture_period: 4,
            color_jitter: 0.04,
            color_fraction: 0.86,
            pixel_noise: 0.02,
            class_seed: 1234,
        }
    }
}

impl SyntheticSpec {
    pub fn shape(&self) -> ImageShape {
        ImageShape::new(self.channels, self.size, self.size)
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes)
            .map(|k| match CIFAR_LABELS.get(k) {
                Some(name) => (*name).to_string(),
                None => format!("class{k}"),
            })
            .collect()
    }

    fn palette(&self) -> Vec<Vec<f64>> {
        (0..self.classes)
            .map(|k| {
                let hue = k as f64 / self.classes as f64;
                (0..self.channels)
                    .map(|c| {
                        let phase = hue + c as f64 / self.channels.max(1) as f64;
                        0.5 + 0.3 * (2.0 * std::f64::consts::PI * phase).cos()
                    })
                    .collect()
            })
            .collect()
    }

    fn textures(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.class_seed);
        let s = self.size;
        let p = if self.texture_period == 0 { s } else { self.texture_period.min(s) };
        (0..self.classes)
            .map(|_| {
                let tile: Vec<f64> = (0..self.channels * p * p)
                    .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                    .collect();
                let mut full = Vec::with_capacity(self.shape().numel());
                for c in 0..self.channels {
                    for y in 0..s {
                        for x in 0..s {
                            full.push(tile[(c * p + y % p) * p + x % p]);
                        }
                    }
                }
                full
            })
            .collect()
    }

    /// `n` images with labels cycling through the classes, then shuffled.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        if self.classes < 2 || self.channels == 0 || self.size < 4 || n == 0 {
            return Err(Error::Dataset(format!(
                "synthetic spec needs >= 2 classes, >= 1 channel, size >= 4 and n > 0 (got {self:?}, n = {n})"
            )));
        }
        let palette = self.palette();
        let textures = self.textures();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.classes).collect();
        labels.shuffle(&mut rng);
        let jitter = Normal::new(0.0, self.color_jitter.max(0.0)).unwrap();
        let noise = Normal::new(0.0, self.pixel_noise.max(0.0)).unwrap();
        let s = self.size;
        let tex_amp = self.texture_levels / 255.0;
        let mut data = Vec::with_capacity(n * self.shape().numel());
        for &label in &labels {
            let background: Vec<f64> = (0..self.channels).map(|_| rng.random_range(0.3..0.7)).collect();
            let slope = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
            let radius = rng.random_range(0.25..0.4) * s as f64;
            let cy = rng.random_range(radius..s as f64 - radius);
            let cx = rng.random_range(radius..s as f64 - radius);
            let color: Vec<f64> = if rng.random::<f64>() < self.color_fraction {
                palette[label].iter().map(|v| v + jitter.sample(&mut rng)).collect()
            } else {
                let other = (label + rng.random_range(1..self.classes)) % self.classes;
                palette[other].iter().map(|v| v + jitter.sample(&mut rng)).collect()
            };
            for c in 0..self.channels {
                for y in 0..s {
                    for x in 0..s {
                        let fy = y as f64 + 0.5;
                        let fx = x as f64 + 0.5;
                        let inside = (fy - cy).powi(2) + (fx - cx).powi(2) <= radius * radius;
                        let base = if inside {
                            color[c]
                        } else {
                            background[c] + slope.0 * (fy / s as f64 - 0.5) + slope.1 * (fx / s as f64 - 0.5)
                        };
                        let idx = (c * s + y) * s + x;
                        let v = base + tex_amp * textures[label][idx] + noise.sample(&mut rng);
                        data.push(quantize(v));
                    }
                }
            }
        }
        Dataset::new(ImageBatch::new(self.shape(), data)?, labels, self.class_names())
    }
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    /// The packaged benchmark: default synthetic generator settings.
    BuiltinSmallImages,
    Synthetic(SyntheticSpec),
    /// One subdirectory per class holding 8-bit PNG images; class order is
    /// the sorted directory names.
    DirectoryOfImages { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// Number of generated images (ignored for directories).
    pub count: usize,
    pub seed: u64,
    /// Fraction of examples in the training split.
    pub train_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: DataSource::BuiltinSmallImages,
            count: 2500,
            seed: 0,
            train_fraction: 0.8,
        }
    }
}

/// Training and evaluation splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub eval: Dataset,
}

/// Load or generate the dataset described by `spec` and split it.
pub fn ingest(spec: &DatasetSpec) -> Result<Splits> {
    let full = match &spec.source {
        DataSource::BuiltinSmallImages => SyntheticSpec::default().generate(spec.count, spec.seed)?,
        DataSource::Synthetic(s) => s.generate(spec.count, spec.seed)?,
        DataSource::DirectoryOfImages { path } => load_directory(path)?,
    };
    let (train, eval) = full.split(spec.train_fraction, spec.seed ^ 0x5eed)?;
    Ok(Splits { train, eval })
}

fn load_directory(root: &Path) -> Result<Dataset> {
    let mut classes: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Dataset(format!("{} has no class subdirectories", root.display())));
    }
    let mut shape: Option<ImageShape> = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let pixels = decode_image(&file)?;
            match shape {
                None => shape = Some(pixels.0),
                Some(s) if s != pixels.0 => {
                    return Err(Error::Image {
                        path: file,
                        reason: format!("shape {:?} differs from {:?}", pixels.0, s),
                    })
                }
                _ => {}
            }
            data.extend(pixels.1);
            labels.push(label);
        }
    }
    let shape = shape.ok_or_else(|| Error::Dataset(format!("no images under {}", root.display())))?;
    let names = classes
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    Dataset::new(ImageBatch::new(shape, data)?, labels, names)
}

/// Decode an 8-bit image into channel-major `[0, 1]` values. Higher bit
/// depths are rejected rather than rescaled.
pub fn decode_image(path: &Path) -> Result<(ImageShape, Vec<f32>)> {
    use image::DynamicImage;
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (channels, raw, w, h) = match &img {
        DynamicImage::ImageLuma8(b) => (1, b.as_raw().clone(), b.width(), b.height()),
        DynamicImage::ImageRgb8(b) => (3, b.as_raw().clone(), b.width(), b.height()),
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgba8(_) => {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            (3, rgb.into_raw(), w, h)
        }
        other => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                reason: format!("unsupported pixel format {:?}; only 8-bit images are accepted", other.color()),
            })
        }
    };
    let (w, h) = (w as usize, h as usize);
    let mut out = vec![0.0f32; channels * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                out[(c * h + y) * w + x] = raw[(y * w + x) * channels + c] as f32 / 255.0;
            }
        }
    }
    Ok((ImageShape::new(channels, h, w), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_reproducible_and_on_grid() {
        let spec = SyntheticSpec::default();
        let a = spec.generate(64, 9).unwrap();
        let b = spec.generate(64, 9).unwrap();
        assert_eq!(a, b);
        for v in a.images.data() {
            let q = v * 255.0;
            assert!((q - q.round()).abs() < 1e-3);
            assert!((0.0..=1.0).contains(v));
        }
        assert!(a.labels.iter().all(|&l| l < 10));
        assert_ne!(a, spec.generate(64, 10).unwrap());
    }

    #[test]
    fn split_is_exact() {
        let d = SyntheticSpec::default().generate(100, 1).unwrap();
        let (a, b) = d.split(0.8, 3).unwrap();
        assert_eq!((a.len(), b.len()), (80, 20));
        assert_eq!(d.split(0.8, 3).unwrap().0, a);
        assert!(d.split(1.0, 3).is_err());
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let d = SyntheticSpec::default().generate(4, 1).unwrap();
        assert!(matches!(
            Dataset::new(d.images.clone(), vec![0, 1, 2, 10], d.class_names.clone()),
            Err(Error::LabelOutOfRange { label: 10, .. })
        ));
    }

    #[test]
    fn directory_ingest_reads_classes_and_rejects_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        for (name, value) in [("a", 10u8), ("b", 200u8)] {
            let cls = dir.path().join(name);
            std::fs::create_dir(&cls).unwrap();
            for i in 0..2 {
                let img = image::RgbImage::from_pixel(4, 4, image::Rgb([value, i, 0]));
                img.save(cls.join(format!("{i}.png"))).unwrap();
            }
        }
        let spec = DatasetSpec {
            source: DataSource::DirectoryOfImages { path: dir.path().to_path_buf() },
            count: 0,
            seed: 0,
            train_fraction: 0.5,
        };
        let splits = ingest(&spec).unwrap();
        assert_eq!(splits.train.len() + splits.eval.len(), 4);
        assert_eq!(splits.train.class_names, ["a", "b"]);
        assert_eq!(splits.train.images.shape(), ImageShape::new(3, 4, 4));

        let deep = dir.path().join("b").join("deep.png");
        image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::from_pixel(4, 4, image::Rgb([1000, 0, 0]))
            .save(&deep)
            .unwrap();
        assert!(matches!(ingest(&spec), Err(Error::Image { .. })));
    }
}
