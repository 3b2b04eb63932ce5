//! Synthetic labelled images and their on-disk form.
//!
//! Each class is a coloured shape (its own pattern and hue) pasted on a noisy
//! grey background. Difficulty controls object size, contrast and noise.
//!
//! Image files use a raw container: magic `TSLBIMG1`, u32 width, u32 height,
//! u32 channels (little-endian), then `channels * height * width` bytes in
//! channel-major order. `manifest.csv` lists `file,label,split,difficulty`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tslab_autodiff::Tensor;
use tslab_core::data::Sample;
use tslab_core::{CoreError, Result};

const IMG_MAGIC: &[u8; 8] = b"TSLBIMG1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Holdout,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Holdout => "holdout",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub file: String,
    pub label: usize,
    pub split: Split,
    pub difficulty: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    #[serde(default = "three")]
    pub channels: usize,
    pub seed: u64,
}

fn three() -> usize {
    3
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { classes: 10, per_class: 200, image_size: 32, channels: 3, seed: 0 }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(CoreError::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.classes > 10 {
            return Err(CoreError::Config(format!("at most 10 class patterns exist, got {}", self.classes)));
        }
        if self.image_size < 8 || self.channels != 3 || self.per_class == 0 {
            return Err(CoreError::Config(format!(
                "invalid geometry: {}x{} with {} channels, {} per class",
                self.image_size, self.image_size, self.channels, self.per_class
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub records: Vec<Record>,
}

/// A generated image held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: u64,
    pub record: Record,
    pub pixels: Vec<u8>,
}

impl Item {
    pub fn sample(&self, size: usize, channels: usize) -> Sample {
        Sample { id: self.id, label: self.record.label, image: to_tensor(&self.pixels, size, channels) }
    }
}

pub fn to_tensor(pixels: &[u8], size: usize, channels: usize) -> Tensor<f32> {
    Tensor::new(vec![channels, size, size], pixels.iter().map(|&p| p as f32 / 255.0).collect())
        .expect("pixel count matches geometry")
}

fn hue(h: f64) -> [f64; 3] {
    let k = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [k(5.0), k(3.0), k(1.0)]
}

/// Class pattern on local coordinates in `[-1, 1]^2`.
fn pattern(class: usize, u: f64, v: f64) -> bool {
    use std::f64::consts::PI;
    let r = (u * u + v * v).sqrt();
    match class {
        0 => true,
        1 => r <= 1.0,
        2 => (0.5..=1.0).contains(&r),
        3 => (3.0 * PI * v).sin() > 0.0,
        4 => (3.0 * PI * u).sin() > 0.0,
        5 => u.abs() < 0.3 || v.abs() < 0.3,
        6 => (2.2 * PI * (u + v)).sin() > 0.0,
        7 => (2.0 * PI * u).sin() * (2.0 * PI * v).sin() > 0.0,
        8 => v >= 2.0 * u.abs() - 1.0,
        _ => u.abs() + v.abs() <= 1.0,
    }
}

fn render(class: usize, classes: usize, difficulty: u8, size: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (obj_lo, obj_hi, contrast, sigma) = match difficulty {
        0 => (0.44, 0.56, 0.45, 0.03),
        1 => (0.31, 0.41, 0.32, 0.05),
        _ => (0.22, 0.28, 0.22, 0.07),
    };
    let s = ((size as f64 * rng.random_range(obj_lo..obj_hi)).round() as usize).clamp(3, size);
    let ox = rng.random_range(0..=size - s);
    let oy = rng.random_range(0..=size - s);
    let color = hue(class as f64 / classes as f64);
    let base = rng.random_range(0.38..0.55);
    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    let mut px = vec![0u8; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let inside = x >= ox && x < ox + s && y >= oy && y < oy + s && {
                let u = 2.0 * ((x - ox) as f64 + 0.5) / s as f64 - 1.0;
                let v = 2.0 * ((y - oy) as f64 + 0.5) / s as f64 - 1.0;
                pattern(class, u, v)
            };
            for c in 0..3 {
                let mut val = base + noise.sample(rng);
                if inside {
                    val += contrast * (2.0 * color[c] - 1.0);
                }
                px[(c * size + y) * size + x] = (val.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    px
}

/// Deterministic in-memory generation. Per class, a seeded shuffle assigns
/// 70% train, 10% holdout and 20% test; difficulty cycles over three levels.
pub fn synthesize(spec: &DatasetSpec) -> Result<(Manifest, Vec<Item>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_train = spec.per_class * 7 / 10;
    let n_hold = spec.per_class / 10;
    let mut items = Vec::with_capacity(spec.classes * spec.per_class);
    for class in 0..spec.classes {
        let mut slots: Vec<usize> = (0..spec.per_class).collect();
        slots.shuffle(&mut rng);
        for (k, &slot) in slots.iter().enumerate() {
            let split = if slot < n_train {
                Split::Train
            } else if slot < n_train + n_hold {
                Split::Holdout
            } else {
                Split::Test
            };
            let difficulty = (k % 3) as u8;
            let id = items.len() as u64;
            let pixels = render(class, spec.classes, difficulty, spec.image_size, &mut rng);
            items.push(Item {
                id,
                record: Record { file: format!("images/{id:06}.img"), label: class, split, difficulty },
                pixels,
            });
        }
    }
    let manifest = Manifest {
        classes: spec.classes,
        image_size: spec.image_size,
        channels: spec.channels,
        records: items.iter().map(|i| i.record.clone()).collect(),
    };
    Ok((manifest, items))
}

pub fn write_image(path: &Path, size: usize, channels: usize, pixels: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + pixels.len());
    buf.extend_from_slice(IMG_MAGIC);
    for v in [size as u32, size as u32, channels as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(pixels);
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let buf = fs::read(path)?;
    if buf.len() < 20 || &buf[..8] != IMG_MAGIC {
        return Err(CoreError::Format(format!("{} is not an image container", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes([buf[i], buf[i + 1], buf[i + 2], buf[i + 3]]) as usize;
    let (w, h, c) = (word(8), word(12), word(16));
    if w != h || buf.len() != 20 + w * h * c {
        return Err(CoreError::Format(format!("{}: {}x{}x{} does not match {} bytes", path.display(), w, h, c, buf.len())));
    }
    Ok((w, c, buf[20..].to_vec()))
}

/// Writes images and `manifest.csv` under `dir`.
pub fn gen_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Manifest> {
    let (manifest, items) = synthesize(spec)?;
    fs::create_dir_all(dir.join("images"))?;
    for item in &items {
        write_image(&dir.join(&item.record.file), spec.image_size, spec.channels, &item.pixels)?;
    }
    write_manifest(&manifest, &dir.join("manifest.csv"))?;
    let meta = serde_json::to_string_pretty(spec).map_err(|e| CoreError::Format(e.to_string()))?;
    fs::write(dir.join("dataset.json"), meta)?;
    Ok(manifest)
}

pub fn write_manifest(m: &Manifest, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &m.records {
        w.serialize(r).map_err(|e| CoreError::Format(e.to_string()))?;
    }
    let mut bytes = w.into_inner().map_err(|e| CoreError::Format(e.to_string()))?;
    let mut out = fs::File::create(path)?;
    out.write_all(&mut bytes)?;
    Ok(())
}

/// Reads `manifest.csv` from `dir`; geometry comes from the first image.
pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.csv");
    if !path.exists() {
        return Err(CoreError::Config(format!("dataset manifest {} does not exist", path.display())));
    }
    let mut rd = csv::Reader::from_path(&path).map_err(|e| CoreError::Format(e.to_string()))?;
    let records: Vec<Record> = rd
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))?;
    let first = records.first().ok_or_else(|| CoreError::EmptyDataset(path.display().to_string()))?;
    let (size, channels, _) = read_image(&dir.join(&first.file))?;
    let classes = records.iter().map(|r| r.label).max().unwrap_or(0) + 1;
    Ok(Manifest { classes, image_size: size, channels, records })
}

/// Loads the samples of one split; ids are manifest row indices.
pub fn load_split(dir: &Path, m: &Manifest, split: Split) -> Result<Vec<Sample>> {
    m.records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == split)
        .map(|(i, r)| {
            let (size, channels, px) = read_image(&PathBuf::from(dir).join(&r.file))?;
            if size != m.image_size || channels != m.channels {
                return Err(CoreError::Format(format!("{} has a different geometry", r.file)));
            }
            Ok(Sample { id: i as u64, label: r.label, image: to_tensor(&px, size, channels) })
        })
        .collect()
}

/// In-memory counterpart of [`load_split`].
pub fn split_samples(items: &[Item], split: Split, size: usize) -> Vec<Sample> {
    items.iter().filter(|i| i.record.split == split).map(|i| i.sample(size, 3)).collect()
}
