//! Planted-boundary synthetic images, boundary recall, and directory-per-class
//! image corpora.
//!
//! A synthetic image is two flat regions split by one straight line through
//! the centres of a column (or row) of patches. The class is the position and
//! orientation of that line, so the patches it crosses are the only ones with
//! internal texture and serve as ground truth for boundary recall.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[C×S×S]`, values in `[0, 1]`.
    pub pixels: Tensor<f32>,
    pub label: usize,
    /// Ground-truth boundary patch ids; empty for real images.
    pub boundary: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub items: Vec<LabeledImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    /// A vertical line: left region versus right region.
    Vertical,
    /// A horizontal line: top region versus bottom region.
    Horizontal,
}

/// Where one class splits its image: through the centre of patch column (or
/// row) `index`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub orientation: Orientation,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryTask {
    /// Patches per side.
    pub grid: usize,
    pub patch_size: usize,
    pub num_classes: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Intensity of the left/top region.
    pub low: f64,
    /// Intensity of the right/bottom region.
    pub high: f64,
    pub seed: u64,
}

impl BoundaryTask {
    /// Four classes on a 4×4 grid of 8px patches.
    pub fn desk(noise: f64, seed: u64) -> Self {
        BoundaryTask {
            grid: 4,
            patch_size: 8,
            num_classes: 4,
            noise,
            low: 0.2,
            high: 0.8,
            seed,
        }
    }

    pub fn image_size(&self) -> usize {
        self.grid * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 || self.patch_size < 2 {
            return Err(Error::Config("boundary task needs grid ≥ 2 and patch_size ≥ 2".into()));
        }
        if self.num_classes < 1 || self.num_classes > 2 * self.grid {
            return Err(Error::Config(format!(
                "a {0}×{0} grid supports 1..={1} classes, got {2}",
                self.grid,
                2 * self.grid,
                self.num_classes
            )));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config(format!("noise must be non-negative, got {}", self.noise)));
        }
        if !(0.0..=1.0).contains(&self.low) || !(0.0..=1.0).contains(&self.high) || self.low == self.high {
            return Err(Error::Config("region intensities must be distinct values in [0, 1]".into()));
        }
        Ok(())
    }

    /// Class signatures alternate vertical and horizontal, interior lines
    /// first, so any class count up to `2·grid` stays distinct.
    pub fn signatures(&self) -> Vec<Signature> {
        let g = self.grid;
        let positions: Vec<usize> = (1..g - 1).chain([0, g - 1]).collect();
        (0..self.num_classes)
            .map(|c| Signature {
                orientation: if c % 2 == 0 {
                    Orientation::Vertical
                } else {
                    Orientation::Horizontal
                },
                index: positions[c / 2],
            })
            .collect()
    }

    /// Patches crossed by the class's split line, ascending.
    pub fn boundary_patches(&self, sig: Signature) -> Vec<usize> {
        let g = self.grid;
        match sig.orientation {
            Orientation::Vertical => (0..g).map(|r| r * g + sig.index).collect(),
            Orientation::Horizontal => (0..g).map(|c| sig.index * g + c).collect(),
        }
    }

    fn render(&self, sig: Signature) -> Vec<f64> {
        let s = self.image_size();
        let split = sig.index * self.patch_size + self.patch_size / 2;
        let mut px = Vec::with_capacity(s * s);
        for y in 0..s {
            for x in 0..s {
                let coord = match sig.orientation {
                    Orientation::Vertical => x,
                    Orientation::Horizontal => y,
                };
                px.push(if coord < split { self.low } else { self.high });
            }
        }
        px
    }
}

/// `n` single-channel images with balanced labels (`i mod num_classes`).
/// A pure function of `task` and `n`.
pub fn generate(task: &BoundaryTask, n: usize) -> Result<Dataset> {
    task.validate()?;
    if n == 0 {
        return Err(Error::invalid("generate", "need at least one image"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let noise = Normal::new(0.0, task.noise).map_err(|e| Error::Config(e.to_string()))?;
    let signatures = task.signatures();
    let templates: Vec<Vec<f64>> = signatures.iter().map(|&s| task.render(s)).collect();
    let s = task.image_size();
    let items = (0..n)
        .map(|i| {
            let label = i % task.num_classes;
            let pixels = templates[label]
                .iter()
                .map(|&v| {
                    let v = if task.noise > 0.0 { v + noise.sample(&mut rng) } else { v };
                    v.clamp(0.0, 1.0) as f32
                })
                .collect();
            Ok(LabeledImage {
                pixels: Tensor::new(&[1, s, s], pixels)?,
                label,
                boundary: task.boundary_patches(signatures[label]),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        class_names: signatures
            .iter()
            .map(|s| match s.orientation {
                Orientation::Vertical => format!("vertical{}", s.index),
                Orientation::Horizontal => format!("horizontal{}", s.index),
            })
            .collect(),
        items,
    })
}

/// `|kept ∩ truth| / |truth|`, or `None` without ground truth.
pub fn boundary_recall(kept: &[usize], truth: &[usize]) -> Option<f64> {
    if truth.is_empty() {
        return None;
    }
    let hits = truth.iter().filter(|t| kept.contains(t)).count();
    Some(hits as f64 / truth.len() as f64)
}

/// Expected recall of keeping `keep` patches uniformly at random out of
/// `n`, estimated over `trials` seeded draws.
pub fn random_recall_baseline(n: usize, truth: &[usize], keep: usize, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for _ in 0..trials {
        ids.shuffle(&mut rng);
        total += boundary_recall(&ids[..keep], truth).unwrap_or(0.0);
    }
    total / trials as f64
}

/// Stacks the chosen items into a `[B×C×S×S]` batch.
pub fn stack(items: &[LabeledImage], indices: &[usize]) -> Result<Tensor<f32>> {
    let first = items
        .get(*indices.first().ok_or_else(|| Error::invalid("stack", "empty batch"))?)
        .ok_or_else(|| Error::invalid("stack", "index out of range"))?;
    let dims = first.pixels.dims().to_vec();
    let mut data = Vec::with_capacity(indices.len() * first.pixels.numel());
    for &i in indices {
        let img = items.get(i).ok_or_else(|| Error::invalid("stack", "index out of range"))?;
        if img.pixels.dims() != dims.as_slice() {
            return Err(Error::shape("stack", "images differ in shape"));
        }
        data.extend_from_slice(img.pixels.data());
    }
    let mut out = vec![indices.len()];
    out.extend(dims);
    Tensor::new(&out, data)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Decodes one image file to `[C×S×S]` in `[0, 1]` with bilinear resizing.
pub fn load_image(path: &Path, image_size: usize, channels: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    image_to_tensor(&img, image_size, channels)
}

pub fn image_to_tensor(img: &DynamicImage, image_size: usize, channels: usize) -> Result<Tensor<f32>> {
    let s = image_size as u32;
    let resized = img.resize_exact(s, s, FilterType::Triangle);
    let plane = image_size * image_size;
    match channels {
        1 => {
            let g = resized.to_luma8();
            Tensor::new(&[1, image_size, image_size], g.pixels().map(|p| p.0[0] as f32 / 255.0).collect())
        }
        3 => {
            let rgb = resized.to_rgb8();
            let mut data = vec![0.0f32; 3 * plane];
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    data[c * plane + i] = p.0[c] as f32 / 255.0;
                }
            }
            Tensor::new(&[3, image_size, image_size], data)
        }
        other => Err(Error::Config(format!("images must have 1 or 3 channels, got {other}"))),
    }
}

/// Loads `root/<class>/<image>` with classes in lexicographic order.
/// Unreadable files are skipped with a warning; a class left with no images
/// is an error.
pub fn load_image_dir(root: &Path, image_size: usize, channels: usize) -> Result<Dataset> {
    let classes: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.is_empty() {
        return Err(Error::Data(format!("{} has no class directories", root.display())));
    }
    let mut class_names = Vec::with_capacity(classes.len());
    let mut items = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut count = 0;
        for file in sorted_entries(dir)?.into_iter().filter(|p| p.is_file()) {
            match load_image(&file, image_size, channels) {
                Ok(pixels) => {
                    items.push(LabeledImage {
                        pixels,
                        label,
                        boundary: Vec::new(),
                    });
                    count += 1;
                }
                Err(e) => log::warn!("skipping {}: {e}", file.display()),
            }
        }
        if count == 0 {
            return Err(Error::Data(format!("class {name} has no readable images")));
        }
        class_names.push(name);
    }
    Ok(Dataset { class_names, items })
}

/// Converts `[C×S×S]` pixels in `[0, 1]` to an 8-bit image.
pub fn tensor_to_image(pixels: &Tensor<f32>) -> Result<DynamicImage> {
    let &[c, h, w] = pixels.dims() else {
        return Err(Error::shape("tensor_to_image", format!("expected [C×H×W], got {}", pixels.shape())));
    };
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let plane = h * w;
    let d = pixels.data();
    match c {
        1 => Ok(DynamicImage::ImageLuma8(
            GrayImage::from_raw(w as u32, h as u32, d.iter().map(|&v| q(v)).collect()).expect("buffer size"),
        )),
        3 => {
            let data = (0..plane).flat_map(|i| (0..3).map(move |ch| q(d[ch * plane + i]))).collect();
            Ok(DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, data).expect("buffer size")))
        }
        other => Err(Error::Config(format!("images must have 1 or 3 channels, got {other}"))),
    }
}

/// Writes `root/<class>/<index>.png`, the layout [`load_image_dir`] reads.
pub fn export(dataset: &Dataset, root: &Path) -> Result<()> {
    for name in &dataset.class_names {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (i, item) in dataset.items.iter().enumerate() {
        let path = root.join(&dataset.class_names[item.label]).join(format!("{i:05}.png"));
        tensor_to_image(&item.pixels)?.save(&path).map_err(|source| Error::Image { path, source })?;
    }
    Ok(())
}
