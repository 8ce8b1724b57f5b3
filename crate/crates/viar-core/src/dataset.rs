//! Procedural class-conditional images and tokenizer fitting.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;
use crate::tensor::Tensor;
use crate::tokenizer::{build_codebook, interp_to_scale, PatchCodec, ScaleHierarchy, Tokenizer};

pub const CLASS_NAMES: [&str; 4] = ["bars", "disc", "cross", "ring"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub per_class: usize,
    pub classes: usize,
    /// Image side in pixels.
    pub size: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            per_class: 256,
            classes: 2,
            size: 16,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=CLASS_NAMES.len()).contains(&self.classes) {
            return Err(Error::Config(format!(
                "dataset.classes must be in 2..={}",
                CLASS_NAMES.len()
            )));
        }
        if self.size < 8 || self.per_class == 0 {
            return Err(Error::Config("dataset.size ≥ 8 and dataset.per_class ≥ 1 required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: usize,
}

/// Draws one image of `class`.
///
/// Bars are bright and thick, discs small and dim, so the two base classes
/// differ in mean intensity by construction.
pub fn draw(class: usize, size: usize, rng: &mut impl Rng) -> Image {
    let s = size as f64;
    let mut img = Image::zeros(size, size, 1);
    match class {
        0 => {
            let vertical = rng.gen_bool(0.5);
            let bars = 2;
            let thick = (s * 0.19).round() as usize;
            let level = rng.gen_range(0.85..1.0);
            let gap = size / bars;
            let jitter = rng.gen_range(0..=gap.saturating_sub(thick));
            for b in 0..bars {
                let start = b * gap + jitter;
                for i in start..(start + thick).min(size) {
                    for j in 0..size {
                        let (y, x) = if vertical { (j, i) } else { (i, j) };
                        img.set(y, x, 0, level);
                    }
                }
            }
        }
        1 => {
            let r = rng.gen_range(0.13..0.2) * s;
            let cy = rng.gen_range(r..s - r);
            let cx = rng.gen_range(r..s - r);
            let level = rng.gen_range(0.4..0.6);
            paint(&mut img, |y, x| (y - cy).hypot(x - cx) <= r, level);
        }
        2 => {
            let w = (s * 0.12).max(1.0);
            let cy = rng.gen_range(0.3..0.7) * s;
            let cx = rng.gen_range(0.3..0.7) * s;
            let level = rng.gen_range(0.6..0.8);
            paint(&mut img, |y, x| (y - cy).abs() < w || (x - cx).abs() < w, level);
        }
        _ => {
            let r = rng.gen_range(0.25..0.35) * s;
            let cy = rng.gen_range(0.4..0.6) * s;
            let cx = rng.gen_range(0.4..0.6) * s;
            let level = rng.gen_range(0.7..0.9);
            paint(&mut img, |y, x| ((y - cy).hypot(x - cx) - r).abs() < 1.0, level);
        }
    }
    img
}

fn paint(img: &mut Image, inside: impl Fn(f64, f64) -> bool, level: f64) {
    for y in 0..img.height() {
        for x in 0..img.width() {
            if inside(y as f64 + 0.5, x as f64 + 0.5) {
                img.set(y, x, 0, level);
            }
        }
    }
}

/// `per_class` images of every class, interleaved by class.
pub fn generate(cfg: &DatasetConfig) -> Result<Vec<LabeledImage>> {
    cfg.validate()?;
    let mut r = rng::substream(cfg.seed, "dataset");
    let mut out = Vec::with_capacity(cfg.per_class * cfg.classes);
    for _ in 0..cfg.per_class {
        for c in 0..cfg.classes {
            out.push(LabeledImage {
                image: draw(c, cfg.size, &mut r),
                label: c,
            });
        }
    }
    Ok(out)
}

/// Mean pixel value of each class.
pub fn class_means(data: &[LabeledImage], classes: usize) -> Vec<f64> {
    let mut sum = vec![0.0; classes];
    let mut n = vec![0usize; classes];
    for d in data {
        sum[d.label] += d.image.mean();
        n[d.label] += 1;
    }
    sum.iter().zip(&n).map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 }).collect()
}

/// Index of the nearest class mean to `image`'s pixel mean.
pub fn nearest_centroid(image: &Image, centroids: &[f64]) -> usize {
    let m = image.mean();
    let mut best = 0;
    for (i, c) in centroids.iter().enumerate() {
        if (m - c).abs() < (m - centroids[best]).abs() {
            best = i;
        }
    }
    best
}

#[derive(Serialize, Deserialize)]
struct LabelEntry {
    file: String,
    label: usize,
}

/// Writes `img_NNNNN.viarim` files and `labels.json`.
pub fn write_dir(dir: &Path, data: &[LabeledImage]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut labels = Vec::with_capacity(data.len());
    for (i, d) in data.iter().enumerate() {
        let file = format!("img_{i:05}.viarim");
        d.image.save(&dir.join(&file))?;
        labels.push(LabelEntry { file, label: d.label });
    }
    std::fs::write(dir.join("labels.json"), serde_json::to_vec_pretty(&labels)?)?;
    Ok(())
}

pub fn read_dir(dir: &Path) -> Result<Vec<LabeledImage>> {
    let labels: Vec<LabelEntry> = serde_json::from_slice(&std::fs::read(dir.join("labels.json"))?)?;
    labels
        .into_iter()
        .map(|e| {
            Ok(LabeledImage {
                image: Image::load(&dir.join(&e.file))?,
                label: e.label,
            })
        })
        .collect()
}

/// Tokenizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub patch: usize,
    /// Latent and code width.
    pub width: usize,
    pub vocab: usize,
}

/// Low-frequency DCT patch codec plus a k-means code book fitted to the latents
/// of every scale of `images`; stored values are rounded to `f32`.
pub fn fit_tokenizer(
    images: &[Image],
    cfg: &TokenizerConfig,
    hierarchy: &ScaleHierarchy,
    seed: u64,
) -> Result<Tokenizer> {
    let first = images
        .first()
        .ok_or_else(|| Error::Data("no images to fit the tokenizer".into()))?;
    let codec = PatchCodec::dct(cfg.patch, first.channels(), cfg.width)?;
    let mut rows = Vec::new();
    let mut count = 0;
    for im in images {
        let latent = codec.encode(im)?;
        if latent.side() != hierarchy.finest() {
            return Err(Error::Config(format!(
                "{}-pixel images with patch {} give a {}-cell grid, hierarchy ends at {}",
                im.height(),
                cfg.patch,
                latent.side(),
                hierarchy.finest()
            )));
        }
        for k in 0..hierarchy.len() {
            let f = interp_to_scale(&latent, hierarchy, k)?;
            rows.extend_from_slice(f.data());
            count += f.side() * f.side();
        }
    }
    let samples = Tensor::matrix(count, cfg.width, rows)?;
    let book = build_codebook(&samples, cfg.vocab, seed)?;
    Tokenizer::new(codec, book, hierarchy.clone())?.round_to_f32()
}
