//! Procedural scenes for end-to-end checks: one shared textured object,
//! repeated 1-3 times per image, on a background unique to each image.

use std::path::Path;

use image::imageops::{resize, FilterType};
use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotatedImage, AnnotationFormat, AnnotationRecord, DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::util::substream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub images: usize,
    pub width: u32,
    pub height: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object height range in pixels; width is height / `aspect`.
    pub object_height_min: u32,
    pub object_height_max: u32,
    pub aspect: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            images: 100,
            width: 256,
            height: 192,
            min_objects: 1,
            max_objects: 3,
            object_height_min: 60,
            object_height_max: 96,
            aspect: 3.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("need 1 <= min_objects <= max_objects");
        }
        if self.object_height_min < 6 || self.object_height_min > self.object_height_max {
            return bad("need 6 <= object_height_min <= object_height_max");
        }
        if self.object_height_max >= self.height || self.aspect < 1.0 {
            return bad("objects must fit the canvas, aspect >= 1");
        }
        let widest = (self.object_height_max as f64 / self.aspect).ceil() as u32;
        if widest as usize * self.max_objects * 2 > self.width as usize {
            return bad("max_objects do not fit side by side");
        }
        Ok(())
    }
}

/// The shared object at its native 32x96 resolution. The pattern depends
/// only on `seed`, never on the scene.
pub fn object_template(seed: u64) -> RgbImage {
    let mut rng = substream_rng(seed, "object", 0);
    let (w, h) = (32u32, 96u32);
    let palette: Vec<Rgb<u8>> = (0..3)
        .map(|_| Rgb([rng.random_range(0..256) as u8, rng.random_range(0..256) as u8, rng.random_range(0..256) as u8]))
        .collect();
    let dark = Rgb([20, 20, 30]);
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let cx = x as f64 - (w as f64 - 1.0) / 2.0;
            // Head disc, striped torso, split legs.
            let px = if y < 24 {
                let cy = y as f64 - 12.0;
                if cx * cx + cy * cy < 100.0 {
                    palette[0]
                } else {
                    dark
                }
            } else if y < 60 {
                if ((y - 24) / 4) % 2 == 0 {
                    palette[1]
                } else {
                    dark
                }
            } else if cx.abs() < 3.0 {
                dark
            } else if ((x / 4) + (y / 8)) % 2 == 0 {
                palette[2]
            } else {
                palette[0]
            };
            img.put_pixel(x, y, px);
        }
    }
    img
}

fn background<R: Rng>(w: u32, h: u32, rng: &mut R) -> RgbImage {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(40.0..215.0));
    let amp: [f64; 3] = std::array::from_fn(|_| rng.random_range(5.0..35.0));
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let freq = rng.random_range(0.01..0.08);
            (theta.cos() * freq, theta.sin() * freq, rng.random_range(0.0..6.3))
        })
        .collect();
    let mut img = RgbImage::from_fn(w, h, |x, y| {
        let s: f64 = waves.iter().map(|(fx, fy, ph)| (fx * x as f64 + fy * y as f64 + ph).sin()).sum::<f64>() / 3.0;
        Rgb(std::array::from_fn(|c| (base[c] + amp[c] * s).clamp(0.0, 255.0) as u8))
    });
    // A few soft blobs so backgrounds carry edges of their own.
    for _ in 0..rng.random_range(2..6) {
        let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let (rx, ry) = (rng.random_range(8.0..50.0), rng.random_range(8.0..50.0));
        let col: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..255.0));
        for y in 0..h {
            for x in 0..w {
                let d = ((x as f64 - cx) / rx).powi(2) + ((y as f64 - cy) / ry).powi(2);
                if d < 1.0 {
                    let p = img.get_pixel_mut(x, y);
                    for (v, c) in p.0.iter_mut().zip(col) {
                        *v = (0.5 * *v as f64 + 0.5 * c) as u8;
                    }
                }
            }
        }
    }
    for p in img.pixels_mut() {
        for c in 0..3 {
            p.0[c] = (p.0[c] as f64 + rng.random_range(-6.0..6.0)).clamp(0.0, 255.0) as u8;
        }
    }
    img
}

/// Generates `cfg.images` annotated scenes. Scene `i` uses substream
/// `(seed, "scene", i)`; object instances never overlap.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<AnnotatedImage>> {
    cfg.validate()?;
    let template = object_template(cfg.seed);
    (0..cfg.images)
        .map(|i| {
            let mut rng = substream_rng(cfg.seed, "scene", i as u64);
            let mut img = background(cfg.width, cfg.height, &mut rng);
            let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
            let mut boxes: Vec<Rect> = Vec::new();
            while boxes.len() < n {
                let oh = rng.random_range(cfg.object_height_min..=cfg.object_height_max);
                let ow = ((oh as f64 / cfg.aspect).round() as u32).max(1);
                let x = rng.random_range(0..=cfg.width - ow);
                let y = rng.random_range(0..=cfg.height - oh);
                let r = Rect::new(x as f64, y as f64, ow as f64, oh as f64);
                if boxes.iter().any(|b| b.intersection_area(&r) > 0.0) {
                    continue;
                }
                let obj = resize(&template, ow, oh, FilterType::Triangle);
                image::imageops::replace(&mut img, &obj, x as i64, y as i64);
                boxes.push(r);
            }
            Ok(AnnotatedImage {
                image_id: format!("scene_{i:04}"),
                pixels: img,
                gt_boxes: boxes,
                source_path: Default::default(),
            })
        })
        .collect()
}

/// Writes scenes as PNGs plus `annotations.jsonl` and `manifest.json` under `dir`.
pub fn write_dataset(dir: &Path, images: &[AnnotatedImage]) -> Result<std::path::PathBuf> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut entries = Vec::with_capacity(images.len());
    let mut records = Vec::with_capacity(images.len());
    for im in images {
        let rel = Path::new("images").join(format!("{}.png", im.image_id));
        let path = dir.join(&rel);
        im.pixels.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            source: e,
        })?;
        entries.push(ManifestEntry {
            id: im.image_id.clone(),
            path: rel,
            annotation: None,
        });
        records.push(AnnotationRecord::from_rects(&im.image_id, &im.gt_boxes));
    }
    crate::dataset::annotations::write_jsonl(&dir.join("annotations.jsonl"), &records)?;
    let mut manifest = DatasetManifest::empty("synthetic");
    manifest.annotation_format = AnnotationFormat::Jsonl;
    manifest.annotations = Some("annotations.jsonl".into());
    manifest.images = entries;
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}
