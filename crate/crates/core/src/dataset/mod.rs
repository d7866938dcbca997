//! Image collections, ground truth, and the width-256 working representation.

pub mod annotations;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};

pub use annotations::AnnotationRecord;

use crate::error::{Error, Result};
use crate::geometry::Rect;

/// Working width every image is resampled to.
pub const SCALED_WIDTH: u32 = 256;

#[derive(Debug, Clone)]
pub struct AnnotatedImage {
    pub image_id: String,
    pub pixels: RgbImage,
    pub gt_boxes: Vec<Rect>,
    pub source_path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct ScaledImage {
    pub image_id: String,
    pub pixels: RgbImage,
    /// original width / 256
    pub scale_factor: f64,
    pub gt_boxes: Vec<Rect>,
}

impl ScaledImage {
    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    /// Maps a box in scaled coordinates back to the original image.
    pub fn denormalize(&self, r: &Rect) -> Rect {
        r.scaled(self.scale_factor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationFormat {
    /// Internal line-delimited JSON, one file for the whole manifest.
    Jsonl,
    /// PASCAL v1.00 text files (Penn-Fudan, INRIA Person), one per image.
    PascalText,
    /// PASCAL VOC XML files, one per image.
    PascalVoc,
    /// No ground truth (qualitative runs).
    #[default]
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<PathBuf>,
}

/// Optional subset rule applied after loading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub max_people: usize,
    pub min_box_area: f64,
}

impl FilterSpec {
    /// The INRIA-EZ subset: at most five people, boxes larger than 10K px².
    pub const INRIA_EZ: FilterSpec = FilterSpec {
        max_people: 5,
        min_box_area: 10_000.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    /// Base directory for relative paths. Defaults to the manifest's own directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(default)]
    pub annotation_format: AnnotationFormat,
    /// Annotation file for the `jsonl` format.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<PathBuf>,
    /// Restrict VOC objects to this class name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voc_class: Option<String>,
    pub images: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<FilterSpec>,
}

impl DatasetManifest {
    pub fn empty(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            root: None,
            annotation_format: AnnotationFormat::None,
            annotations: None,
            voc_class: None,
            images: Vec::new(),
            filter: None,
        }
    }

    /// Reads a manifest and resolves a missing `root` to the manifest directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        if manifest.root.is_none() {
            manifest.root = path.parent().map(Path::to_path_buf);
        }
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest always serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Builds a manifest from an image directory and a parallel annotation
    /// directory, pairing files by stem. Entries are sorted by file name.
    pub fn from_directories(
        name: impl Into<String>,
        image_dir: &Path,
        annotation_dir: Option<&Path>,
        format: AnnotationFormat,
    ) -> Result<Self> {
        let mut files: Vec<PathBuf> = fs::read_dir(image_dir)
            .map_err(|e| Error::io(image_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        let ann_ext = match format {
            AnnotationFormat::PascalText => Some("txt"),
            AnnotationFormat::PascalVoc => Some("xml"),
            _ => None,
        };
        let images = files
            .into_iter()
            .map(|p| {
                let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                let annotation = match (annotation_dir, ann_ext) {
                    (Some(dir), Some(ext)) => Some(dir.join(format!("{stem}.{ext}"))),
                    _ => None,
                };
                ManifestEntry {
                    id: stem,
                    path: p,
                    annotation,
                }
            })
            .collect();
        Ok(Self {
            name: name.into(),
            root: None,
            annotation_format: format,
            annotations: None,
            voc_class: None,
            images,
            filter: None,
        })
    }

    /// The first `count` images of FDDB in fold order (`FDDB-folds/FDDB-fold-01.txt`
    /// onwards), without annotations. Fold lines name images relative to
    /// `originalPics` and without the `.jpg` suffix.
    pub fn fddb_first(root: &Path, count: usize) -> Result<Self> {
        let mut images = Vec::with_capacity(count);
        for fold in 1..=10 {
            if images.len() == count {
                break;
            }
            let list = root.join("FDDB-folds").join(format!("FDDB-fold-{fold:02}.txt"));
            let text = fs::read_to_string(&list).map_err(|e| Error::io(&list, e))?;
            for line in text.lines().map(str::trim).filter(|l| !l.is_empty()).take(count - images.len()) {
                images.push(ManifestEntry {
                    id: line.replace('/', "_"),
                    path: root.join("originalPics").join(format!("{line}.jpg")),
                    annotation: None,
                });
            }
        }
        Ok(Self {
            images,
            ..Self::empty(format!("fddb-{count}"))
        })
    }

    /// First `limit` images of FDDB in fold order, without annotations.
    ///
    /// `root` must contain `FDDB-folds/FDDB-fold-NN.txt` and `originalPics/`.
    pub fn fddb(root: &Path, limit: usize) -> Result<Self> {
        let mut images = Vec::new();
        'folds: for fold in 1..=10 {
            let fold_path = root.join("FDDB-folds").join(format!("FDDB-fold-{fold:02}.txt"));
            let text = fs::read_to_string(&fold_path).map_err(|e| Error::io(&fold_path, e))?;
            for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
                if images.len() == limit {
                    break 'folds;
                }
                images.push(ManifestEntry {
                    id: line.replace('/', "_"),
                    path: root.join("originalPics").join(format!("{line}.jpg")),
                    annotation: None,
                });
            }
        }
        Ok(Self {
            name: format!("fddb-{limit}"),
            root: Some(root.to_path_buf()),
            annotation_format: AnnotationFormat::None,
            annotations: None,
            voc_class: None,
            images,
            filter: None,
        })
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(img.to_rgb8())
}

/// Loads every manifest entry in order, attaching its ground truth.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Vec<AnnotatedImage>> {
    let mut seen = HashSet::new();
    for entry in &manifest.images {
        if !seen.insert(entry.id.as_str()) {
            return Err(Error::DuplicateImageId(entry.id.clone()));
        }
    }

    let jsonl: Option<BTreeMap<String, AnnotationRecord>> = match manifest.annotation_format {
        AnnotationFormat::Jsonl => {
            let path = manifest.annotations.as_ref().ok_or_else(|| {
                Error::Config("jsonl annotation format needs an `annotations` file".into())
            })?;
            Some(annotations::read_jsonl(&manifest.resolve(path))?)
        }
        _ => None,
    };

    let mut out = Vec::with_capacity(manifest.images.len());
    for entry in &manifest.images {
        let path = manifest.resolve(&entry.path);
        let pixels = read_rgb(&path)?;
        let gt_boxes = match manifest.annotation_format {
            AnnotationFormat::None => Vec::new(),
            AnnotationFormat::Jsonl => jsonl
                .as_ref()
                .and_then(|m| m.get(&entry.id))
                .map(AnnotationRecord::rects)
                .unwrap_or_default(),
            AnnotationFormat::PascalText | AnnotationFormat::PascalVoc => {
                let ann = entry.annotation.as_ref().ok_or_else(|| {
                    Error::Config(format!("image {} has no annotation path", entry.id))
                })?;
                let ann = manifest.resolve(ann);
                let text = fs::read_to_string(&ann).map_err(|e| Error::io(&ann, e))?;
                if manifest.annotation_format == AnnotationFormat::PascalText {
                    annotations::parse_pascal_text(&text, &ann)?
                } else {
                    annotations::parse_voc_xml(&text, &ann, manifest.voc_class.as_deref())?
                }
            }
        };
        check_boxes(&entry.id, &gt_boxes, pixels.width(), pixels.height())?;
        out.push(AnnotatedImage {
            image_id: entry.id.clone(),
            pixels,
            gt_boxes,
            source_path: path,
        });
    }
    Ok(out)
}

fn check_boxes(image_id: &str, boxes: &[Rect], width: u32, height: u32) -> Result<()> {
    for b in boxes {
        if !(b.w > 0.0 && b.h > 0.0) || !b.inside(width as f64, height as f64) {
            return Err(Error::BoxOutOfBounds {
                image_id: image_id.to_string(),
                x: b.x,
                y: b.y,
                w: b.w,
                h: b.h,
                width,
                height,
            });
        }
    }
    Ok(())
}

/// Keeps images with at most `max_people` annotated people, then keeps only
/// boxes with area strictly above `min_box_area`, dropping images left empty.
/// People are counted before the area rule.
pub fn apply_filter(images: Vec<AnnotatedImage>, filter: &FilterSpec) -> Vec<AnnotatedImage> {
    images
        .into_iter()
        .filter(|img| img.gt_boxes.len() <= filter.max_people)
        .filter_map(|mut img| {
            img.gt_boxes.retain(|b| b.area() > filter.min_box_area);
            (!img.gt_boxes.is_empty()).then_some(img)
        })
        .collect()
}

/// The INRIA-EZ subset of the full INRIA person set.
pub fn filter_inria_ez(images: Vec<AnnotatedImage>) -> Vec<AnnotatedImage> {
    apply_filter(images, &FilterSpec::INRIA_EZ)
}

/// Resamples to width 256 (aspect preserved) and rescales the boxes.
pub fn normalize_image(img: &AnnotatedImage) -> ScaledImage {
    let (w, h) = img.pixels.dimensions();
    let scale_factor = w as f64 / SCALED_WIDTH as f64;
    let pixels = if w == SCALED_WIDTH {
        img.pixels.clone()
    } else {
        let new_h = ((h as f64 / scale_factor).round() as u32).max(1);
        image::imageops::resize(&img.pixels, SCALED_WIDTH, new_h, FilterType::Triangle)
    };
    // Boxes keep the exact horizontal factor; height rounding may leave a
    // bottom edge up to half a pixel past the resampled image.
    let gt_boxes = img.gt_boxes.iter().map(|b| b.scaled(1.0 / scale_factor)).collect();
    ScaledImage {
        image_id: img.image_id.clone(),
        pixels,
        scale_factor,
        gt_boxes,
    }
}

/// Total number of ground-truth boxes.
pub fn box_count<'a>(boxes: impl IntoIterator<Item = &'a [Rect]>) -> usize {
    boxes.into_iter().map(<[Rect]>::len).sum()
}
