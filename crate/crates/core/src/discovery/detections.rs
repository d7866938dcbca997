use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Detection;
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::io::write_atomic;

/// One line of a detections file, in scaled-image pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub run: usize,
    pub image_id: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    pub rank: usize,
    /// Multiply by this to return to original-image pixels.
    pub scale_factor: f64,
}

impl DetectionRecord {
    pub fn new(run: usize, d: &Detection, scale_factor: f64) -> Self {
        Self {
            run,
            image_id: d.image_id.clone(),
            x: d.rect.x,
            y: d.rect.y,
            w: d.rect.w,
            h: d.rect.h,
            score: d.score,
            rank: d.rank,
            scale_factor,
        }
    }

    pub fn detection(&self) -> Detection {
        Detection {
            image_id: self.image_id.clone(),
            rect: Rect::new(self.x, self.y, self.w, self.h),
            score: self.score,
            rank: self.rank,
        }
    }
}

/// Provenance written next to a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryMeta {
    pub config_hash: String,
    pub seed: u64,
    pub runs: usize,
    pub run_seeds: Vec<u64>,
    pub n_per_image: usize,
    pub n_candidate: usize,
    pub max_keep: usize,
    pub iou_nms: f64,
    pub post_objectness: bool,
    /// Alpha used per run (mean lscore, or 0 without post-objectness).
    pub alphas: Vec<f64>,
    pub checkpoint_sha256: String,
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        buf.write_all(b"\n").expect("writing to a Vec");
    }
    write_atomic(path, &buf)
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse("detection", path, format!("line {}: {e}", i + 1))))
        .collect()
}
