//! Random patches, overlapping patch pairs, and the 32x32 encoder inputs.

mod extract;
mod sampler;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use crate::geometry::{iou, Rect};
pub use extract::{extract, extract_from, sobel, sobel_luma, GradientPatch, PixelPatch, PATCH_SIZE};
pub use sampler::{jitter_partner, sample_pair, sample_patch, sample_patch_retrying, ScaleSampling, SamplerConfig};

use crate::error::{Error, Result};

/// A patch rectangle in scaled-image pixels plus the parameters it was drawn with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub image_id: String,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub scale: f64,
    /// Target height / width.
    pub ratio: f64,
}

impl PatchSpec {
    pub fn rect(&self) -> Rect {
        Rect::new(self.x as f64, self.y as f64, self.w as f64, self.h as f64)
    }

    pub fn inside(&self, width: u32, height: u32) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= width && self.y + self.h <= height
    }

    pub(crate) fn check_inside(&self, width: u32, height: u32) -> Result<()> {
        if self.inside(width, height) {
            Ok(())
        } else {
            Err(Error::PatchOutOfBounds {
                x: self.x,
                y: self.y,
                w: self.w,
                h: self.h,
                width,
                height,
            })
        }
    }
}

pub fn write_specs(path: &Path, specs: &[PatchSpec]) -> Result<()> {
    let mut out = String::new();
    for s in specs {
        out.push_str(&serde_json::to_string(s).expect("patch specs always serialize"));
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_specs(path: &Path) -> Result<Vec<PatchSpec>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::parse("patch spec", path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}
