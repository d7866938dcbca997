use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PatchSpec;
use crate::error::{Error, Result};
use crate::geometry::iou_unchecked;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScaleSampling {
    #[default]
    Uniform,
    LogUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Patch height range in scaled-image pixels.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Height / width range.
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub iou_min: f64,
    /// Maximum partner offset, as a fraction of the patch size, per axis.
    pub pair_jitter_max: f64,
    pub pair_scale_min: f64,
    pub pair_scale_max: f64,
    /// Partner draws before the first patch is resampled.
    pub pair_retries: usize,
    pub scale_sampling: ScaleSampling,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            scale_min: 20.0,
            scale_max: 256.0,
            ratio_min: 3.0,
            ratio_max: 3.0,
            iou_min: 0.75,
            pair_jitter_max: 0.10,
            pair_scale_min: 0.93,
            pair_scale_max: 1.08,
            pair_retries: 50,
            scale_sampling: ScaleSampling::Uniform,
        }
    }
}

impl SamplerConfig {
    /// Person discovery: tall, thin patches.
    pub fn person() -> Self {
        Self::default()
    }

    /// Face plus upper body.
    pub fn face_upper_body() -> Self {
        Self {
            ratio_min: 1.67,
            ratio_max: 2.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.scale_min > 0.0
            && self.scale_min <= self.scale_max
            && self.ratio_min > 0.0
            && self.ratio_min <= self.ratio_max
            && self.iou_min > 0.0
            && self.iou_min < 1.0
            && self.pair_jitter_max >= 0.0
            && self.pair_scale_min > 0.0
            && self.pair_scale_min <= self.pair_scale_max
            && self.pair_retries > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid sampler config {self:?}")))
        }
    }

    fn draw_scale<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.scale_min == self.scale_max {
            return self.scale_min;
        }
        match self.scale_sampling {
            ScaleSampling::Uniform => rng.random_range(self.scale_min..=self.scale_max),
            ScaleSampling::LogUniform => rng
                .random_range(self.scale_min.ln()..=self.scale_max.ln())
                .exp(),
        }
    }

    fn draw_ratio<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.ratio_min == self.ratio_max {
            self.ratio_min
        } else {
            rng.random_range(self.ratio_min..=self.ratio_max)
        }
    }
}

/// Height and width for a patch of the given height and ratio, shrunk to fit
/// the image while keeping the ratio.
fn fit_size(height: f64, ratio: f64, img_w: u32, img_h: u32) -> Option<(u32, u32)> {
    let mut h = height.round().min(img_h as f64);
    let mut w = (h / ratio).round();
    if w > img_w as f64 {
        h = (img_w as f64 * ratio).round().min(img_h as f64);
        w = (h / ratio).round().min(img_w as f64);
    }
    (w >= 1.0 && h >= 1.0).then_some((w as u32, h as u32))
}

/// Draws one patch: scale and ratio uniform over their ranges, height = scale
/// (clamped to the image), position uniform over in-bounds placements.
pub fn sample_patch<R: Rng + ?Sized>(
    image_id: &str,
    width: u32,
    height: u32,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<PatchSpec> {
    let scale = cfg.draw_scale(rng);
    let ratio = cfg.draw_ratio(rng);
    let (w, h) = fit_size(scale, ratio, width, height).ok_or(Error::NoFeasiblePatch { width, height })?;
    let x = rng.random_range(0..=width - w);
    let y = rng.random_range(0..=height - h);
    Ok(PatchSpec {
        image_id: image_id.to_string(),
        x,
        y,
        w,
        h,
        scale,
        ratio,
    })
}

/// [`sample_patch`] with up to `tries` redraws on infeasible geometry.
pub fn sample_patch_retrying<R: Rng + ?Sized>(
    image_id: &str,
    width: u32,
    height: u32,
    cfg: &SamplerConfig,
    rng: &mut R,
    tries: usize,
) -> Result<PatchSpec> {
    let mut last = Error::NoFeasiblePatch { width, height };
    for _ in 0..tries.max(1) {
        match sample_patch(image_id, width, height, cfg, rng) {
            Ok(p) => return Ok(p),
            Err(e) => last = e,
        }
    }
    Err(last)
}

/// One jittered copy of `anchor`: centre offset up to `pair_jitter_max` of the
/// patch size per axis and a height multiplier in the pair scale range, keeping
/// the anchor's ratio, re-clamped into the image. `None` when IoU with the
/// anchor does not exceed `iou_min`.
pub fn jitter_partner<R: Rng + ?Sized>(
    anchor: &PatchSpec,
    width: u32,
    height: u32,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Option<PatchSpec> {
    let j = cfg.pair_jitter_max;
    let (dx, dy) = if j > 0.0 {
        (
            rng.random_range(-j..=j) * anchor.w as f64,
            rng.random_range(-j..=j) * anchor.h as f64,
        )
    } else {
        (0.0, 0.0)
    };
    let mult = if cfg.pair_scale_min < cfg.pair_scale_max {
        rng.random_range(cfg.pair_scale_min..=cfg.pair_scale_max)
    } else {
        cfg.pair_scale_min
    };
    let ratio = anchor.h as f64 / anchor.w as f64;
    let (w, h) = fit_size(anchor.h as f64 * mult, ratio, width, height)?;
    let cx = anchor.x as f64 + anchor.w as f64 / 2.0 + dx;
    let cy = anchor.y as f64 + anchor.h as f64 / 2.0 + dy;
    let x = (cx - w as f64 / 2.0).round().clamp(0.0, (width - w) as f64) as u32;
    let y = (cy - h as f64 / 2.0).round().clamp(0.0, (height - h) as f64) as u32;
    let partner = PatchSpec {
        image_id: anchor.image_id.clone(),
        x,
        y,
        w,
        h,
        scale: anchor.scale * mult,
        ratio: anchor.ratio,
    };
    (iou_unchecked(&anchor.rect(), &partner.rect()) > cfg.iou_min).then_some(partner)
}

/// Draws an overlapping pair with IoU above `iou_min`.
pub fn sample_pair<R: Rng + ?Sized>(
    image_id: &str,
    width: u32,
    height: u32,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<(PatchSpec, PatchSpec)> {
    const ANCHOR_TRIES: usize = 100;
    for _ in 0..ANCHOR_TRIES {
        let anchor = match sample_patch(image_id, width, height, cfg, rng) {
            Ok(a) => a,
            Err(_) => continue,
        };
        for _ in 0..cfg.pair_retries {
            if let Some(partner) = jitter_partner(&anchor, width, height, cfg, rng) {
                return Ok((anchor, partner));
            }
        }
    }
    Err(Error::NoFeasiblePatch { width, height })
}
