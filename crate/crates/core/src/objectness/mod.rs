//! Closed-form objectness: colour contrast against a surrounding band
//! (`hscore`) and distance from dominant background patterns (`bscore`).

mod background;
mod histogram;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

pub use background::{fit_background_model, BackgroundModel, KMeansConfig, BACKGROUND_DIM};
pub use histogram::{band_outer, hellinger, hs_bin, hs_histogram, rgb_to_hs, HsBinMap, Histogram2D};

use crate::dataset::ScaledImage;
use crate::error::Result;
use crate::patches::PatchSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectnessConfig {
    /// Outer rectangle growth per side, as a fraction of the patch dimension.
    pub band_factor: f64,
    pub hue_bins: usize,
    pub sat_bins: usize,
    /// Mean-subtraction factor for the adjusted histogram score.
    pub hscore_k: f64,
    /// Raw scores kept for the population mean.
    pub mean_window: usize,
    pub kmeans: KMeansConfig,
    /// Patches per image drawn to fit the background model.
    pub background_patches_per_image: usize,
    pub k1: f64,
    pub k2: f64,
}

impl Default for ObjectnessConfig {
    fn default() -> Self {
        Self {
            band_factor: 0.35,
            hue_bins: 30,
            sat_bins: 32,
            hscore_k: 0.5,
            mean_window: 50_000,
            kmeans: KMeansConfig::default(),
            background_patches_per_image: 20,
            k1: 1.0,
            k2: 1.0,
        }
    }
}

/// Which objectness terms modulate the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModulationMode {
    /// Every pair weighs 1.
    None,
    /// `k1 * hscore` only.
    Hist,
    /// `k2 * bscore` only.
    Bgnd,
    #[default]
    Both,
}

impl ModulationMode {
    pub fn uses_hist(self) -> bool {
        matches!(self, Self::Hist | Self::Both)
    }

    pub fn uses_background(self) -> bool {
        matches!(self, Self::Bgnd | Self::Both)
    }

    /// Effective `(k1, k2)`; `None` for the unmodulated mode.
    pub fn weights(self, k1: f64, k2: f64) -> Option<(f64, f64)> {
        match self {
            Self::None => None,
            Self::Hist => Some((k1, 0.0)),
            Self::Bgnd => Some((0.0, k2)),
            Self::Both => Some((k1, k2)),
        }
    }
}

impl std::str::FromStr for ModulationMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "hist" => Ok(Self::Hist),
            "bgnd" => Ok(Self::Bgnd),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown modulation mode `{other}` (none|hist|bgnd|both)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectnessScores {
    pub hscore_raw: f64,
    pub hscore_adj: f64,
    pub bscore_norm: f64,
}

/// Raw histogram score plus whether the surrounding band was empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HScore {
    pub value: f64,
    pub degenerate_band: bool,
}

/// Per-image state for histogram scoring.
#[derive(Debug, Clone)]
pub struct ImageScorer {
    bins: HsBinMap,
    band_factor: f64,
}

impl ImageScorer {
    pub fn new(img: &ScaledImage, cfg: &ObjectnessConfig) -> Self {
        Self {
            bins: HsBinMap::new(&img.pixels, cfg.hue_bins, cfg.sat_bins),
            band_factor: cfg.band_factor,
        }
    }

    /// Hellinger distance between the patch's H-S histogram and that of its band.
    pub fn hscore_raw(&self, spec: &PatchSpec) -> HScore {
        let inner = (spec.x, spec.y, spec.x + spec.w, spec.y + spec.h);
        let outer = band_outer(&spec.rect(), self.band_factor, self.bins.width, self.bins.height);
        let h_in = self.bins.histogram(inner, None);
        let h_band = self.bins.histogram(outer, Some(inner));
        match hellinger(&h_in, &h_band) {
            Ok(value) => HScore {
                value,
                degenerate_band: false,
            },
            Err(_) => HScore {
                value: 0.0,
                degenerate_band: true,
            },
        }
    }
}

/// One-shot histogram score; builds the bin map for the whole image.
pub fn hscore_raw(img: &ScaledImage, spec: &PatchSpec, cfg: &ObjectnessConfig) -> Result<HScore> {
    spec.check_inside(img.width(), img.height())?;
    Ok(ImageScorer::new(img, cfg).hscore_raw(spec))
}

/// `raw - k * population_mean`; negative values push a pair apart.
pub fn hscore_adjusted(raw: f64, population_mean: f64, k: f64) -> f64 {
    raw - k * population_mean
}

pub fn pair_hscore(a: f64, b: f64) -> f64 {
    0.5 * (a + b)
}

/// `g(a, b) = k1 * a + k2 * b`.
pub fn combine_g(a: f64, b: f64, k1: f64, k2: f64) -> f64 {
    k1 * a + k2 * b
}

/// Rolling window of raw histogram scores for mean subtraction.
#[derive(Debug, Clone)]
pub struct HScorePopulation {
    window: usize,
    values: VecDeque<f64>,
}

impl HScorePopulation {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            values: VecDeque::new(),
        }
    }

    pub fn extend(&mut self, raw: impl IntoIterator<Item = f64>) {
        for v in raw {
            if self.values.len() == self.window {
                self.values.pop_front();
            }
            self.values.push_back(v);
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.values.iter().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values.iter().sum::<f64>() / self.values.len() as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn scaled(pixels: RgbImage) -> ScaledImage {
        ScaledImage {
            image_id: "s".into(),
            pixels,
            scale_factor: 1.0,
            gt_boxes: vec![],
        }
    }

    fn spec(x: u32, y: u32, w: u32, h: u32) -> PatchSpec {
        PatchSpec {
            image_id: "s".into(),
            x,
            y,
            w,
            h,
            scale: h as f64,
            ratio: h as f64 / w as f64,
        }
    }

    #[test]
    fn uniform_image_scores_zero() {
        let img = scaled(RgbImage::from_pixel(256, 192, Rgb([40, 120, 200])));
        let h = hscore_raw(&img, &spec(50, 30, 30, 90), &ObjectnessConfig::default()).unwrap();
        assert!(h.value.abs() < 1e-6 && !h.degenerate_band);
    }

    #[test]
    fn red_object_on_green_scores_one() {
        let img = scaled(RgbImage::from_fn(256, 192, |x, y| {
            if (100..140).contains(&x) && (40..160).contains(&y) {
                Rgb([230, 20, 20])
            } else {
                Rgb([20, 200, 40])
            }
        }));
        let h = hscore_raw(&img, &spec(100, 40, 40, 120), &ObjectnessConfig::default()).unwrap();
        assert!((h.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_image_patch_has_degenerate_band() {
        let img = scaled(RgbImage::from_pixel(64, 48, Rgb([1, 2, 3])));
        let h = hscore_raw(&img, &spec(0, 0, 64, 48), &ObjectnessConfig::default()).unwrap();
        assert_eq!(h, HScore { value: 0.0, degenerate_band: true });
    }

    /// Two-tone scene where 30% of the object's columns bleed into the
    /// background colour; checked against direct per-pixel binning.
    #[test]
    fn colour_bleed_matches_pixel_level_oracle() {
        let (ox, oy, ow, oh) = (90u32, 30u32, 50u32, 120u32);
        let img = scaled(RgbImage::from_fn(256, 192, |x, y| {
            let inside = x >= ox && x < ox + ow && y >= oy && y < oy + oh;
            let bleed = inside && x >= ox + (ow * 7 / 10);
            if inside && !bleed {
                Rgb([240, 200, 20])
            } else {
                Rgb([30, 60, 200])
            }
        }));
        let cfg = ObjectnessConfig::default();
        let s = spec(ox, oy, ow, oh);
        let got = hscore_raw(&img, &s, &cfg).unwrap().value;

        // oracle: count colours directly; the band is the 0.35-scaled ring clipped to the image
        let (ex, ey) = ((0.35 * ow as f64).round() as i64, (0.35 * oh as f64).round() as i64);
        let (x0, y0) = ((ox as i64 - ex).max(0), (oy as i64 - ey).max(0));
        let (x1, y1) = (((ox + ow) as i64 + ex).min(256), ((oy + oh) as i64 + ey).min(192));
        let mut inner = std::collections::HashMap::<usize, f64>::new();
        let mut band = std::collections::HashMap::<usize, f64>::new();
        for y in y0..y1 {
            for x in x0..x1 {
                let px = img.pixels.get_pixel(x as u32, y as u32);
                let b = hs_bin(px, 30, 32);
                let is_inner = x >= ox as i64 && x < (ox + ow) as i64 && y >= oy as i64 && y < (oy + oh) as i64;
                *(if is_inner { &mut inner } else { &mut band }).entry(b).or_default() += 1.0;
            }
        }
        let (ti, tb): (f64, f64) = (inner.values().sum(), band.values().sum());
        let bc: f64 = inner.iter().map(|(k, v)| (v * band.get(k).copied().unwrap_or(0.0)).sqrt()).sum();
        let expected = (1.0 - bc / (ti * tb).sqrt()).sqrt();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
        assert!(got > 0.3 && got < 1.0);
    }

    #[test]
    fn adjusted_and_pair_arithmetic() {
        assert!((hscore_adjusted(0.8, 0.4, 0.5) - 0.6).abs() < 1e-12);
        assert_eq!(hscore_adjusted(0.2, 0.4, 0.5), 0.0);
        assert!((hscore_adjusted(0.1, 0.4, 0.5) + 0.1).abs() < 1e-12);
        assert_eq!(pair_hscore(0.6, 0.6), 0.6);
        assert_eq!(pair_hscore(0.2, 0.8), 0.5);
        assert!((pair_hscore(-0.1, 0.3) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn combine_g_cases() {
        assert!((combine_g(0.6, 0.5, 1.0, 1.0) - 1.1).abs() < 1e-12);
        assert_eq!(combine_g(0.0, 0.0, 1.0, 1.0), 0.0);
        assert_eq!(ModulationMode::Hist.weights(2.0, 3.0), Some((2.0, 0.0)));
        assert_eq!(ModulationMode::Bgnd.weights(2.0, 3.0), Some((0.0, 3.0)));
        assert_eq!(ModulationMode::None.weights(2.0, 3.0), None);
        let (k1, k2) = ModulationMode::Hist.weights(1.0, 1.0).unwrap();
        assert_eq!(combine_g(0.37, 0.9, k1, k2), 0.37);
        let (k1, k2) = ModulationMode::Bgnd.weights(1.0, 1.0).unwrap();
        assert_eq!(combine_g(0.37, 0.9, k1, k2), 0.9);
    }

    #[test]
    fn population_window_rolls() {
        let mut p = HScorePopulation::new(3);
        assert_eq!(p.mean(), 0.0);
        p.extend([1.0, 2.0, 3.0, 4.0]);
        assert_eq!(p.len(), 3);
        assert_eq!(p.mean(), 3.0);
    }
}
