use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::geometry::Rect;

/// Counts over a Hue x Saturation grid, hue-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram2D {
    pub n_h: usize,
    pub n_s: usize,
    pub bins: Vec<u32>,
}

impl Histogram2D {
    pub fn new(n_h: usize, n_s: usize) -> Self {
        Self {
            n_h,
            n_s,
            bins: vec![0; n_h * n_s],
        }
    }

    pub fn total(&self) -> u64 {
        self.bins.iter().map(|&c| c as u64).sum()
    }

    pub fn get(&self, h: usize, s: usize) -> u32 {
        self.bins[h * self.n_s + s]
    }

    fn add(&mut self, bin: usize) {
        self.bins[bin] += 1;
    }
}

/// Hue in degrees [0, 360) and saturation in [0, 1] of an 8-bit RGB pixel.
pub fn rgb_to_hs(px: &Rgb<u8>) -> (f64, f64) {
    let [r, g, b] = px.0.map(|c| c as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    (h.rem_euclid(360.0), s)
}

pub fn hs_bin(px: &Rgb<u8>, n_h: usize, n_s: usize) -> usize {
    let (h, s) = rgb_to_hs(px);
    let hb = ((h / 360.0 * n_h as f64) as usize).min(n_h - 1);
    let sb = ((s * n_s as f64) as usize).min(n_s - 1);
    hb * n_s + sb
}

/// H-S histogram of a pixel set.
pub fn hs_histogram<'a>(
    pixels: impl IntoIterator<Item = &'a Rgb<u8>>,
    n_h: usize,
    n_s: usize,
) -> Result<Histogram2D> {
    let mut hist = Histogram2D::new(n_h, n_s);
    for px in pixels {
        hist.add(hs_bin(px, n_h, n_s));
    }
    if hist.total() == 0 {
        return Err(Error::EmptyPixels);
    }
    Ok(hist)
}

/// Hellinger distance between two histograms on the same grid:
/// `sqrt(1 - sum_I sqrt(H1(I) H2(I)) / sqrt(mean(H1) mean(H2) N^2))`, `N` the bin count.
pub fn hellinger(h1: &Histogram2D, h2: &Histogram2D) -> Result<f64> {
    if h1.n_h != h2.n_h || h1.n_s != h2.n_s {
        return Err(Error::HistogramLayout(h1.n_h, h1.n_s, h2.n_h, h2.n_s));
    }
    let (t1, t2) = (h1.total(), h2.total());
    if t1 == 0 || t2 == 0 {
        return Err(Error::EmptyHistogram);
    }
    let n = h1.bins.len() as f64;
    let (m1, m2) = (t1 as f64 / n, t2 as f64 / n);
    let bc: f64 = h1
        .bins
        .iter()
        .zip(&h2.bins)
        .map(|(&a, &b)| ((a as f64) * (b as f64)).sqrt())
        .sum();
    let d2 = 1.0 - bc / (m1 * m2 * n * n).sqrt();
    Ok(d2.max(0.0).sqrt().clamp(0.0, 1.0))
}

/// Precomputed H-S bin index of every pixel, so rectangle histograms are plain counting.
#[derive(Debug, Clone)]
pub struct HsBinMap {
    pub width: u32,
    pub height: u32,
    pub n_h: usize,
    pub n_s: usize,
    bins: Vec<u16>,
}

impl HsBinMap {
    pub fn new(img: &RgbImage, n_h: usize, n_s: usize) -> Self {
        assert!(n_h * n_s <= u16::MAX as usize, "too many histogram bins");
        Self {
            width: img.width(),
            height: img.height(),
            n_h,
            n_s,
            bins: img.pixels().map(|p| hs_bin(p, n_h, n_s) as u16).collect(),
        }
    }

    /// Histogram of the integer rectangle `[x0, x1) x [y0, y1)`, minus `hole` if given.
    pub fn histogram(&self, outer: (u32, u32, u32, u32), hole: Option<(u32, u32, u32, u32)>) -> Histogram2D {
        let (x0, y0, x1, y1) = outer;
        let mut hist = Histogram2D::new(self.n_h, self.n_s);
        for y in y0..y1 {
            let row = &self.bins[(y * self.width) as usize..((y + 1) * self.width) as usize];
            match hole {
                Some((hx0, hy0, hx1, hy1)) if y >= hy0 && y < hy1 => {
                    for &b in &row[x0 as usize..hx0.max(x0) as usize] {
                        hist.add(b as usize);
                    }
                    for &b in &row[hx1.min(x1) as usize..x1 as usize] {
                        hist.add(b as usize);
                    }
                }
                _ => {
                    for &b in &row[x0 as usize..x1 as usize] {
                        hist.add(b as usize);
                    }
                }
            }
        }
        hist
    }
}

/// Integer outer rectangle for a patch: each side pushed out by
/// `band_factor` of the matching patch dimension, clipped to the image.
pub fn band_outer(inner: &Rect, band_factor: f64, width: u32, height: u32) -> (u32, u32, u32, u32) {
    let ex = (band_factor * inner.w).round().max(1.0);
    let ey = (band_factor * inner.h).round().max(1.0);
    let x0 = (inner.x - ex).max(0.0) as u32;
    let y0 = (inner.y - ey).max(0.0) as u32;
    let x1 = (inner.right() + ex).min(width as f64) as u32;
    let y1 = (inner.bottom() + ey).min(height as f64) as u32;
    (x0, y0, x1, y1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hist(bins: Vec<u32>) -> Histogram2D {
        Histogram2D {
            n_h: bins.len(),
            n_s: 1,
            bins,
        }
    }

    #[test]
    fn single_color_single_bin() {
        let px = vec![Rgb([200, 30, 30]); 57];
        let h = hs_histogram(&px, 30, 32).unwrap();
        assert_eq!(h.bins.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.total(), 57);
    }

    #[test]
    fn two_hues_split_evenly() {
        let mut px = vec![Rgb([255, 0, 0]); 40];
        px.extend(vec![Rgb([0, 0, 255]); 40]);
        let h = hs_histogram(&px, 30, 32).unwrap();
        let nz: Vec<_> = h.bins.iter().copied().filter(|&c| c > 0).collect();
        assert_eq!(nz, vec![40, 40]);
    }

    #[test]
    fn noise_conserves_count() {
        let px: Vec<_> = (0..1000u32)
            .map(|i| Rgb([(i * 37 % 256) as u8, (i * 91 % 256) as u8, (i * 13 % 256) as u8]))
            .collect();
        assert_eq!(hs_histogram(&px, 30, 32).unwrap().total(), 1000);
    }

    #[test]
    fn empty_pixels_rejected() {
        assert!(matches!(hs_histogram(&[], 30, 32), Err(Error::EmptyPixels)));
    }

    #[test]
    fn hue_wheel_reference_points() {
        assert_eq!(rgb_to_hs(&Rgb([255, 0, 0])), (0.0, 1.0));
        assert_eq!(rgb_to_hs(&Rgb([0, 255, 0])), (120.0, 1.0));
        assert_eq!(rgb_to_hs(&Rgb([0, 0, 255])), (240.0, 1.0));
        let (h, s) = rgb_to_hs(&Rgb([255, 0, 128]));
        assert!(h > 300.0 && h < 360.0 && s == 1.0);
        assert_eq!(rgb_to_hs(&Rgb([90, 90, 90])), (0.0, 0.0));
    }

    #[test]
    fn hellinger_reference_values() {
        let a = hist(vec![4, 0]);
        let b = hist(vec![1, 1]);
        // sqrt(1 - 2 / sqrt(2 * 1 * 4))
        let expected = (1.0 - 1.0 / 2f64.sqrt()).sqrt();
        assert!((hellinger(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!((hellinger(&a, &b).unwrap() - 0.5412).abs() < 1e-4);
        assert!(hellinger(&a, &a).unwrap().abs() < 1e-6);
        assert!((hellinger(&hist(vec![3, 0, 0]), &hist(vec![0, 2, 5])).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hellinger_errors() {
        let a = hist(vec![1, 2]);
        assert!(matches!(hellinger(&a, &hist(vec![1, 2, 3])), Err(Error::HistogramLayout(..))));
        assert!(matches!(hellinger(&a, &hist(vec![0, 0])), Err(Error::EmptyHistogram)));
    }

    #[test]
    fn bin_map_band_matches_direct_count() {
        let img = RgbImage::from_fn(40, 30, |x, y| Rgb([(x * 6) as u8, (y * 8) as u8, ((x + y) * 3) as u8]));
        let map = HsBinMap::new(&img, 30, 32);
        let outer = (2, 3, 35, 28);
        let hole = (10, 8, 20, 25);
        let band = map.histogram(outer, Some(hole));
        let direct = hs_histogram(
            img.enumerate_pixels()
                .filter(|(x, y, _)| {
                    let in_outer = *x >= 2 && *x < 35 && *y >= 3 && *y < 28;
                    let in_hole = *x >= 10 && *x < 20 && *y >= 8 && *y < 25;
                    in_outer && !in_hole
                })
                .map(|(_, _, p)| p),
            30,
            32,
        )
        .unwrap();
        assert_eq!(band, direct);
    }

    proptest! {
        #[test]
        fn hellinger_symmetric_bounded_and_scale_free(
            a in prop::collection::vec(0u32..50, 12),
            b in prop::collection::vec(0u32..50, 12),
            c in 1u32..6,
        ) {
            prop_assume!(a.iter().any(|&v| v > 0) && b.iter().any(|&v| v > 0));
            let (ha, hb) = (hist(a.clone()), hist(b.clone()));
            let d = hellinger(&ha, &hb).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!((d - hellinger(&hb, &ha).unwrap()).abs() < 1e-12);
            prop_assert!(hellinger(&ha, &ha).unwrap() < 1e-6);
            let sa = hist(a.iter().map(|v| v * c).collect());
            let sb = hist(b.iter().map(|v| v * c).collect());
            prop_assert!((hellinger(&sa, &sb).unwrap() - d).abs() < 1e-6);
        }
    }
}
