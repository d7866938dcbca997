//! Static figures: box overlays and nearest-neighbour contact sheets.

use image::imageops::{resize, FilterType};
use image::{Rgb, RgbImage};

use crate::geometry::Rect;

pub const PREDICTION: Rgb<u8> = Rgb([255, 140, 0]);
pub const GROUND_TRUTH: Rgb<u8> = Rgb([30, 90, 255]);
const GAP: Rgb<u8> = Rgb([255, 255, 255]);

/// Draws a rectangle outline, clipped to the image.
pub fn draw_box(img: &mut RgbImage, r: &Rect, color: Rgb<u8>, thickness: u32) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = r.x.round() as i64;
    let y0 = r.y.round() as i64;
    let x1 = (r.x + r.w).round() as i64 - 1;
    let y1 = (r.y + r.h).round() as i64 - 1;
    let t = thickness as i64;
    for y in y0.max(0)..=y1.min(h - 1) {
        for x in x0.max(0)..=x1.min(w - 1) {
            let edge = x - x0 < t || x1 - x < t || y - y0 < t || y1 - y < t;
            if edge {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

/// Ground truth in blue under predictions in orange.
pub fn overlay(img: &RgbImage, preds: &[Rect], gts: &[Rect]) -> RgbImage {
    let mut out = img.clone();
    for g in gts {
        draw_box(&mut out, g, GROUND_TRUTH, 2);
    }
    for p in preds {
        draw_box(&mut out, p, PREDICTION, 2);
    }
    out
}

/// Crops `r` from `img` and resizes it to a `tw`x`th` tile.
pub fn tile(img: &RgbImage, r: &Rect, tw: u32, th: u32) -> RgbImage {
    let x = (r.x.max(0.0) as u32).min(img.width().saturating_sub(1));
    let y = (r.y.max(0.0) as u32).min(img.height().saturating_sub(1));
    let w = (r.w.round() as u32).clamp(1, img.width() - x);
    let h = (r.h.round() as u32).clamp(1, img.height() - y);
    let crop = image::imageops::crop_imm(img, x, y, w, h).to_image();
    resize(&crop, tw, th, FilterType::Triangle)
}

/// Lays out rows of equally sized tiles. The first column is set apart by a
/// wider gap and an orange frame.
pub fn contact_sheet(rows: &[Vec<RgbImage>], tw: u32, th: u32) -> RgbImage {
    const PAD: u32 = 2;
    const SEP: u32 = 8;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let width = if cols == 0 { 1 } else { cols * (tw + PAD) + PAD + SEP };
    let height = (rows.len() as u32 * (th + PAD) + PAD).max(1);
    let mut sheet = RgbImage::from_pixel(width, height, GAP);
    for (r, row) in rows.iter().enumerate() {
        let y = PAD + r as u32 * (th + PAD);
        for (c, t) in row.iter().enumerate() {
            let x = PAD + c as u32 * (tw + PAD) + if c > 0 { SEP } else { 0 };
            image::imageops::replace(&mut sheet, t, x as i64, y as i64);
            if c == 0 {
                draw_box(&mut sheet, &Rect::new(x as f64, y as f64, tw as f64, th as f64), PREDICTION, 1);
            }
        }
    }
    sheet
}

/// Tile geometry of a sheet: `(columns, rows)`.
pub fn sheet_grid(sheet: &RgbImage, tw: u32, th: u32) -> (u32, u32) {
    ((sheet.width().saturating_sub(10)) / (tw + 2), (sheet.height().saturating_sub(2)) / (th + 2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(img: &RgbImage, c: Rgb<u8>) -> usize {
        img.pixels().filter(|p| **p == c).count()
    }

    #[test]
    fn overlay_draws_both_colours() {
        let base = RgbImage::from_pixel(100, 80, Rgb([0, 0, 0]));
        let preds = [Rect::new(5.0, 5.0, 20.0, 30.0), Rect::new(50.0, 10.0, 20.0, 30.0)];
        let gts = [Rect::new(30.0, 40.0, 10.0, 30.0)];
        let out = overlay(&base, &preds, &gts);
        // Each 2-px outline of a w x h box covers 2(w + h) * 2 - 16 pixels.
        let ring = |w: usize, h: usize| 4 * (w + h) - 16;
        assert_eq!(count(&out, PREDICTION), 2 * ring(20, 30));
        assert_eq!(count(&out, GROUND_TRUTH), ring(10, 30));
    }

    #[test]
    fn no_ground_truth_means_orange_only() {
        let base = RgbImage::from_pixel(40, 40, Rgb([0, 0, 0]));
        let out = overlay(&base, &[Rect::new(1.0, 1.0, 10.0, 10.0)], &[]);
        assert_eq!(count(&out, GROUND_TRUTH), 0);
        assert!(count(&out, PREDICTION) > 0);
    }

    #[test]
    fn boxes_past_the_edge_are_clipped() {
        let mut img = RgbImage::new(10, 10);
        draw_box(&mut img, &Rect::new(5.0, 5.0, 20.0, 20.0), PREDICTION, 2);
        assert!(count(&img, PREDICTION) > 0);
    }

    #[test]
    fn sheet_rows_hold_query_plus_k_tiles() {
        let t = RgbImage::from_pixel(16, 48, Rgb([9, 9, 9]));
        let rows = vec![vec![t.clone(); 11], vec![t; 11]];
        let sheet = contact_sheet(&rows, 16, 48);
        assert_eq!(sheet_grid(&sheet, 16, 48), (11, 2));
    }

    #[test]
    fn tiles_have_the_requested_size() {
        let img = RgbImage::from_pixel(64, 64, Rgb([1, 2, 3]));
        let t = tile(&img, &Rect::new(10.0, 10.0, 20.0, 60.0), 16, 48);
        assert_eq!(t.dimensions(), (16, 48));
        assert_eq!(*t.get_pixel(3, 3), Rgb([1, 2, 3]));
    }
}
