use image::imageops::{self, FilterType};
use image::RgbImage;

use super::PatchSpec;
use crate::dataset::ScaledImage;
use crate::error::Result;
#[cfg(test)]
use crate::error::Error;

/// Side length of every encoder input.
pub const PATCH_SIZE: u32 = 32;
const N: usize = PATCH_SIZE as usize;

#[derive(Debug, Clone)]
pub struct PixelPatch {
    pub spec: PatchSpec,
    /// Always 32x32.
    pub rgb: RgbImage,
}

impl PixelPatch {
    /// Flattened HWC pixels scaled to [0, 1].
    pub fn to_unit_vec(&self) -> Vec<f32> {
        self.rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect()
    }
}

#[derive(Debug, Clone)]
pub struct GradientPatch {
    pub spec: PatchSpec,
    /// Channel-major `[dx; dy]`, each 32x32 row-major.
    pub grads: Vec<f32>,
}

impl GradientPatch {
    pub fn dx(&self) -> &[f32] {
        &self.grads[..N * N]
    }

    pub fn dy(&self) -> &[f32] {
        &self.grads[N * N..]
    }
}

/// Crops the patch and resamples it to 32x32.
pub fn extract(img: &ScaledImage, spec: &PatchSpec) -> Result<PixelPatch> {
    extract_from(&img.pixels, spec)
}

pub fn extract_from(pixels: &RgbImage, spec: &PatchSpec) -> Result<PixelPatch> {
    spec.check_inside(pixels.width(), pixels.height())?;
    let view = imageops::crop_imm(pixels, spec.x, spec.y, spec.w, spec.h);
    let rgb = if spec.w == PATCH_SIZE && spec.h == PATCH_SIZE {
        view.to_image()
    } else {
        // Triangle is bilinear with the support widened when downsampling.
        imageops::resize(&*view, PATCH_SIZE, PATCH_SIZE, FilterType::Triangle)
    };
    Ok(PixelPatch {
        spec: spec.clone(),
        rgb,
    })
}

/// Sobel gradients of the patch luma, divided by 4 and clipped to [-1, 1].
pub fn sobel(p: &PixelPatch) -> GradientPatch {
    let luma: Vec<f32> = p
        .rgb
        .pixels()
        .map(|px| (0.299 * px[0] as f32 + 0.587 * px[1] as f32 + 0.114 * px[2] as f32) / 255.0)
        .collect();
    let (dx, dy) = sobel_luma(&luma, N, N);
    let mut grads = dx;
    grads.extend(dy);
    GradientPatch {
        spec: p.spec.clone(),
        grads,
    }
}

/// 3x3 Sobel on a row-major luma plane with replicated borders.
pub fn sobel_luma(luma: &[f32], width: usize, height: usize) -> (Vec<f32>, Vec<f32>) {
    assert_eq!(luma.len(), width * height);
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, width as isize - 1) as usize;
        let y = y.clamp(0, height as isize - 1) as usize;
        luma[y * width + x]
    };
    let mut dx = vec![0.0; width * height];
    let mut dy = vec![0.0; width * height];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            let i = y as usize * width + x as usize;
            dx[i] = (gx / 4.0).clamp(-1.0, 1.0);
            dy[i] = (gy / 4.0).clamp(-1.0, 1.0);
        }
    }
    (dx, dy)
}
