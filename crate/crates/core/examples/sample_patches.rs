//! Draw positive pairs from one scene and save them as an overlay.
//!
//! ```text
//! cargo run --release --example sample_patches -- [pairs] [out.png]
//! ```

use patchdisc::dataset::normalize_image;
use patchdisc::patches::{extract, sample_pair, sobel, SamplerConfig};
use patchdisc::render::{draw_box, GROUND_TRUTH, PREDICTION};
use patchdisc::synth::{generate, SynthConfig};
use patchdisc::util::rng_from_seed;
use patchdisc::iou;

fn main() -> patchdisc::Result<()> {
    let mut args = std::env::args().skip(1);
    let pairs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(6);
    let out = args.next().unwrap_or_else(|| "pairs.png".into());

    let scene = &generate(&SynthConfig {
        images: 1,
        ..Default::default()
    })?[0];
    let img = normalize_image(scene);
    let cfg = SamplerConfig::person();
    let mut rng = rng_from_seed(1);

    let mut canvas = img.pixels.clone();
    let mut ious = Vec::new();
    for _ in 0..pairs {
        let (a, b) = sample_pair(&img.image_id, img.width(), img.height(), &cfg, &mut rng)?;
        let overlap = iou(&a.rect(), &b.rect())?;
        let g = sobel(&extract(&img, &b)?);
        println!(
            "a {:>3},{:>3} {:>3}x{:<3}  b {:>3},{:>3} {:>3}x{:<3}  IoU {overlap:.3}  |grad| {:.3}",
            a.x,
            a.y,
            a.w,
            a.h,
            b.x,
            b.y,
            b.w,
            b.h,
            g.grads.iter().map(|v| v.abs()).sum::<f32>() / g.grads.len() as f32
        );
        ious.push(overlap);
        draw_box(&mut canvas, &a.rect(), PREDICTION, 1);
        draw_box(&mut canvas, &b.rect(), GROUND_TRUTH, 1);
    }
    let min = ious.iter().copied().fold(1.0, f64::min);
    println!("smallest pair IoU {min:.3} (sampler floor {})", cfg.iou_min);

    canvas.save(&out).map_err(|e| patchdisc::Error::Image {
        path: out.clone().into(),
        source: e,
    })?;
    println!("wrote {out}");
    Ok(())
}
