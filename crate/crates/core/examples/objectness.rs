//! Objectness cues on synthetic scenes: colour contrast with the
//! surrounding band, and distance to the nearest background cluster.
//! Object boxes should score higher on both than random patches.
//!
//! ```text
//! cargo run --release --example objectness -- [images]
//! ```

use patchdisc::config::PipelineConfig;
use patchdisc::dataset::normalize_image;
use patchdisc::objectness::ImageScorer;
use patchdisc::patches::{extract, sample_patch, PatchSpec};
use patchdisc::pipeline::fit_background;
use patchdisc::synth::{generate, SynthConfig};
use patchdisc::util::rng_from_seed;

fn main() -> patchdisc::Result<()> {
    let images: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(20);
    let scenes: Vec<_> = generate(&SynthConfig {
        images,
        ..Default::default()
    })?
    .iter()
    .map(normalize_image)
    .collect();

    let cfg = PipelineConfig::default();
    let bg = fit_background(&scenes, &cfg)?;
    println!("background model: {} centres", bg.k());

    let mut rng = rng_from_seed(3);
    let (mut obj, mut rnd) = ((0.0, 0.0, 0usize), (0.0, 0.0, 0usize));
    for img in &scenes {
        let scorer = ImageScorer::new(img, &cfg.objectness);
        for r in &img.gt_boxes {
            let spec = PatchSpec {
                image_id: img.image_id.clone(),
                x: r.x as u32,
                y: r.y as u32,
                w: r.w as u32,
                h: r.h as u32,
                scale: r.h,
                ratio: r.h / r.w,
            };
            obj.0 += scorer.hscore_raw(&spec).value;
            obj.1 += bg.bscore_norm(&extract(img, &spec)?);
            obj.2 += 1;
        }
        for _ in 0..5 {
            let spec = sample_patch(&img.image_id, img.width(), img.height(), &cfg.sampler, &mut rng)?;
            rnd.0 += scorer.hscore_raw(&spec).value;
            rnd.1 += bg.bscore_norm(&extract(img, &spec)?);
            rnd.2 += 1;
        }
    }
    let mean = |t: (f64, f64, usize)| (t.0 / t.2 as f64, t.1 / t.2 as f64);
    let (oh, ob) = mean(obj);
    let (rh, rb) = mean(rnd);
    println!("{:<16} {:>8} {:>8}", "", "hscore", "bscore");
    println!("{:<16} {oh:>8.3} {ob:>8.3}", format!("objects ({})", obj.2));
    println!("{:<16} {rh:>8.3} {rb:>8.3}", format!("random ({})", rnd.2));
    Ok(())
}
