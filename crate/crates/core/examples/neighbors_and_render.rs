//! Nearest-neighbour contact sheet and detection overlays after a short
//! training run.
//!
//! ```text
//! cargo run --release --example neighbors_and_render -- [out_dir]
//! ```
//!
//! Each sheet row starts with a framed query tile followed by its closest
//! patches from other images. Overlays draw detections in orange and
//! ground truth in blue.

use std::path::PathBuf;

use patchdisc::config::PipelineConfig;
use patchdisc::dataset::normalize_image;
use patchdisc::pipeline::{discover_runs, neighbors_in_memory, train_in_memory};
use patchdisc::render::{contact_sheet, overlay, tile};
use patchdisc::synth::{generate, SynthConfig};
use patchdisc::{Error, Rect};

fn main() -> patchdisc::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("patchdisc-figures"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let scenes: Vec<_> = generate(&SynthConfig {
        images: 20,
        ..Default::default()
    })?
    .iter()
    .map(normalize_image)
    .collect();
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/synthetic.toml");
    let mut cfg = PipelineConfig::load(Some(&path), &Default::default())?;
    cfg.train.epochs = 8;
    cfg.train.base_width = 4;
    cfg.eval.n_runs = 1;
    let (ckpt, bg) = train_in_memory(&scenes, &cfg, None, None, &mut |r| eprintln!("epoch {}/{}", r.epoch, r.epochs))?;

    let save = |img: &image::RgbImage, name: &str| {
        let p = out.join(name);
        img.save(&p).map_err(|e| Error::Image {
            path: p.clone(),
            source: e,
        })
    };

    let (pool, rows) = neighbors_in_memory(&scenes, &ckpt.vae, &bg, &cfg, &[], 6, 5)?;
    let (tw, th) = (32, 96);
    let crop = |e: usize| {
        let entry = &pool.entries[e];
        tile(&scenes[entry.image].pixels, &entry.spec.rect(), tw, th)
    };
    let tiles: Vec<Vec<_>> = rows
        .iter()
        .map(|(q, ns)| std::iter::once(crop(*q)).chain(ns.iter().map(|n| crop(n.entry))).collect())
        .collect();
    save(&contact_sheet(&tiles, tw, th), "neighbors.png")?;

    let run = &discover_runs(&scenes, &ckpt.vae, &bg, &cfg)?[0];
    for img in scenes.iter().take(4) {
        let preds: Vec<Rect> = run.detections.iter().filter(|d| d.image_id == img.image_id).map(|d| d.rect).collect();
        save(&overlay(&img.pixels, &preds, &img.gt_boxes), &format!("{}.png", img.image_id))?;
    }
    println!("figures in {}", out.display());
    Ok(())
}
