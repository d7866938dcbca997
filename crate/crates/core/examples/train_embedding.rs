//! Train the patch embedding on synthetic scenes and save a checkpoint.
//!
//! ```text
//! cargo run --release --example train_embedding -- [images] [epochs] [out_dir]
//! ```

use std::path::PathBuf;

use patchdisc::config::PipelineConfig;
use patchdisc::dataset::normalize_image;
use patchdisc::pipeline::train_in_memory;
use patchdisc::synth::{generate, SynthConfig};

fn main() -> patchdisc::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let images = args.first().and_then(|a| a.parse().ok()).unwrap_or(30);
    let epochs = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(15);
    let out = args.get(2).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("patchdisc-train"));

    let scenes: Vec<_> = generate(&SynthConfig {
        images,
        ..Default::default()
    })?
    .iter()
    .map(normalize_image)
    .collect();

    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/synthetic.toml");
    let mut cfg = PipelineConfig::load(Some(&path), &Default::default())?;
    cfg.train.epochs = epochs;
    cfg.train.base_width = 4;

    println!("{:>5} {:>10} {:>12} {:>10} {:>10}", "epoch", "total", "contrastive", "recon", "kld");
    let (mut ckpt, bg) = train_in_memory(&scenes, &cfg, None, None, &mut |r| {
        println!("{:>5} {:>10.4} {:>12.4} {:>10.4} {:>10.4}", r.epoch, r.loss.total, r.loss.contrastive, r.loss.recon, r.loss.kld)
    })?;
    if let Some(init) = ckpt.meta.initial {
        println!("contrastive before training {:.4}", init.contrastive);
    }

    std::fs::create_dir_all(&out).map_err(|e| patchdisc::Error::io(&out, e))?;
    bg.save(&out.join("background"))?;
    let sha = ckpt.save(&out.join("checkpoint"))?;
    println!("checkpoint {} (sha256 {sha})", out.join("checkpoint").display());
    Ok(())
}
