//! Full pipeline on generated scenes: train, discover, score.
//!
//! ```text
//! cargo run --release --example synthetic_discovery -- [images] [epochs] [width]
//! ```

use std::time::Instant;

use patchdisc::config::PipelineConfig;
use patchdisc::dataset::normalize_image;
use patchdisc::objectness::ModulationMode;
use patchdisc::pipeline::{discover_runs, evaluate_records, rescore, train_in_memory};
use patchdisc::synth::{generate, SynthConfig};

fn main() -> patchdisc::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let images = args.first().copied().unwrap_or(40);
    let epochs = args.get(1).copied().unwrap_or(10);
    let width = args.get(2).copied().unwrap_or(4);

    let scenes = generate(&SynthConfig { images, ..Default::default() })?;
    let scaled: Vec<_> = scenes.iter().map(normalize_image).collect();
    let gt: Vec<_> = scaled.iter().map(|s| (s.image_id.as_str(), s.gt_boxes.as_slice())).collect();

    for (mode, post) in [(ModulationMode::Both, true), (ModulationMode::None, false)] {
        let mut cfg = PipelineConfig::default();
        cfg.sampler.scale_min = 40.0;
        cfg.sampler.scale_max = 120.0;
        cfg.train.epochs = epochs;
        cfg.train.base_width = width;
        cfg.train.patches_per_image_per_epoch = 16;
        cfg.train.batch_size = 128;
        cfg.train.optimizer.lr = 1e-3;
        cfg.train.modulation = mode;
        cfg.discovery.post_objectness = post;
        cfg.eval.n_runs = 2;

        let t = Instant::now();
        let (ckpt, bg) = train_in_memory(&scaled, &cfg, None, None, &mut |r| {
            eprintln!("  epoch {}/{}: contrastive {:.4} recon {:.4} kld {:.4}", r.epoch, r.epochs, r.loss.contrastive, r.loss.recon, r.loss.kld)
        })?;
        eprintln!("trained in {:.1}s", t.elapsed().as_secs_f64());
        let t = Instant::now();
        let runs = discover_runs(&scaled, &ckpt.vae, &bg, &cfg)?;
        eprintln!("discovered in {:.1}s", t.elapsed().as_secs_f64());
        for p in [false, true] {
            let mut d = cfg.discovery.clone();
            d.post_objectness = p;
            let dets = rescore(&runs, &d);
            let records = patchdisc::pipeline::to_records(&scaled, &dets);
            let rep = evaluate_records(&gt, &records, runs.len(), &cfg.eval);
            println!(
                "train {:?} / P-O {}: CorLoc {:.1} F1 {:.1} (iou 0.5), CorLoc {:.1} (iou 0.4)",
                mode, p, rep[0].mean.corloc, rep[0].mean.f1, rep[1].mean.corloc
            );
        }
    }
    Ok(())
}
