//! Normalise a dataset into an output directory.
//!
//! ```text
//! cargo run --release --example prepare_dataset -- [manifest.json] [out_dir]
//! ```
//!
//! Without a manifest, a small synthetic dataset is written first. Images
//! come out with their longer side at 256 px and boxes rescaled to match.

use std::path::PathBuf;

use patchdisc::config::PipelineConfig;
use patchdisc::pipeline::{load_prepared, prepare};
use patchdisc::synth::{generate, write_dataset, SynthConfig};

fn main() -> patchdisc::Result<()> {
    let mut args = std::env::args().skip(1);
    let manifest = args.next().map(PathBuf::from);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("patchdisc-prepare"));

    let manifest = match manifest {
        Some(m) => m,
        None => {
            let scenes = generate(&SynthConfig {
                images: 8,
                ..Default::default()
            })?;
            write_dataset(&out.join("source"), &scenes)?
        }
    };

    let cfg = PipelineConfig {
        output_dir: out.join("run"),
        ..Default::default()
    };
    let index = prepare(&cfg, &manifest, None)?;
    println!("{}: {} images, {} boxes, annotated: {}", index.name, index.images.len(), index.boxes, index.annotated);

    let prepared = load_prepared(&cfg.output_dir)?;
    for img in prepared.images.iter().take(5) {
        println!(
            "  {:<12} {}x{}  scale {:.3}  {} boxes",
            img.image_id,
            img.width(),
            img.height(),
            img.scale_factor,
            img.gt_boxes.len()
        );
    }
    println!("prepared copy in {}", cfg.output_dir.display());
    Ok(())
}
