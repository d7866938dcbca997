use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use patchdisc::config::{Overrides, PipelineConfig};
use patchdisc::dataset::{DatasetManifest, FilterSpec};
use patchdisc::objectness::ModulationMode;
use patchdisc::patches::PatchSpec;
use patchdisc::pipeline;
use patchdisc::synth::{generate, write_dataset, SynthConfig};
use patchdisc::{Error, Result};

#[derive(Parser)]
#[command(version, about = "Label-free object discovery from small image sets")]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Loss modulation: none, hist, bgnd or both.
    #[arg(long, global = true)]
    mode: Option<ModulationMode>,
    /// Objectness penalties at inference: on or off.
    #[arg(long, global = true, value_parser = on_off)]
    post_objectness: Option<bool>,
    /// Output directory; also settable through PATCHDISC_OUTPUT.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Normalise a dataset into the output directory.
    Prepare {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// At most 5 people per image, boxes over 10000 px².
        #[arg(long)]
        inria_ez: bool,
        /// FDDB root (with FDDB-folds/ and originalPics/); takes the first
        /// 100 images, annotation-free.
        #[arg(long, conflicts_with = "manifest")]
        fddb: Option<PathBuf>,
    },
    /// Fit the background model and train the embedding.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        resume: bool,
    },
    /// Extract objects; one detection set per inference run.
    Discover {
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Score detections at every configured IoU threshold.
    Evaluate,
    /// Contact sheet of nearest patches from other images.
    Neighbors {
        /// `image_id:x,y,w,h` in scaled pixels; repeatable.
        #[arg(long = "query", value_parser = parse_query)]
        queries: Vec<PatchSpec>,
        #[arg(short, default_value_t = 10)]
        k: usize,
        /// Without queries, use the top detection of this many images.
        #[arg(long, default_value_t = 8)]
        rows: usize,
    },
    /// Draw detections (orange) and ground truth (blue).
    Render {
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// Write a synthetic annotated dataset.
    Synth {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 100)]
        images: usize,
        #[arg(long, default_value_t = 7)]
        scene_seed: u64,
    },
}

fn on_off(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(format!("expected on or off, got `{s}`")),
    }
}

fn parse_query(s: &str) -> std::result::Result<PatchSpec, String> {
    let (id, rest) = s.rsplit_once(':').ok_or("expected image_id:x,y,w,h")?;
    let v: Vec<u32> = rest.split(',').map(str::parse).collect::<std::result::Result<_, _>>().map_err(|e| format!("{e}"))?;
    let [x, y, w, h] = v[..] else {
        return Err("expected four integers".into());
    };
    if w == 0 || h == 0 {
        return Err("query box must have positive size".into());
    }
    Ok(PatchSpec {
        image_id: id.to_string(),
        x,
        y,
        w,
        h,
        scale: h as f64,
        ratio: h as f64 / w as f64,
    })
}

fn run(cli: Cli) -> Result<()> {
    let mut ov = Overrides {
        seed: cli.seed,
        mode: cli.mode,
        post_objectness: cli.post_objectness,
        output_dir: cli.output.clone(),
        ..Default::default()
    };
    match &cli.cmd {
        Cmd::Train { epochs, .. } => ov.epochs = *epochs,
        Cmd::Discover { runs } => ov.n_runs = *runs,
        _ => {}
    }
    let cfg = PipelineConfig::load(cli.config.as_deref(), &ov)?;
    match cli.cmd {
        Cmd::Prepare { manifest, inria_ez, fddb } => {
            let filter = inria_ez.then_some(FilterSpec::INRIA_EZ);
            let idx = match fddb {
                Some(root) => pipeline::prepare_manifest(&cfg, &DatasetManifest::fddb_first(&root, 100)?, filter)?,
                None => {
                    let manifest = manifest
                        .or_else(|| cfg.manifest.clone())
                        .ok_or_else(|| Error::Config("no manifest given (--manifest or `manifest` in the config)".into()))?;
                    pipeline::prepare(&cfg, &manifest, filter)?
                }
            };
            println!("{} images / {} boxes", idx.images.len(), idx.boxes);
        }
        Cmd::Train { resume, .. } => {
            let s = pipeline::cmd_train(&cfg, resume, &mut |r| {
                eprintln!(
                    "epoch {}/{}  total {:.4}  contrastive {:.4}  recon {:.4}  kld {:.4}",
                    r.epoch, r.epochs, r.loss.total, r.loss.contrastive, r.loss.recon, r.loss.kld
                )
            })?;
            println!("{} ({} epochs, sha256 {})", s.checkpoint.display(), s.epochs, s.weights_sha256);
        }
        Cmd::Discover { .. } => {
            let s = pipeline::cmd_discover(&cfg)?;
            println!("{} ({} runs, {} boxes, at most {} per image)", s.detections.display(), s.runs, s.boxes, s.max_per_image);
        }
        Cmd::Evaluate => {
            let reports = pipeline::cmd_evaluate(&cfg)?;
            print!("{}", pipeline::report_text(&reports));
        }
        Cmd::Neighbors { queries, k, rows } => {
            let path = pipeline::cmd_neighbors(&cfg, &queries, k, rows)?;
            println!("{}", path.display());
        }
        Cmd::Render { run } => {
            let files = pipeline::cmd_render(&cfg, run)?;
            println!("{} overlays in {}", files.len(), pipeline::Layout::new(&cfg.output_dir).render_dir().display());
        }
        Cmd::Synth { dir, images, scene_seed } => {
            let scenes = generate(&SynthConfig {
                images,
                seed: scene_seed,
                ..Default::default()
            })?;
            let manifest = write_dataset(&dir, &scenes)?;
            println!("{}", manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::to_string(&e.to_string()).unwrap_or_default();
            eprintln!("error kind={} message={msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
