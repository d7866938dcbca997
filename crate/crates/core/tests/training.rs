//! Training behaviour on synthetic scenes.

use std::path::Path;

use patchdisc::config::{Overrides, PipelineConfig};
use patchdisc::dataset::{normalize_image, ScaledImage};
use patchdisc::embedding::{embed_patches, Checkpoint, PatternVector, Vae};
use patchdisc::patches::{extract, sample_patch, sobel, GradientPatch, PatchSpec};
use patchdisc::pipeline::train_in_memory;
use patchdisc::synth::{generate, SynthConfig};
use patchdisc::util::{rng_from_seed, substream};
use patchdisc::{Error, Rect};

fn scenes(n: usize) -> Vec<ScaledImage> {
    generate(&SynthConfig {
        images: n,
        ..Default::default()
    })
    .unwrap()
    .iter()
    .map(normalize_image)
    .collect()
}

/// `configs/synthetic.toml` shrunk to a width-2 network.
fn small_config(epochs: usize) -> PipelineConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/synthetic.toml");
    let mut cfg = PipelineConfig::load(Some(&path), &Overrides::default()).unwrap();
    cfg.train.epochs = epochs;
    cfg.train.base_width = 2;
    cfg.train.batch_size = 64;
    cfg.train.patches_per_image_per_epoch = 8;
    cfg
}

fn spec_of(image_id: &str, r: &Rect) -> PatchSpec {
    PatchSpec {
        image_id: image_id.into(),
        x: r.x as u32,
        y: r.y as u32,
        w: r.w as u32,
        h: r.h as u32,
        scale: r.h,
        ratio: r.h / r.w,
    }
}

fn grads(images: &[ScaledImage], specs: &[PatchSpec]) -> Vec<GradientPatch> {
    specs
        .iter()
        .map(|s| {
            let img = images.iter().find(|i| i.image_id == s.image_id).unwrap();
            sobel(&extract(img, s).unwrap())
        })
        .collect()
}

fn cosine(a: &PatternVector, b: &PatternVector) -> f64 {
    let dot: f64 = a.z_mean.iter().zip(&b.z_mean).map(|(x, y)| (x * y) as f64).sum();
    let n = |v: &[f32]| v.iter().map(|x| (x * x) as f64).sum::<f64>().sqrt();
    dot / (n(&a.z_mean) * n(&b.z_mean))
}

/// Mean cosine similarity over pairs drawn from different images.
fn cross_image_similarity(specs: &[PatchSpec], v: &[PatternVector]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            if specs[i].image_id != specs[j].image_id {
                sum += cosine(&v[i], &v[j]);
                n += 1;
            }
        }
    }
    sum / n as f64
}

fn weights_hash(ckpt: &mut Checkpoint) -> String {
    let dir = tempfile::tempdir().unwrap();
    ckpt.save(&dir.path().join("c")).unwrap()
}

#[test]
fn contrastive_loss_halves_and_objects_cluster() {
    let images = scenes(100);
    let mut cfg = small_config(50);
    cfg.train.base_width = 4;
    let (ckpt, _) = train_in_memory(&images, &cfg, None, None, &mut |_| {}).unwrap();
    let initial = ckpt.meta.initial.unwrap().contrastive;
    let last = ckpt.meta.history.last().unwrap().loss.contrastive;
    assert!(last < 0.5 * initial, "contrastive {initial:.4} -> {last:.4}");

    // Object instances in different scenes embed closer than random patches.
    let objects: Vec<PatchSpec> = images
        .iter()
        .take(30)
        .flat_map(|i| i.gt_boxes.iter().map(|r| spec_of(&i.image_id, r)))
        .collect();
    let mut rng = rng_from_seed(11);
    let random: Vec<PatchSpec> = images
        .iter()
        .take(30)
        .flat_map(|i| (0..2).map(|_| sample_patch(&i.image_id, i.width(), i.height(), &cfg.sampler, &mut rng).unwrap()).collect::<Vec<_>>())
        .collect();
    let obj = cross_image_similarity(&objects, &embed_patches(&ckpt.vae, &grads(&images, &objects)).unwrap());
    let rnd = cross_image_similarity(&random, &embed_patches(&ckpt.vae, &grads(&images, &random)).unwrap());
    assert!(obj > rnd, "object similarity {obj:.3} vs random {rnd:.3}");
}

#[test]
fn reconstruction_improves_over_ten_epochs() {
    let images = scenes(20);
    let (ckpt, _) = train_in_memory(&images, &small_config(10), None, None, &mut |_| {}).unwrap();
    let h = &ckpt.meta.history;
    assert_eq!(h.len(), 10);
    assert!(h[9].loss.recon < h[0].loss.recon, "recon {} -> {}", h[0].loss.recon, h[9].loss.recon);
}

#[test]
fn identical_seeds_give_identical_weights() {
    let images = scenes(6);
    let cfg = small_config(2);
    let (mut a, _) = train_in_memory(&images, &cfg, None, None, &mut |_| {}).unwrap();
    let (mut b, _) = train_in_memory(&images, &cfg, None, None, &mut |_| {}).unwrap();
    assert_eq!(weights_hash(&mut a), weights_hash(&mut b));
    let mut other = cfg.clone();
    other.seed += 1;
    let (mut c, _) = train_in_memory(&images, &other, None, None, &mut |_| {}).unwrap();
    assert_ne!(weights_hash(&mut a), weights_hash(&mut c));
}

#[test]
fn zero_epochs_leave_the_initial_network() {
    let images = scenes(3);
    let cfg = small_config(0);
    let (ckpt, _) = train_in_memory(&images, &cfg, None, None, &mut |_| {}).unwrap();
    assert!(ckpt.meta.history.is_empty());
    let fresh = Vae::new(cfg.train.base_width, &mut rng_from_seed(substream(cfg.seed, "init", 0)));
    let specs: Vec<PatchSpec> = images.iter().map(|i| spec_of(&i.image_id, &i.gt_boxes[0])).collect();
    let g = grads(&images, &specs);
    assert_eq!(embed_patches(&ckpt.vae, &g).unwrap(), embed_patches(&fresh, &g).unwrap());
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let images = scenes(6);
    let (mut direct, _) = train_in_memory(&images, &small_config(3), None, None, &mut |_| {}).unwrap();
    let (first, _) = train_in_memory(&images, &small_config(1), None, None, &mut |_| {}).unwrap();
    let (mut resumed, _) = train_in_memory(&images, &small_config(3), Some(first), None, &mut |_| {}).unwrap();
    assert_eq!(resumed.meta.epoch, 3);
    assert_eq!(resumed.meta.history, direct.meta.history);
    assert_eq!(weights_hash(&mut resumed), weights_hash(&mut direct));
}

#[test]
fn runaway_learning_rate_reports_divergence() {
    let images = scenes(6);
    let mut cfg = small_config(20);
    cfg.train.optimizer.lr = 1e30;
    let dump = tempfile::tempdir().unwrap();
    match train_in_memory(&images, &cfg, None, Some(dump.path()), &mut |_| {}) {
        Err(Error::Diverged {
            last_finite_epoch,
            checkpoint,
            ..
        }) => {
            assert_eq!(checkpoint.meta.epoch, last_finite_epoch);
            assert!(checkpoint.meta.history.iter().all(|r| r.loss.total.is_finite()));
            assert_eq!(std::fs::read_dir(dump.path()).unwrap().count(), 1);
        }
        other => panic!("expected divergence, got {:?}", other.map(|(c, _)| c.meta.history)),
    }
}
