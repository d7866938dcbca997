//! End-to-end commands over an output directory.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! prepared/index.json         image list, scale factors, provenance
//! prepared/images/<id>.png    width-256 images
//! prepared/annotations.jsonl  ground truth in scaled pixels
//! background.{bin,json}       k-means background model
//! checkpoint.{bin,json}       encoder/decoder weights, optimizer, history
//! loss.csv                    per-epoch loss terms
//! detections.jsonl            one line per box, tagged with its run
//! detections.meta.json
//! report.json, report.txt     metrics per IoU threshold
//! render/<id>.png             overlays; render/provenance.json
//! neighbors.png, neighbors.json
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{EvalConfig, PipelineConfig};
use crate::dataset::annotations::{read_jsonl, write_jsonl};
use crate::dataset::{
    apply_filter, box_count, load_dataset, normalize_image, read_rgb, AnnotationRecord, DatasetManifest, FilterSpec,
    ScaledImage,
};
use crate::discovery::{
    detect, discover, nearest_neighbors_of, read_detections, write_detections, Detection, DetectionRecord,
    DiscoveryConfig, DiscoveryMeta, DiscoveryOutput, Neighbor, PatternPool,
};
use crate::embedding::{train, Checkpoint, EpochReport, TrainInputs, Vae};
use crate::error::{Error, Result};
use crate::evaluation::{f1_sweep, format_table, EvalReport, ImageEval, Metrics, ReportRow};
use crate::geometry::Rect;
use crate::io::{read_json, write_atomic, write_json, DirLock};
use crate::objectness::{fit_background_model, BackgroundModel};
use crate::patches::{extract, sample_patch_retrying, PatchSpec};
use crate::render::{contact_sheet, overlay, tile};
use crate::util::{substream, substream_rng, Provenance};

/// Paths inside an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn prepared(&self) -> PathBuf {
        self.root.join("prepared")
    }
    pub fn index(&self) -> PathBuf {
        self.prepared().join("index.json")
    }
    pub fn annotations(&self) -> PathBuf {
        self.prepared().join("annotations.jsonl")
    }
    pub fn background(&self) -> PathBuf {
        self.root.join("background")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint")
    }
    pub fn loss_csv(&self) -> PathBuf {
        self.root.join("loss.csv")
    }
    pub fn detections(&self) -> PathBuf {
        self.root.join("detections.jsonl")
    }
    pub fn detections_meta(&self) -> PathBuf {
        self.root.join("detections.meta.json")
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn report_txt(&self) -> PathBuf {
        self.root.join("report.txt")
    }
    pub fn render_dir(&self) -> PathBuf {
        self.root.join("render")
    }
    pub fn neighbors(&self) -> PathBuf {
        self.root.join("neighbors.png")
    }
}

fn provenance(cfg: &PipelineConfig) -> Provenance {
    Provenance {
        config_hash: cfg.hash(),
        seed: cfg.seed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedEntry {
    pub id: String,
    pub file: PathBuf,
    pub scale_factor: f64,
    pub original_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedIndex {
    pub name: String,
    /// False for annotation-free (qualitative) datasets.
    pub annotated: bool,
    pub images: Vec<PreparedEntry>,
    pub boxes: usize,
    pub filter: Option<FilterSpec>,
    pub provenance: Provenance,
}

/// A prepared dataset held in memory.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub index: PreparedIndex,
    pub images: Vec<ScaledImage>,
}

impl Prepared {
    pub fn ground_truth(&self) -> Vec<(&str, &[Rect])> {
        self.images.iter().map(|i| (i.image_id.as_str(), i.gt_boxes.as_slice())).collect()
    }
}

/// Loads, filters and normalises a manifest, then writes the prepared copy.
/// `filter` overrides the manifest's own filter.
pub fn prepare(cfg: &PipelineConfig, manifest_path: &Path, filter: Option<FilterSpec>) -> Result<PreparedIndex> {
    prepare_manifest(cfg, &DatasetManifest::read(manifest_path)?, filter)
}

/// [`prepare`] for a manifest already in memory.
pub fn prepare_manifest(cfg: &PipelineConfig, manifest: &DatasetManifest, filter: Option<FilterSpec>) -> Result<PreparedIndex> {
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let layout = Layout::new(&cfg.output_dir);
    let mut images = load_dataset(manifest)?;
    let filter = filter.or(manifest.filter);
    if let Some(f) = &filter {
        images = apply_filter(images, f);
    }
    let annotated = manifest.annotation_format != crate::dataset::AnnotationFormat::None;
    let img_dir = layout.prepared().join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut entries = Vec::with_capacity(images.len());
    let mut records = Vec::with_capacity(images.len());
    for img in &images {
        let s = normalize_image(img);
        let file = PathBuf::from("images").join(format!("{}.png", s.image_id));
        let path = layout.prepared().join(&file);
        s.pixels.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            source: e,
        })?;
        let mut rec = AnnotationRecord::from_rects(&s.image_id, &s.gt_boxes);
        rec.scale_factor = Some(s.scale_factor);
        records.push(rec);
        entries.push(PreparedEntry {
            id: s.image_id.clone(),
            file,
            scale_factor: s.scale_factor,
            original_path: img.source_path.clone(),
        });
    }
    write_jsonl(&layout.annotations(), &records)?;
    let index = PreparedIndex {
        name: manifest.name.clone(),
        annotated,
        boxes: box_count(images.iter().map(|i| i.gt_boxes.as_slice())),
        images: entries,
        filter,
        provenance: provenance(cfg),
    };
    write_json(&layout.index(), &index)?;
    Ok(index)
}

pub fn load_prepared(output_dir: &Path) -> Result<Prepared> {
    let layout = Layout::new(output_dir);
    let index: PreparedIndex = read_json(&layout.index())?;
    let ann = read_jsonl(&layout.annotations())?;
    let images = index
        .images
        .iter()
        .map(|e| {
            Ok(ScaledImage {
                image_id: e.id.clone(),
                pixels: read_rgb(&layout.prepared().join(&e.file))?,
                scale_factor: e.scale_factor,
                gt_boxes: ann.get(&e.id).map(AnnotationRecord::rects).unwrap_or_default(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared { index, images })
}

/// Fits the background model on `background_patches_per_image` random
/// patches per image, image `i` drawing from substream `(seed, "background", i)`.
pub fn fit_background(images: &[ScaledImage], cfg: &PipelineConfig) -> Result<BackgroundModel> {
    let n = cfg.objectness.background_patches_per_image;
    let mut pool = Vec::with_capacity(images.len() * n);
    for (i, img) in images.iter().enumerate() {
        let mut rng = substream_rng(cfg.seed, "background", i as u64);
        for _ in 0..n {
            let spec = sample_patch_retrying(&img.image_id, img.width(), img.height(), &cfg.sampler, &mut rng, 100)?;
            pool.push(extract(img, &spec)?);
        }
    }
    let fit_seed = substream(cfg.seed, "kmeans", 0);
    let mut model = fit_background_model(&pool, &cfg.objectness.kmeans, fit_seed, &mut crate::util::rng_from_seed(fit_seed))?;
    model.provenance = Some(provenance(cfg));
    Ok(model)
}

/// Fits the background model and trains the embedding in memory.
pub fn train_in_memory(
    images: &[ScaledImage],
    cfg: &PipelineConfig,
    resume: Option<Checkpoint>,
    dump_dir: Option<&Path>,
    progress: &mut dyn FnMut(&EpochReport),
) -> Result<(Checkpoint, BackgroundModel)> {
    cfg.validate()?;
    let bg = fit_background(images, cfg)?;
    let inputs = TrainInputs {
        images,
        sampler: &cfg.sampler,
        objectness: &cfg.objectness,
        background: Some(&bg),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        dump_dir,
    };
    let ckpt = train(&inputs, &cfg.train, resume, progress)?;
    Ok((ckpt, bg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub weights_sha256: String,
    pub epochs: usize,
    pub initial_contrastive: Option<f64>,
    pub final_contrastive: Option<f64>,
}

fn write_loss_csv(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut out = format!("# config_hash={} seed={}\n", ckpt.meta.config_hash, ckpt.meta.seed);
    out.push_str("epoch,total,contrastive,nce,recon,kld,batches,pairs,hscore_mean\n");
    for r in &ckpt.meta.history {
        let l = &r.loss;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch + 1,
            l.total,
            l.contrastive,
            l.nce,
            l.recon,
            l.kld,
            r.batches,
            r.pairs,
            r.hscore_mean
        );
    }
    write_atomic(path, out.as_bytes())
}

/// Trains from the prepared dataset and writes checkpoint, background model
/// and loss curve. With `resume`, continues the stored checkpoint up to
/// `cfg.train.epochs`. On divergence the last finite checkpoint is saved
/// before the error is returned.
pub fn cmd_train(cfg: &PipelineConfig, resume: bool, progress: &mut dyn FnMut(&EpochReport)) -> Result<TrainSummary> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let prepared = load_prepared(&cfg.output_dir)?;
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let previous = if resume { Some(Checkpoint::load(&layout.checkpoint())?) } else { None };
    let result = train_in_memory(&prepared.images, cfg, previous, Some(&cfg.output_dir), progress);
    let (mut ckpt, bg) = match result {
        Ok(v) => v,
        Err(Error::Diverged {
            cause,
            last_finite_epoch,
            mut checkpoint,
        }) => {
            checkpoint.save(&layout.checkpoint())?;
            write_loss_csv(&layout.loss_csv(), &checkpoint)?;
            return Err(Error::Diverged {
                cause,
                last_finite_epoch,
                checkpoint,
            });
        }
        Err(e) => return Err(e),
    };
    bg.save(&layout.background())?;
    ckpt.meta.background_model = Some(layout.background());
    let sha = ckpt.save(&layout.checkpoint())?;
    write_loss_csv(&layout.loss_csv(), &ckpt)?;
    Ok(TrainSummary {
        checkpoint: layout.checkpoint(),
        weights_sha256: sha,
        epochs: ckpt.meta.epoch,
        initial_contrastive: ckpt.meta.initial.map(|l| l.contrastive),
        final_contrastive: ckpt.meta.history.last().map(|r| r.loss.contrastive),
    })
}

/// Seed of inference run `run`.
pub fn run_seed(cfg: &PipelineConfig, run: usize) -> u64 {
    substream(cfg.seed, "inference", run as u64)
}

/// One discovery pass per inference run.
pub fn discover_runs(
    images: &[ScaledImage],
    vae: &Vae,
    bg: &BackgroundModel,
    cfg: &PipelineConfig,
) -> Result<Vec<DiscoveryOutput>> {
    (0..cfg.eval.n_runs)
        .map(|run| discover(images, vae, Some(bg), &cfg.sampler, &cfg.objectness, &cfg.discovery, run_seed(cfg, run)))
        .collect()
}

/// Re-runs candidate selection on existing pools with another config.
pub fn rescore(runs: &[DiscoveryOutput], cfg: &DiscoveryConfig) -> Vec<Vec<Detection>> {
    runs.iter().map(|r| detect(&r.pool, cfg).0).collect()
}

pub fn to_records(images: &[ScaledImage], runs: &[Vec<Detection>]) -> Vec<DetectionRecord> {
    let scale: BTreeMap<&str, f64> = images.iter().map(|i| (i.image_id.as_str(), i.scale_factor)).collect();
    runs.iter()
        .enumerate()
        .flat_map(|(r, dets)| dets.iter().map(move |d| (r, d)))
        .map(|(r, d)| DetectionRecord::new(r, d, scale.get(d.image_id.as_str()).copied().unwrap_or(1.0)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscoverSummary {
    pub detections: PathBuf,
    pub runs: usize,
    pub boxes: usize,
    pub max_per_image: usize,
}

fn load_model(layout: &Layout) -> Result<(Checkpoint, BackgroundModel)> {
    let ckpt = Checkpoint::load(&layout.checkpoint())?;
    let bg = BackgroundModel::load(&layout.background())?;
    Ok((ckpt, bg))
}

/// Runs discovery `eval.n_runs` times and writes the detections file.
pub fn cmd_discover(cfg: &PipelineConfig) -> Result<DiscoverSummary> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let prepared = load_prepared(&cfg.output_dir)?;
    let (ckpt, bg) = load_model(&layout)?;
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let outputs = discover_runs(&prepared.images, &ckpt.vae, &bg, cfg)?;
    let alphas = outputs.iter().map(|o| o.alpha).collect();
    let runs: Vec<Vec<Detection>> = outputs.into_iter().map(|o| o.detections).collect();
    let records = to_records(&prepared.images, &runs);
    write_detections(&layout.detections(), &records)?;
    let meta = DiscoveryMeta {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        runs: cfg.eval.n_runs,
        run_seeds: (0..cfg.eval.n_runs).map(|r| run_seed(cfg, r)).collect(),
        n_per_image: cfg.discovery.n_per_image,
        n_candidate: cfg.discovery.n_candidate,
        max_keep: cfg.discovery.max_keep,
        iou_nms: cfg.discovery.iou_nms,
        post_objectness: cfg.discovery.post_objectness,
        alphas,
        checkpoint_sha256: ckpt.meta.weights_sha256.clone(),
    };
    write_json(&layout.detections_meta(), &meta)?;
    let mut per: BTreeMap<(usize, &str), usize> = BTreeMap::new();
    for r in &records {
        *per.entry((r.run, r.image_id.as_str())).or_default() += 1;
    }
    Ok(DiscoverSummary {
        detections: layout.detections(),
        runs: cfg.eval.n_runs,
        boxes: records.len(),
        max_per_image: per.values().copied().max().unwrap_or(0),
    })
}

/// Per-run max-F1 metrics for every threshold. Runs with no detections
/// still count, so an empty file yields an all-zero report.
pub fn evaluate_records(
    gt: &[(&str, &[Rect])],
    records: &[DetectionRecord],
    runs: usize,
    eval: &EvalConfig,
) -> Vec<EvalReport> {
    let mut preds: BTreeMap<(usize, &str), Vec<&DetectionRecord>> = BTreeMap::new();
    for r in records {
        preds.entry((r.run, r.image_id.as_str())).or_default().push(r);
    }
    for v in preds.values_mut() {
        v.sort_by_key(|r| r.rank);
    }
    eval.iou_thres
        .iter()
        .map(|&thr| {
            let metrics: Vec<Metrics> = (0..runs)
                .map(|run| {
                    let images: Vec<ImageEval<'_>> = gt
                        .iter()
                        .map(|(id, gts)| ImageEval {
                            image_id: id,
                            preds: preds
                                .get(&(run, *id))
                                .map(|v| v.iter().map(|r| r.detection().rect).collect())
                                .unwrap_or_default(),
                            gts: gts.to_vec(),
                        })
                        .collect();
                    f1_sweep(&images, thr, eval.max_predictions)
                })
                .collect();
            EvalReport::from_runs(metrics, thr)
        })
        .collect()
}

/// Writes `report.json` and `report.txt`; returns one report per threshold.
pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let prepared = load_prepared(&cfg.output_dir)?;
    if !prepared.index.annotated {
        return Err(Error::Config("dataset has no ground truth; evaluation is unavailable".into()));
    }
    let records = read_detections(&layout.detections())?;
    let meta: Option<DiscoveryMeta> = read_json(&layout.detections_meta()).ok();
    let runs = meta.as_ref().map_or(cfg.eval.n_runs, |m| m.runs).max(1);
    let post_objectness = meta.as_ref().map_or(cfg.discovery.post_objectness, |m| m.post_objectness);
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let mut reports = evaluate_records(&prepared.ground_truth(), &records, runs, &cfg.eval);
    for r in &mut reports {
        r.modulation = mode_name(cfg);
        r.post_objectness = post_objectness;
        r.config_hash = cfg.hash();
        r.seed = cfg.seed;
    }
    write_json(&layout.report_json(), &reports)?;
    write_atomic(&layout.report_txt(), report_text(&reports).as_bytes())?;
    Ok(reports)
}

fn mode_name(cfg: &PipelineConfig) -> String {
    serde_json::to_value(cfg.train.modulation)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// One table per threshold.
pub fn report_text(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let row = ReportRow {
            modulation: &r.modulation,
            post_objectness: r.post_objectness,
            report: r,
        };
        out.push_str(&format_table(&format!("iou_thres = {}", r.iou_thres), &[row]));
        out.push('\n');
    }
    if let Some(r) = reports.first() {
        let _ = writeln!(out, "config_hash = {}\nseed = {}", r.config_hash, r.seed);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RenderIndex {
    provenance: Provenance,
    run: usize,
    files: Vec<PathBuf>,
}

/// Overlays for one run: predictions orange, ground truth blue when known.
pub fn cmd_render(cfg: &PipelineConfig, run: usize) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(&cfg.output_dir);
    let prepared = load_prepared(&cfg.output_dir)?;
    let records = read_detections(&layout.detections())?;
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let dir = layout.render_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut files = Vec::new();
    for img in &prepared.images {
        let mut recs: Vec<&DetectionRecord> =
            records.iter().filter(|r| r.run == run && r.image_id == img.image_id).collect();
        recs.sort_by_key(|r| r.rank);
        let preds: Vec<Rect> = recs.iter().map(|r| r.detection().rect).collect();
        let gts: &[Rect] = if prepared.index.annotated { &img.gt_boxes } else { &[] };
        let out = overlay(&img.pixels, &preds, gts);
        let path = dir.join(format!("{}.png", img.image_id));
        out.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            source: e,
        })?;
        files.push(path);
    }
    write_json(
        &dir.join("provenance.json"),
        &RenderIndex {
            provenance: provenance(cfg),
            run,
            files: files.clone(),
        },
    )?;
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborRow {
    pub query: PatchSpec,
    pub neighbors: Vec<(PatchSpec, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSheet {
    pub provenance: Provenance,
    pub k: usize,
    pub rows: Vec<NeighborRow>,
}

/// Pool entry of each query with its neighbours.
pub type NeighborRows = Vec<(usize, Vec<Neighbor>)>;

/// Builds the run-0 pool and lists the `k` nearest patches from other images
/// for each query. Without explicit queries, the top detection of each of
/// the first `default_queries` images is used.
pub fn neighbors_in_memory(
    images: &[ScaledImage],
    vae: &Vae,
    bg: &BackgroundModel,
    cfg: &PipelineConfig,
    queries: &[PatchSpec],
    k: usize,
    default_queries: usize,
) -> Result<(PatternPool, NeighborRows)> {
    let out = discover(images, vae, Some(bg), &cfg.sampler, &cfg.objectness, &cfg.discovery, run_seed(cfg, 0))?;
    let pool = out.pool;
    let mut idx = Vec::new();
    if queries.is_empty() {
        for id in pool.image_ids.iter().take(default_queries) {
            if let Some(d) = out.detections.iter().find(|d| &d.image_id == id && d.rank == 1) {
                let e = pool
                    .image_entries(id)
                    .into_iter()
                    .find(|&e| pool.entries[e].spec.rect() == d.rect)
                    .expect("detections come from the pool");
                idx.push(e);
            }
        }
    } else {
        for q in queries {
            let e = pool.find(q).map(Ok).unwrap_or_else(|| closest_entry(&pool, q))?;
            idx.push(e);
        }
    }
    let rows = idx.into_iter().map(|q| (q, nearest_neighbors_of(&pool, q, k, true))).collect();
    Ok((pool, rows))
}

/// Queries outside the pool are matched to the pool entry with the highest
/// IoU in the same image.
fn closest_entry(pool: &PatternPool, q: &PatchSpec) -> Result<usize> {
    pool.image_entries(&q.image_id)
        .into_iter()
        .map(|e| (e, crate::geometry::iou_unchecked(&pool.entries[e].spec.rect(), &q.rect())))
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(e, _)| e)
        .ok_or_else(|| Error::UnknownPatch(q.image_id.clone()))
}

/// Writes `neighbors.png` (one row per query: query tile, then `k`
/// neighbours) and `neighbors.json`.
pub fn cmd_neighbors(cfg: &PipelineConfig, queries: &[PatchSpec], k: usize, default_queries: usize) -> Result<PathBuf> {
    let layout = Layout::new(&cfg.output_dir);
    let prepared = load_prepared(&cfg.output_dir)?;
    let (ckpt, bg) = load_model(&layout)?;
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let (pool, rows) = neighbors_in_memory(&prepared.images, &ckpt.vae, &bg, cfg, queries, k, default_queries)?;
    let th = 96u32;
    let tw = ((th as f64 / cfg.sampler.ratio_min).round() as u32).max(16);
    let crop = |e: usize| {
        let entry = &pool.entries[e];
        tile(&prepared.images[entry.image].pixels, &entry.spec.rect(), tw, th)
    };
    let tiles: Vec<Vec<_>> = rows
        .iter()
        .map(|(q, ns)| std::iter::once(crop(*q)).chain(ns.iter().map(|n| crop(n.entry))).collect())
        .collect();
    let sheet = contact_sheet(&tiles, tw, th);
    let path = layout.neighbors();
    sheet.save(&path).map_err(|e| Error::Image {
        path: path.clone(),
        source: e,
    })?;
    let listing = NeighborSheet {
        provenance: provenance(cfg),
        k,
        rows: rows
            .iter()
            .map(|(q, ns)| NeighborRow {
                query: pool.entries[*q].spec.clone(),
                neighbors: ns.iter().map(|n| (pool.entries[n.entry].spec.clone(), n.distance)).collect(),
            })
            .collect(),
    };
    write_json(&path.with_extension("json"), &listing)?;
    Ok(path)
}
