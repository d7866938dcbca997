//! Object extraction: pool pattern vectors, score patches by distance to the
//! pool centre plus objectness penalties, and keep the best boxes per image.

mod detections;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::ScaledImage;
use crate::embedding::{embed_patches, Vae};
use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, Rect};
use crate::objectness::{BackgroundModel, ImageScorer, ObjectnessConfig};
use crate::patches::{extract, sample_patch_retrying, sobel, PatchSpec, SamplerConfig};
use crate::util::substream_rng;

pub use detections::{read_detections, write_detections, DetectionRecord, DiscoveryMeta};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscoveryConfig {
    pub n_per_image: usize,
    pub n_candidate: usize,
    pub max_keep: usize,
    pub iou_nms: f64,
    /// Adds the objectness penalties to the distance score.
    pub post_objectness: bool,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            n_per_image: 200,
            n_candidate: 20,
            max_keep: 5,
            iou_nms: 0.5,
            post_objectness: true,
        }
    }
}

impl DiscoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_image == 0 || self.n_candidate == 0 || self.max_keep == 0 {
            return Err(Error::Config("discovery counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.iou_nms) {
            return Err(Error::Config(format!("iou_nms must lie in [0, 1], got {}", self.iou_nms)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub spec: PatchSpec,
    /// Position of the image in the dataset.
    pub image: usize,
    /// Sampling order within the image.
    pub index: usize,
    pub z_mean: Vec<f32>,
    pub hscore_raw: f64,
    pub bscore_norm: f64,
    pub lscore: f64,
}

/// Every sampled patch of the dataset with its distance to the pool mean.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternPool {
    pub entries: Vec<PoolEntry>,
    pub center: Vec<f64>,
    pub n_per_image: usize,
    pub image_ids: Vec<String>,
}

fn euclidean(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - y).powi(2)).sum::<f64>().sqrt()
}

impl PatternPool {
    /// Sets the centre to the arithmetic mean and recomputes every lscore.
    pub fn from_entries(mut entries: Vec<PoolEntry>, n_per_image: usize, image_ids: Vec<String>) -> Result<Self> {
        let dim = entries.first().ok_or(Error::EmptyDataset)?.z_mean.len();
        let mut center = vec![0.0f64; dim];
        for e in &entries {
            center.iter_mut().zip(&e.z_mean).for_each(|(c, z)| *c += *z as f64);
        }
        let n = entries.len() as f64;
        center.iter_mut().for_each(|c| *c /= n);
        for e in &mut entries {
            e.lscore = euclidean(&e.z_mean, &center);
        }
        Ok(Self {
            entries,
            center,
            n_per_image,
            image_ids,
        })
    }

    pub fn mean_lscore(&self) -> f64 {
        self.entries.iter().map(|e| e.lscore).sum::<f64>() / self.entries.len().max(1) as f64
    }

    /// Entry indices of one image in sampling order.
    pub fn image_entries(&self, image_id: &str) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.spec.image_id == image_id)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn find(&self, spec: &PatchSpec) -> Option<usize> {
        self.entries.iter().position(|e| &e.spec == spec)
    }
}

/// Samples `n_per_image` patches per image, embeds them, and scores them.
///
/// Image `i` draws from the `(seed, "pool", i)` substream, so the pool does
/// not depend on processing order.
pub fn build_pool(
    images: &[ScaledImage],
    vae: &Vae,
    background: Option<&BackgroundModel>,
    sampler: &SamplerConfig,
    objectness: &ObjectnessConfig,
    n_per_image: usize,
    seed: u64,
) -> Result<PatternPool> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    sampler.validate()?;
    let mut entries = Vec::with_capacity(images.len() * n_per_image);
    for (i, img) in images.iter().enumerate() {
        let mut rng = substream_rng(seed, "pool", i as u64);
        let scorer = ImageScorer::new(img, objectness);
        let mut grads = Vec::with_capacity(n_per_image);
        let mut scores = Vec::with_capacity(n_per_image);
        for _ in 0..n_per_image {
            let spec = sample_patch_retrying(&img.image_id, img.width(), img.height(), sampler, &mut rng, 100)?;
            let pixels = extract(img, &spec)?;
            let b = background.map_or(1.0, |m| m.bscore_norm(&pixels));
            scores.push((scorer.hscore_raw(&spec).value, b));
            grads.push(sobel(&pixels));
        }
        let vectors = embed_patches(vae, &grads)?;
        for (index, ((g, v), (h, b))) in grads.into_iter().zip(vectors).zip(scores).enumerate() {
            entries.push(PoolEntry {
                spec: g.spec,
                image: i,
                index,
                z_mean: v.z_mean,
                hscore_raw: h,
                bscore_norm: b,
                lscore: 0.0,
            });
        }
    }
    let ids = images.iter().map(|i| i.image_id.clone()).collect();
    PatternPool::from_entries(entries, n_per_image, ids)
}

/// `lscore + alpha_h (1 - hscore) + alpha_b (1 - bscore)`; lower is more object-like.
pub fn po_score(lscore: f64, hscore: f64, bscore: f64, alpha_h: f64, alpha_b: f64) -> f64 {
    lscore + alpha_h * (1.0 - hscore) + alpha_b * (1.0 - bscore)
}

/// Scores for every pool entry; alphas are the mean lscore when enabled, else 0.
pub fn pool_scores(pool: &PatternPool, post_objectness: bool) -> (Vec<f64>, f64) {
    let alpha = if post_objectness { pool.mean_lscore() } else { 0.0 };
    let scores = pool
        .entries
        .iter()
        .map(|e| po_score(e.lscore, e.hscore_raw, e.bscore_norm, alpha, alpha))
        .collect();
    (scores, alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Index into the pool.
    pub entry: usize,
    pub rect: Rect,
    pub score: f64,
    /// Sampling index, the tie-breaker.
    pub index: usize,
}

/// The `n_candidate` lowest-scoring entries of `image_id`, ascending, ties by sampling index.
pub fn select_candidates(pool: &PatternPool, scores: &[f64], image_id: &str, n_candidate: usize) -> Vec<Candidate> {
    let mut c: Vec<Candidate> = pool
        .image_entries(image_id)
        .into_iter()
        .map(|i| Candidate {
            entry: i,
            rect: pool.entries[i].spec.rect(),
            score: scores[i],
            index: pool.entries[i].index,
        })
        .collect();
    c.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.index.cmp(&b.index)));
    c.truncate(n_candidate);
    c
}

/// Greedy suppression over candidates sorted best first; returns kept positions.
pub fn nms(rects: &[Rect], iou_thres: f64, max_keep: usize) -> Vec<usize> {
    let mut suppressed = vec![false; rects.len()];
    let mut keep = Vec::new();
    for i in 0..rects.len() {
        if keep.len() == max_keep {
            break;
        }
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for j in i + 1..rects.len() {
            if !suppressed[j] && iou_unchecked(&rects[i], &rects[j]) > iou_thres {
                suppressed[j] = true;
            }
        }
    }
    keep
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub rect: Rect,
    pub score: f64,
    /// 1-based rank within the image.
    pub rank: usize,
}

#[derive(Debug, Clone)]
pub struct DiscoveryOutput {
    pub detections: Vec<Detection>,
    pub pool: PatternPool,
    pub alpha: f64,
}

/// Candidate selection and suppression for every image of a built pool.
pub fn detect(pool: &PatternPool, cfg: &DiscoveryConfig) -> (Vec<Detection>, f64) {
    let (scores, alpha) = pool_scores(pool, cfg.post_objectness);
    let mut out = Vec::new();
    for id in &pool.image_ids {
        let cands = select_candidates(pool, &scores, id, cfg.n_candidate);
        let rects: Vec<Rect> = cands.iter().map(|c| c.rect).collect();
        for (rank, k) in nms(&rects, cfg.iou_nms, cfg.max_keep).into_iter().enumerate() {
            out.push(Detection {
                image_id: id.clone(),
                rect: cands[k].rect,
                score: cands[k].score,
                rank: rank + 1,
            });
        }
    }
    (out, alpha)
}

/// Full extraction: pool, score, candidates, suppression.
pub fn discover(
    images: &[ScaledImage],
    vae: &Vae,
    background: Option<&BackgroundModel>,
    sampler: &SamplerConfig,
    objectness: &ObjectnessConfig,
    cfg: &DiscoveryConfig,
    seed: u64,
) -> Result<DiscoveryOutput> {
    cfg.validate()?;
    if cfg.post_objectness && background.is_none() {
        return Err(Error::Config("post-objectness scoring requires a background model".into()));
    }
    let pool = build_pool(images, vae, background, sampler, objectness, cfg.n_per_image, seed)?;
    let (detections, alpha) = detect(&pool, cfg);
    Ok(DiscoveryOutput {
        detections,
        pool,
        alpha,
    })
}

/// Groups detections by image id, preserving rank order.
pub fn by_image(dets: &[Detection]) -> BTreeMap<&str, Vec<&Detection>> {
    let mut map: BTreeMap<&str, Vec<&Detection>> = BTreeMap::new();
    for d in dets {
        map.entry(d.image_id.as_str()).or_default().push(d);
    }
    for v in map.values_mut() {
        v.sort_by_key(|d| d.rank);
    }
    map
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub entry: usize,
    pub distance: f64,
}

/// The `k` entries closest to entry `query` in z_mean space, ties by pool order.
pub fn nearest_neighbors_of(pool: &PatternPool, query: usize, k: usize, exclude_same_image: bool) -> Vec<Neighbor> {
    let q = &pool.entries[query];
    let qz: Vec<f64> = q.z_mean.iter().map(|v| *v as f64).collect();
    let mut all: Vec<Neighbor> = pool
        .entries
        .iter()
        .enumerate()
        .filter(|(i, e)| *i != query && !(exclude_same_image && e.image == q.image))
        .map(|(i, e)| Neighbor {
            entry: i,
            distance: euclidean(&e.z_mean, &qz),
        })
        .collect();
    all.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.entry.cmp(&b.entry)));
    all.truncate(k);
    all
}

pub fn nearest_neighbors(pool: &PatternPool, query: &PatchSpec, k: usize, exclude_same_image: bool) -> Result<Vec<Neighbor>> {
    let q = pool
        .find(query)
        .ok_or_else(|| Error::UnknownPatch(format!("{}@{},{} {}x{}", query.image_id, query.x, query.y, query.w, query.h)))?;
    Ok(nearest_neighbors_of(pool, q, k, exclude_same_image))
}
