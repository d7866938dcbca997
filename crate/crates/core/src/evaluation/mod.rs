//! Detection scoring: one-to-one matching, CorLoc, precision/recall/F1, the
//! sweep over per-image prediction caps, and aggregation across runs.

mod report;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou_unchecked, Rect};

pub use report::{format_table, EvalReport, ReportRow};

/// Predictions (best first) and ground truths of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEval<'a> {
    pub image_id: &'a str,
    pub preds: Vec<Rect>,
    pub gts: Vec<Rect>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMatch {
    pub image_id: String,
    /// `(prediction, ground truth)` index pairs.
    pub matches: Vec<(usize, usize)>,
    pub false_positives: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

impl ImageMatch {
    pub fn tp(&self) -> usize {
        self.matches.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub images: Vec<ImageMatch>,
    pub iou_thres: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub total_gt: usize,
}

impl MatchResult {
    pub fn counts(&self) -> Counts {
        self.images.iter().fold(Counts::default(), |c, m| Counts {
            tp: c.tp + m.tp(),
            fp: c.fp + m.false_positives.len(),
            total_gt: c.total_gt + m.matches.len() + m.unmatched_gts.len(),
        })
    }
}

/// Greedy matching in prediction order: each prediction claims the unclaimed
/// ground truth of highest IoU above `iou_thres`, else it is a false positive.
pub fn match_image(image_id: &str, preds: &[Rect], gts: &[Rect], iou_thres: f64) -> ImageMatch {
    let mut claimed = vec![false; gts.len()];
    let mut matches = Vec::new();
    let mut false_positives = Vec::new();
    for (p, pr) in preds.iter().enumerate() {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(g, _)| !claimed[*g])
            .map(|(g, gt)| (g, iou_unchecked(pr, gt)))
            .filter(|(_, v)| *v > iou_thres)
            .fold(None, |best: Option<(usize, f64)>, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            });
        match best {
            Some((g, _)) => {
                claimed[g] = true;
                matches.push((p, g));
            }
            None => false_positives.push(p),
        }
    }
    ImageMatch {
        image_id: image_id.to_string(),
        matches,
        false_positives,
        unmatched_gts: (0..gts.len()).filter(|g| !claimed[*g]).collect(),
    }
}

pub fn match_detections(images: &[ImageEval<'_>], iou_thres: f64) -> MatchResult {
    MatchResult {
        images: images.iter().map(|i| match_image(i.image_id, &i.preds, &i.gts, iou_thres)).collect(),
        iou_thres,
    }
}

/// Percentage of images with at least one true positive.
pub fn corloc(m: &MatchResult) -> f64 {
    if m.images.is_empty() {
        return 0.0;
    }
    100.0 * m.images.iter().filter(|i| i.tp() > 0).count() as f64 / m.images.len() as f64
}

/// Precision, recall and F1 as percentages; precision is 0 without predictions.
pub fn prf1(c: Counts) -> (f64, f64, f64) {
    let p = if c.tp + c.fp == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    let r = if c.total_gt == 0 {
        0.0
    } else {
        c.tp as f64 / c.total_gt as f64
    };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (100.0 * p, 100.0 * r, 100.0 * f)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub corloc: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    /// Per-image prediction cap that maximised F1.
    pub best_m: usize,
    /// CorLoc using only each image's top-ranked prediction.
    pub corloc_top1: f64,
}

impl Metrics {
    pub fn from_match(m: &MatchResult) -> Self {
        let (precision, recall, f1) = prf1(m.counts());
        Self {
            corloc: corloc(m),
            recall,
            precision,
            f1,
            best_m: 0,
            corloc_top1: 0.0,
        }
    }
}

fn truncated<'a>(images: &[ImageEval<'a>], m: usize) -> Vec<ImageEval<'a>> {
    images
        .iter()
        .map(|i| ImageEval {
            image_id: i.image_id,
            preds: i.preds.iter().take(m).copied().collect(),
            gts: i.gts.clone(),
        })
        .collect()
}

/// Metrics for every cap `m = 1..=max_m`, index `m - 1`.
pub fn sweep(images: &[ImageEval<'_>], iou_thres: f64, max_m: usize) -> Vec<Metrics> {
    (1..=max_m)
        .map(|m| {
            let mut x = Metrics::from_match(&match_detections(&truncated(images, m), iou_thres));
            x.best_m = m;
            x
        })
        .collect()
}

/// Metrics at the cap with the highest F1 (smallest cap on ties).
pub fn f1_sweep(images: &[ImageEval<'_>], iou_thres: f64, max_m: usize) -> Metrics {
    let all = sweep(images, iou_thres, max_m.max(1));
    let mut best = all[0];
    for m in &all[1..] {
        if m.f1 > best.f1 {
            best = *m;
        }
    }
    best.corloc_top1 = all[0].corloc;
    best
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    (mean, std)
}

#[cfg(test)]
mod tests;
