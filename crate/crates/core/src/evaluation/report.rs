use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{mean_std, Metrics};

/// Per-run metrics with their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thres: f64,
    pub runs: Vec<Metrics>,
    pub mean: Metrics,
    pub std: Metrics,
    /// Most frequent best cap across runs.
    pub best_max_predictions: usize,
    pub modulation: String,
    pub post_objectness: bool,
    pub config_hash: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn from_runs(runs: Vec<Metrics>, iou_thres: f64) -> Self {
        let field = |f: fn(&Metrics) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
        let (c, cs) = field(|m| m.corloc);
        let (r, rs) = field(|m| m.recall);
        let (p, ps) = field(|m| m.precision);
        let (f, fs) = field(|m| m.f1);
        let (t, ts) = field(|m| m.corloc_top1);
        let mut counts = [0usize; 6];
        for m in &runs {
            counts[m.best_m.min(5)] += 1;
        }
        let best = (1..=5).rev().max_by_key(|&m| counts[m]).unwrap_or(1);
        let best = if runs.is_empty() { 1 } else { best };
        Self {
            iou_thres,
            mean: Metrics {
                corloc: c,
                recall: r,
                precision: p,
                f1: f,
                best_m: best,
                corloc_top1: t,
            },
            std: Metrics {
                corloc: cs,
                recall: rs,
                precision: ps,
                f1: fs,
                best_m: 0,
                corloc_top1: ts,
            },
            best_max_predictions: best,
            runs,
            modulation: String::new(),
            post_objectness: false,
            config_hash: String::new(),
            seed: 0,
        }
    }
}

/// One table row: the mode labels and its report.
#[derive(Debug, Clone)]
pub struct ReportRow<'a> {
    pub modulation: &'a str,
    pub post_objectness: bool,
    pub report: &'a EvalReport,
}

/// Plain-text table with one line per mode, metrics as `mean ±std`.
pub fn format_table(title: &str, rows: &[ReportRow<'_>]) -> String {
    let mut s = String::new();
    writeln!(s, "{title}").unwrap();
    writeln!(
        s,
        "{:<12} {:<9} {:>15} {:>15} {:>15} {:>15} {:>6}",
        "Modulation", "Post-Obj", "CorLoc", "Recall", "Precision", "F1", "best m"
    )
    .unwrap();
    for r in rows {
        let cell = |m: f64, sd: f64| format!("{m:.2} ±{sd:.2}");
        let (m, sd) = (&r.report.mean, &r.report.std);
        writeln!(
            s,
            "{:<12} {:<9} {:>15} {:>15} {:>15} {:>15} {:>6}",
            r.modulation,
            if r.post_objectness { "on" } else { "off" },
            cell(m.corloc, sd.corloc),
            cell(m.recall, sd.recall),
            cell(m.precision, sd.precision),
            cell(m.f1, sd.f1),
            r.report.best_max_predictions
        )
        .unwrap();
    }
    s
}
