//! Score hand-written detections: greedy matching, CorLoc, and the F1
//! sweep over per-image prediction caps.
//!
//! ```text
//! cargo run --example evaluate_detections
//! ```

use patchdisc::evaluation::{corloc, match_detections, mean_std, prf1, sweep, ImageEval};
use patchdisc::Rect;

fn main() {
    let person = |x: f64| Rect::new(x, 20.0, 30.0, 90.0);
    let shifted = |r: Rect, dx: f64| Rect::new(r.x + dx, r.y, r.w, r.h);
    let images = vec![
        // Two people, found in ranks 1 and 3.
        ImageEval {
            image_id: "a",
            preds: vec![shifted(person(10.0), 3.0), Rect::new(150.0, 0.0, 20.0, 60.0), shifted(person(90.0), -5.0)],
            gts: vec![person(10.0), person(90.0)],
        },
        // One person, only a loose hit.
        ImageEval {
            image_id: "b",
            preds: vec![shifted(person(40.0), 12.0)],
            gts: vec![person(40.0)],
        },
        // Missed entirely.
        ImageEval {
            image_id: "c",
            preds: vec![Rect::new(0.0, 0.0, 30.0, 90.0)],
            gts: vec![person(120.0)],
        },
    ];

    for thr in [0.5, 0.4] {
        let m = match_detections(&images, thr);
        let (p, r, f1) = prf1(m.counts());
        println!("iou {thr}: CorLoc {:.2}  P {p:.2}  R {r:.2}  F1 {f1:.2}", corloc(&m));
        for (cap, s) in sweep(&images, thr, 3).iter().enumerate() {
            println!("  top {}: F1 {:.2}  CorLoc {:.2}", cap + 1, s.f1, s.corloc);
        }
    }

    let (mean, std) = mean_std(&[41.2, 44.0, 39.5]);
    println!("three runs: {mean:.2} ±{std:.2}");
}
