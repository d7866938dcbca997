use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::geometry::iou_unchecked;
use crate::util::rng_from_seed;

fn r(x: f64, y: f64, w: f64, h: f64) -> Rect {
    Rect::new(x, y, w, h)
}

/// IoU-matrix reference: for each prediction in order, sort its candidate
/// ground truths by IoU (desc, then index) and take the first free one.
fn reference_match(preds: &[Rect], gts: &[Rect], thr: f64) -> (usize, usize, usize) {
    let table: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| gts.iter().map(|g| crate::geometry::iou(p, g).unwrap()).collect())
        .collect();
    let mut free = vec![true; gts.len()];
    let mut tp = 0;
    for row in &table {
        let mut order: Vec<usize> = (0..gts.len()).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        if let Some(&g) = order.iter().find(|&&g| free[g] && row[g] > thr) {
            free[g] = false;
            tp += 1;
        }
    }
    (tp, preds.len() - tp, gts.len() - tp)
}

/// Size of a maximum one-to-one matching, by exhaustive search.
fn max_matching(preds: &[Rect], gts: &[Rect], thr: f64) -> usize {
    fn go(p: usize, preds: &[Rect], gts: &[Rect], used: &mut Vec<bool>, thr: f64) -> usize {
        if p == preds.len() {
            return 0;
        }
        let mut best = go(p + 1, preds, gts, used, thr);
        for g in 0..gts.len() {
            if !used[g] && iou_unchecked(&preds[p], &gts[g]) > thr {
                used[g] = true;
                best = best.max(1 + go(p + 1, preds, gts, used, thr));
                used[g] = false;
            }
        }
        best
    }
    go(0, preds, gts, &mut vec![false; gts.len()], thr)
}

fn random_boxes(n: usize, rng: &mut impl Rng) -> Vec<Rect> {
    (0..n)
        .map(|_| r(rng.random_range(0.0..40.0), rng.random_range(0.0..40.0), rng.random_range(8.0..30.0), rng.random_range(8.0..30.0)))
        .collect()
}

/// Random images whose predictions mostly jitter around ground truths.
fn random_instance(rng: &mut impl Rng, images: usize) -> Vec<(String, Vec<Rect>, Vec<Rect>)> {
    (0..images)
        .map(|i| {
            let gts = random_boxes(rng.random_range(0..4), rng);
            let mut preds = Vec::new();
            for g in &gts {
                if rng.random_bool(0.7) {
                    preds.push(r(g.x + rng.random_range(-6.0..6.0), g.y + rng.random_range(-6.0..6.0), g.w, g.h));
                }
            }
            preds.extend(random_boxes(rng.random_range(0..3), rng));
            (format!("im{i}"), preds, gts)
        })
        .collect()
}

fn evals(inst: &[(String, Vec<Rect>, Vec<Rect>)]) -> Vec<ImageEval<'_>> {
    inst.iter()
        .map(|(id, p, g)| ImageEval {
            image_id: id,
            preds: p.clone(),
            gts: g.clone(),
        })
        .collect()
}

#[test]
fn single_good_prediction_is_a_true_positive() {
    // IoU 0.6 (offset 2.5 px on a 10 px box).
    let m = match_image("a", &[r(2.5, 0.0, 10.0, 10.0)], &[r(0.0, 0.0, 10.0, 10.0)], 0.5);
    assert_eq!((m.tp(), m.false_positives.len(), m.unmatched_gts.len()), (1, 0, 0));
}

#[test]
fn one_ground_truth_is_claimed_once() {
    let gt = r(0.0, 0.0, 10.0, 10.0);
    let m = match_image("a", &[r(1.0, 0.0, 10.0, 10.0), r(0.0, 1.0, 10.0, 10.0)], &[gt], 0.5);
    assert_eq!((m.tp(), m.false_positives.len()), (1, 1));
}

#[test]
fn matching_equals_reference_on_random_instances() {
    let mut rng = rng_from_seed(1);
    for _ in 0..200 {
        let gts = random_boxes(5, &mut rng);
        let mut preds = random_boxes(5, &mut rng);
        preds.extend(gts.iter().map(|g| r(g.x + rng.random_range(-5.0..5.0), g.y, g.w, g.h)));
        let m = match_image("x", &preds, &gts, 0.5);
        let (tp, fp, fn_) = reference_match(&preds, &gts, 0.5);
        assert_eq!((m.tp(), m.false_positives.len(), m.unmatched_gts.len()), (tp, fp, fn_));
        assert!(m.tp() <= max_matching(&preds, &gts, 0.5));
    }
}

#[test]
fn corloc_examples() {
    let hit = ImageMatch {
        image_id: "a".into(),
        matches: vec![(0, 0)],
        false_positives: vec![],
        unmatched_gts: vec![],
    };
    let miss = ImageMatch {
        image_id: "b".into(),
        matches: vec![],
        false_positives: vec![0],
        unmatched_gts: vec![0],
    };
    let mk = |images: Vec<ImageMatch>| MatchResult { images, iou_thres: 0.5 };
    assert!((corloc(&mk(vec![hit.clone(), hit.clone(), miss.clone()])) - 66.666_666).abs() < 1e-3);
    assert_eq!(corloc(&mk(vec![miss.clone(), miss])), 0.0);
    assert_eq!(corloc(&mk(vec![hit.clone(), hit])), 100.0);
    assert_eq!(corloc(&mk(vec![])), 0.0);
}

#[test]
fn prf1_examples() {
    assert_eq!(prf1(Counts { tp: 2, fp: 2, total_gt: 4 }), (50.0, 50.0, 50.0));
    assert_eq!(prf1(Counts { tp: 0, fp: 0, total_gt: 3 }), (0.0, 0.0, 0.0));
    assert_eq!(prf1(Counts { tp: 3, fp: 0, total_gt: 3 }), (100.0, 100.0, 100.0));
}

#[test]
fn metrics_equal_direct_count_on_random_instances() {
    let mut rng = rng_from_seed(2);
    for _ in 0..200 {
        let n = rng.random_range(1..6);
        let inst = random_instance(&mut rng, n);
        let m = match_detections(&evals(&inst), 0.5);
        let (mut tp, mut fp, mut gt, mut hit) = (0, 0, 0, 0);
        for (_, p, g) in &inst {
            let (t, f, _) = reference_match(p, g, 0.5);
            tp += t;
            fp += f;
            gt += g.len();
            hit += (t > 0) as usize;
        }
        let x = Metrics::from_match(&m);
        assert!((x.corloc - 100.0 * hit as f64 / inst.len() as f64).abs() < 1e-9);
        let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let rc = if gt == 0 { 0.0 } else { tp as f64 / gt as f64 };
        let f = if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
        assert!((x.precision - 100.0 * p).abs() < 1e-9);
        assert!((x.recall - 100.0 * rc).abs() < 1e-9);
        assert!((x.f1 - 100.0 * f).abs() < 1e-9);
    }
}

#[test]
fn perfect_rank_one_boxes_pick_m_one() {
    let gts: Vec<Vec<Rect>> = (0..4).map(|i| vec![r(10.0 * i as f64, 0.0, 10.0, 30.0)]).collect();
    let inst: Vec<(String, Vec<Rect>, Vec<Rect>)> = gts
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let mut p = g.clone();
            p.extend((1..5).map(|k| r(100.0 + 20.0 * k as f64, 100.0, 5.0, 5.0)));
            (format!("im{i}"), p, g.clone())
        })
        .collect();
    let best = f1_sweep(&evals(&inst), 0.5, 5);
    assert_eq!(best.best_m, 1);
    assert_eq!(best.f1, 100.0);
    assert_eq!(best.corloc, 100.0);
}

#[test]
fn sweep_reports_the_maximum_over_m() {
    let mut rng = rng_from_seed(3);
    for _ in 0..100 {
        let inst = random_instance(&mut rng, 6);
        let ev = evals(&inst);
        let all = sweep(&ev, 0.5, 5);
        let best = f1_sweep(&ev, 0.5, 5);
        let max = all.iter().map(|m| m.f1).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best.f1, max);
        let first = all.iter().position(|m| m.f1 == max).unwrap();
        assert_eq!(best.best_m, first + 1);
        assert_eq!(best.corloc, all[first].corloc);
        assert_eq!(best.corloc_top1, all[0].corloc);
    }
}

#[test]
fn sweep_finds_the_precision_recall_crossover() {
    // Two images with three ground truths each. Predictions at ranks 1..5 are
    // hit, hit, miss, hit, miss: recall rises 1/3, 2/3, 2/3, 1, 1 and precision
    // falls 1, 1, 2/3, 3/4, 3/5, so F1 = 0.5, 0.8, 0.667, 0.857, 0.75.
    let gts: Vec<Rect> = (0..3).map(|k| r(40.0 * k as f64, 0.0, 10.0, 30.0)).collect();
    let miss = |k: f64| r(200.0 + k, 200.0, 5.0, 5.0);
    let preds = vec![gts[0], gts[1], miss(0.0), gts[2], miss(10.0)];
    let inst = vec![
        ("a".to_string(), preds.clone(), gts.clone()),
        ("b".to_string(), preds, gts),
    ];
    let ev = evals(&inst);
    let all = sweep(&ev, 0.5, 5);
    let f1s: Vec<f64> = all.iter().map(|m| (m.f1 * 1000.0).round() / 1000.0).collect();
    assert_eq!(f1s, vec![50.0, 80.0, 66.667, 85.714, 75.0]);
    let best = f1_sweep(&ev, 0.5, 5);
    assert_eq!(best.best_m, 4);
    assert!((best.precision - 75.0).abs() < 1e-9);
    assert!((best.recall - 100.0).abs() < 1e-9);
}

#[test]
fn single_cap_sweep_is_prf1() {
    let mut rng = rng_from_seed(4);
    let inst: Vec<_> = random_instance(&mut rng, 8)
        .into_iter()
        .map(|(id, p, g)| (id, p.into_iter().take(1).collect(), g))
        .collect();
    let ev = evals(&inst);
    let s = f1_sweep(&ev, 0.5, 1);
    let (p, rc, f) = prf1(match_detections(&ev, 0.5).counts());
    assert_eq!((s.precision, s.recall, s.f1), (p, rc, f));
}

#[test]
fn mean_and_sample_std() {
    assert_eq!(mean_std(&[7.0, 7.0, 7.0]), (7.0, 0.0));
    let (m, s) = mean_std(&[40.0, 60.0]);
    assert_eq!(m, 50.0);
    assert!((s - 14.1421).abs() < 1e-4);
}

#[test]
fn report_aggregates_runs() {
    let run = |f1: f64| Metrics {
        corloc: 80.0,
        recall: 50.0,
        precision: 40.0,
        f1,
        best_m: 2,
        corloc_top1: 70.0,
    };
    let rep = EvalReport::from_runs(vec![run(40.0), run(60.0)], 0.5);
    assert_eq!(rep.mean.f1, 50.0);
    assert!((rep.std.f1 - 14.1421).abs() < 1e-4);
    assert_eq!(rep.std.corloc, 0.0);
    assert_eq!(rep.best_max_predictions, 2);
    let table = format_table(
        "iou 0.5",
        &[ReportRow {
            modulation: "both",
            post_objectness: true,
            report: &rep,
        }],
    );
    assert!(table.contains("50.00 ±14.14"));
    assert!(table.contains("Modulation"));
}

#[test]
fn corloc_can_trail_recall_with_several_hits_per_image() {
    // Image a: three ground truths, all found. Image b: one, missed.
    let ga: Vec<Rect> = (0..3).map(|k| r(40.0 * k as f64, 0.0, 10.0, 30.0)).collect();
    let inst = vec![
        ("a".to_string(), ga.clone(), ga),
        ("b".to_string(), vec![r(200.0, 0.0, 5.0, 5.0)], vec![r(0.0, 0.0, 10.0, 30.0)]),
    ];
    let x = Metrics::from_match(&match_detections(&evals(&inst), 0.5));
    assert_eq!(x.corloc, 50.0);
    assert_eq!(x.recall, 75.0);
}

proptest! {
    #[test]
    fn count_identities_hold(seed in 0u64..100_000) {
        let mut rng = rng_from_seed(seed);
        let inst = random_instance(&mut rng, 5);
        for m in match_detections(&evals(&inst), 0.5).images.iter().zip(&inst) {
            let (im, (_, p, g)) = m;
            prop_assert_eq!(im.tp() + im.unmatched_gts.len(), g.len());
            prop_assert_eq!(im.tp() + im.false_positives.len(), p.len());
            let mut gs: Vec<usize> = im.matches.iter().map(|x| x.1).collect();
            gs.sort();
            gs.dedup();
            prop_assert_eq!(gs.len(), im.matches.len());
        }
    }

    #[test]
    fn top1_corloc_is_at_least_recall(seed in 0u64..100_000) {
        let mut rng = rng_from_seed(seed);
        let inst: Vec<_> = random_instance(&mut rng, 6)
            .into_iter()
            .filter(|(_, _, g)| !g.is_empty())
            .map(|(id, p, g)| (id, p.into_iter().take(1).collect::<Vec<_>>(), g))
            .collect();
        prop_assume!(!inst.is_empty());
        let x = Metrics::from_match(&match_detections(&evals(&inst), 0.5));
        prop_assert!(x.corloc >= x.recall - 1e-9);
    }

    #[test]
    fn lower_threshold_never_loses_true_positives(seed in 0u64..100_000) {
        let mut rng = rng_from_seed(seed);
        let inst = random_instance(&mut rng, 5);
        let ev = evals(&inst);
        let hi = match_detections(&ev, 0.5).counts().tp;
        let lo = match_detections(&ev, 0.4).counts().tp;
        prop_assert!(lo >= hi);
    }
}
