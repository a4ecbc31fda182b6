//! Brute-force reference implementations, written from the definitions and
//! sharing no code with the library beyond plain data types.

use std::collections::BTreeSet;

use findkit::detector::{sigmoid, Detection, ProposalParams};
use findkit::evalkit::{EvalRecord, MAX_DETECTIONS_PER_IMAGE};
use findkit::geometry::{AnchorSet, BBox, BoxCoder, BoxDeltas, MatchLabel};

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Index of the best remaining box: highest score, lowest index on ties.
fn best_of(remaining: &BTreeSet<usize>, scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for &i in remaining {
        match best {
            Some(b) if scores[b] >= scores[i] => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Repeatedly takes the best remaining box and deletes everything that
/// overlaps it by more than `thr`.
pub fn nms(boxes: &[BBox], scores: &[f64], thr: f64, max_out: usize) -> Vec<usize> {
    let mut remaining: BTreeSet<usize> = (0..boxes.len()).collect();
    let mut keep = Vec::new();
    while keep.len() < max_out {
        let Some(i) = best_of(&remaining, scores) else {
            break;
        };
        remaining.remove(&i);
        remaining.retain(|&j| iou(&boxes[i], &boxes[j]) <= thr);
        keep.push(i);
    }
    keep
}

pub fn batched_nms(boxes: &[BBox], scores: &[f64], groups: &[usize], thr: f64, max_out: usize) -> Vec<usize> {
    let labels: BTreeSet<usize> = groups.iter().copied().collect();
    let mut kept = Vec::new();
    for l in labels {
        let idx: Vec<usize> = (0..boxes.len()).filter(|&i| groups[i] == l).collect();
        let b: Vec<BBox> = idx.iter().map(|&i| boxes[i]).collect();
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        kept.extend(nms(&b, &s, thr, usize::MAX).into_iter().map(|k| idx[k]));
    }
    // selection sort by (score desc, index asc)
    let mut out = Vec::new();
    let mut pool: BTreeSet<usize> = kept.into_iter().collect();
    while out.len() < max_out {
        let Some(i) = best_of(&pool, scores) else {
            break;
        };
        pool.remove(&i);
        out.push(i);
    }
    out
}

pub fn match_targets(cands: &[BBox], gt: &[BBox], pos: f64, neg: f64, force: bool) -> Vec<MatchLabel> {
    let mut labels = Vec::with_capacity(cands.len());
    let mut best_gt = Vec::with_capacity(cands.len());
    for c in cands {
        if gt.is_empty() {
            labels.push(MatchLabel::Negative);
            best_gt.push(0);
            continue;
        }
        let ious: Vec<f64> = gt.iter().map(|g| iou(c, g)).collect();
        let max = ious.iter().cloned().fold(f64::MIN, f64::max);
        let arg = ious.iter().position(|&v| v == max).unwrap();
        best_gt.push(arg);
        labels.push(if max >= pos {
            MatchLabel::Positive(arg)
        } else if max < neg {
            MatchLabel::Negative
        } else {
            MatchLabel::Ignore
        });
    }
    if force {
        for g in gt {
            let col: Vec<f64> = cands.iter().map(|c| iou(c, g)).collect();
            let max = col.iter().cloned().fold(0.0, f64::max);
            if max > 0.0 {
                for (i, &v) in col.iter().enumerate() {
                    if v == max {
                        labels[i] = MatchLabel::Positive(best_gt[i]);
                    }
                }
            }
        }
    }
    labels
}

/// `(anchor index, box, score)` of the proposals.
pub fn generate_proposals(
    objectness: &[f64],
    deltas: &[BoxDeltas],
    anchors: &AnchorSet,
    p: &ProposalParams,
) -> Vec<(usize, BBox, f64)> {
    let coder = BoxCoder::default();
    let (w, h) = (anchors.image_width as f64, anchors.image_height as f64);
    let mut all_boxes = Vec::new();
    let mut all_scores = Vec::new();
    let mut all_levels = Vec::new();
    let mut all_anchor = Vec::new();
    let mut start = 0;
    for (l, level) in anchors.levels.iter().enumerate() {
        let mut cands: Vec<usize> = Vec::new();
        for k in 0..level.boxes.len() {
            let i = start + k;
            let b = coder.decode_one(&level.boxes[k], &deltas[i]).unwrap().clip(w, h);
            if b.width() > p.min_size && b.height() > p.min_size {
                cands.push(i);
            }
        }
        let mut pool: BTreeSet<usize> = cands.into_iter().collect();
        let mut taken = 0;
        while taken < p.pre_nms {
            let Some(i) = best_of(&pool, objectness) else {
                break;
            };
            pool.remove(&i);
            let a = &level.boxes[i - start];
            all_boxes.push(coder.decode_one(a, &deltas[i]).unwrap().clip(w, h));
            all_scores.push(objectness[i]);
            all_levels.push(l);
            all_anchor.push(i);
            taken += 1;
        }
        start += level.boxes.len();
    }
    batched_nms(&all_boxes, &all_scores, &all_levels, p.nms_threshold, p.post_nms)
        .into_iter()
        .map(|k| (all_anchor[k], all_boxes[k], sigmoid(all_scores[k])))
        .collect()
}

/// Interpolated precision at each of 101 recall levels, maximized over every
/// rank whose recall reaches the level.
fn ap_from_ranking(tp: &[bool], num_gt: usize) -> f64 {
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let mut best = 0.0f64;
        let mut hits = 0usize;
        for (n, &t) in tp.iter().enumerate() {
            if t {
                hits += 1;
            }
            let recall = hits as f64 / num_gt as f64;
            if recall >= r {
                best = best.max(hits as f64 / (n + 1) as f64);
            }
        }
        total += best;
    }
    total / 101.0
}

pub fn category_ap(records: &[EvalRecord], category: usize, thr: f64) -> Option<f64> {
    let num_gt = records.iter().flat_map(|r| &r.ground_truth).filter(|g| g.1 == category).count();
    if num_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(f64, u64, String, usize, usize)> = Vec::new();
    for (ri, r) in records.iter().enumerate() {
        let mut idx: Vec<usize> = (0..r.predictions.len()).collect();
        idx.sort_by(|&a, &b| r.predictions[b].score.partial_cmp(&r.predictions[a].score).unwrap().then(a.cmp(&b)));
        for &pi in idx.iter().take(MAX_DETECTIONS_PER_IMAGE) {
            let p: &Detection = &r.predictions[pi];
            if p.category == category {
                ranked.push((p.score, r.image_id, r.query.clone(), ri, pi));
            }
        }
    }
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)).then(a.4.cmp(&b.4)));
    let mut used: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut tp = Vec::new();
    for (_, _, _, ri, pi) in &ranked {
        let p = &records[*ri].predictions[*pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in records[*ri].ground_truth.iter().enumerate() {
            if g.1 != category || used.contains(&(*ri, gi)) {
                continue;
            }
            let v = iou(&p.bbox, &g.0);
            if v >= thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            used.insert((*ri, gi));
        }
        tp.push(best.is_some());
    }
    Some(ap_from_ranking(&tp, num_gt))
}

pub fn mean_ap(records: &[EvalRecord], thr: f64) -> Option<f64> {
    let cats: BTreeSet<usize> = records.iter().flat_map(|r| r.ground_truth.iter().map(|g| g.1)).collect();
    let aps: Vec<f64> = cats.into_iter().filter_map(|c| category_ap(records, c, thr)).collect();
    if aps.is_empty() {
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    }
}

pub fn coco_map(records: &[EvalRecord]) -> Option<f64> {
    let mut total = 0.0;
    for k in 0..10 {
        total += mean_ap(records, 0.5 + 0.05 * k as f64)?;
    }
    Some(total / 10.0)
}

/// Library-versus-oracle comparisons over random instances.
pub mod suites {
    use findkit::detector::ProposalParams;
    use findkit::evalkit;
    use findkit::geometry::{self, generate_anchors, LevelSpec};
    use proptest::prelude::*;
    use proptest::test_runner::{Config, TestRunner};

    use super::super::{boxes_with_scores, eval_records, int_box};

    pub const NAMES: [&str; 6] = ["nms", "batched_nms", "match_targets", "generate_proposals", "ap", "map"];

    fn runner(cases: u32) -> TestRunner {
        TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() })
    }

    fn threshold() -> impl Strategy<Value = f64> {
        prop::sample::select(vec![0.0, 0.3, 0.5, 0.7, 1.0])
    }

    pub fn run(name: &str, cases: u32) -> Result<(), String> {
        let mut r = runner(cases);
        let out = match name {
            "nms" => r
                .run(&(boxes_with_scores(40, 24), threshold(), 0usize..50), |(bs, thr, max_out)| {
                    let (boxes, scores): (Vec<_>, Vec<_>) = bs.into_iter().unzip();
                    prop_assert_eq!(
                        geometry::nms(&boxes, &scores, thr, max_out),
                        super::nms(&boxes, &scores, thr, max_out)
                    );
                    Ok(())
                })
                .map_err(|e| e.to_string()),
            "batched_nms" => r
                .run(
                    &(
                        boxes_with_scores(40, 24).prop_flat_map(|bs| {
                            let n = bs.len();
                            (Just(bs), prop::collection::vec(0usize..3, n))
                        }),
                        threshold(),
                        0usize..50,
                    ),
                    |((bs, groups), thr, max_out)| {
                        let (boxes, scores): (Vec<_>, Vec<_>) = bs.into_iter().unzip();
                        prop_assert_eq!(
                            geometry::batched_nms(&boxes, &scores, &groups, thr, max_out),
                            super::batched_nms(&boxes, &scores, &groups, thr, max_out)
                        );
                        Ok(())
                    },
                )
                .map_err(|e| e.to_string()),
            "match_targets" => r
                .run(
                    &(
                        prop::collection::vec(int_box(24), 0..30),
                        prop::collection::vec(int_box(24), 0..5),
                        (0.0f64..1.0, 0.0f64..1.0),
                        any::<bool>(),
                    ),
                    |(cands, gt, (a, b), force)| {
                        let (pos, neg) = (a.max(b), a.min(b));
                        prop_assert_eq!(
                            geometry::match_targets(&cands, &gt, pos, neg, force).labels,
                            super::match_targets(&cands, &gt, pos, neg, force)
                        );
                        Ok(())
                    },
                )
                .map_err(|e| e.to_string()),
            "generate_proposals" => r
                .run(
                    &(
                        prop::sample::select(vec![32usize, 64]),
                        prop::sample::select(vec![vec![1.0], vec![0.5, 1.0, 2.0]]),
                        1.0f64..4.0,
                        any::<u64>(),
                        (1usize..60, 1usize..60, threshold(), 0.0f64..4.0),
                    ),
                    |(size, ratios, factor, seed, (pre_nms, post_nms, nms_threshold, min_size))| {
                        use rand::{Rng, SeedableRng};
                        let anchors = generate_anchors(size, size, &LevelSpec::pyramid(factor, &ratios)).unwrap();
                        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                        let n = anchors.len();
                        let obj: Vec<f64> = (0..n).map(|_| rng.gen_range(-4i32..4) as f64 / 2.0).collect();
                        let deltas: Vec<[f64; 4]> =
                            (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
                        let p = ProposalParams { pre_nms, post_nms, nms_threshold, min_size };
                        let got: Vec<_> = findkit::detector::generate_proposals(&obj, &deltas, &anchors, &p)
                            .into_iter()
                            .map(|q| (q.anchor, q.bbox, q.score))
                            .collect();
                        prop_assert_eq!(got, super::generate_proposals(&obj, &deltas, &anchors, &p));
                        Ok(())
                    },
                )
                .map_err(|e| e.to_string()),
            "ap" => r
                .run(&(eval_records(), 1usize..4, prop::sample::select(vec![0.5, 0.75, 0.9])), |(recs, c, thr)| {
                    let got = evalkit::category_ap(&recs, c, thr);
                    let want = super::category_ap(&recs, c, thr);
                    prop_assert_eq!(got.is_some(), want.is_some());
                    if let (Some(g), Some(w)) = (got, want) {
                        prop_assert!((g - w).abs() <= 1e-9, "ap {} vs oracle {}", g, w);
                    }
                    Ok(())
                })
                .map_err(|e| e.to_string()),
            "map" => r
                .run(&eval_records(), |recs| {
                    for (got, want) in [
                        (evalkit::average_precision(&recs, 0.5), super::mean_ap(&recs, 0.5)),
                        (evalkit::coco_map(&recs), super::coco_map(&recs)),
                    ] {
                        prop_assert_eq!(got.is_some(), want.is_some());
                        if let (Some(g), Some(w)) = (got, want) {
                            prop_assert!((g - w).abs() <= 1e-9, "map {} vs oracle {}", g, w);
                        }
                    }
                    Ok(())
                })
                .map_err(|e| e.to_string()),
            other => panic!("unknown oracle suite {other}"),
        };
        out
    }
}
