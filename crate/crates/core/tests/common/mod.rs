#![allow(dead_code)]

pub mod grads;
pub mod oracles;
pub mod props;
pub mod train;

use findkit::detector::Detection;
use findkit::evalkit::EvalRecord;
use findkit::geometry::BBox;
use findkit::train::config::parse_kv;
use findkit::train::{Splits, TrainConfig};
use proptest::prelude::*;

/// Integer-cornered box inside `[0, size]²` with positive area.
pub fn int_box(size: u32) -> impl Strategy<Value = BBox> {
    (0..size, 0..size, 1..=size, 1..=size).prop_map(move |(x, y, w, h)| {
        let x2 = (x + w).min(size).max(x + 1);
        let y2 = (y + h).min(size).max(y + 1);
        BBox::new(x as f64, y as f64, x2 as f64, y2 as f64)
    })
}

/// Scores from a small set so ties are common.
pub fn tied_score() -> impl Strategy<Value = f64> {
    (0u8..8).prop_map(|s| s as f64 / 8.0)
}

pub fn boxes_with_scores(max: usize, size: u32) -> impl Strategy<Value = Vec<(BBox, f64)>> {
    prop::collection::vec((int_box(size), tied_score()), 0..max)
}

/// Records with 1..4 categories, predictions jittered around the ground truth
/// plus clutter, and scores from a coarse grid.
pub fn eval_records() -> impl Strategy<Value = Vec<EvalRecord>> {
    let record = (
        prop::collection::vec((int_box(32), 1usize..4), 0..4),
        prop::collection::vec((int_box(32), 1usize..4, tied_score()), 0..6),
        prop::collection::vec((0usize..4, -2i32..=2, -2i32..=2, 1usize..4, tied_score()), 0..4),
        0u64..3,
        prop::sample::select(vec!["a", "b"]),
    )
        .prop_map(|(gt, clutter, near, image_id, query)| {
            let mut preds: Vec<Detection> =
                clutter.into_iter().map(|(b, category, score)| Detection { bbox: b, category, score }).collect();
            for (gi, dx, dy, category, score) in near {
                if let Some((b, _)) = gt.get(gi) {
                    let s = |v: f64, d: i32| v + d as f64;
                    let bbox = BBox::new(
                        s(b.x1, dx),
                        s(b.y1, dy),
                        s(b.x2, dx).max(s(b.x1, dx) + 1.0),
                        s(b.y2, dy).max(s(b.y1, dy) + 1.0),
                    );
                    preds.push(Detection { bbox, category, score });
                }
            }
            EvalRecord::new(image_id, query, preds, gt)
        });
    prop::collection::vec(record, 1..6)
}

/// Toy-profile config scaled down for quick training tests; `extra` lines
/// override the defaults.
pub fn small_config(extra: &str) -> TrainConfig {
    let mut kv = parse_kv(
        "profile = toy\nsteps = 20\nbatch_size = 3\ntrain_scenes = 8\nval_scenes = 4\nlog_every = 0\neval_every = 0\ncheckpoint_every = 0\nrpn_batch = 32\nroi_batch = 16\n",
    )
    .unwrap();
    kv.extend(parse_kv(extra).expect("valid override lines"));
    let text: String = kv.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    TrainConfig::parse(&text).expect("valid test config")
}

pub fn small_splits(cfg: &TrainConfig) -> Splits {
    Splits::from_config(cfg).expect("synthetic splits")
}
