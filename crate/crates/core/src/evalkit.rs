//! precision@1, AP at an IoU threshold, and COCO-style mAP.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const MAX_DETECTIONS_PER_IMAGE: usize = 100;
const RECALL_POINTS: usize = 101;

/// Predictions and ground truth for one (image, query) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: u64,
    pub query: String,
    pub predictions: Vec<Detection>,
    pub ground_truth: Vec<(BBox, usize)>,
}

impl EvalRecord {
    /// Sorts predictions by descending confidence (stable).
    pub fn new(image_id: u64, query: &str, mut predictions: Vec<Detection>, ground_truth: Vec<(BBox, usize)>) -> Self {
        predictions.sort_by(|a, b| b.score.total_cmp(&a.score));
        EvalRecord { image_id, query: query.to_string(), predictions, ground_truth }
    }
}

/// Fraction of records whose top prediction overlaps the single ground truth
/// at IoU ≥ 0.5. Records without predictions count as misses.
pub fn precision_at_1(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Eval("precision@1 over an empty record set".into()));
    }
    let mut hits = 0usize;
    for r in records {
        if r.ground_truth.len() != 1 {
            return Err(Error::Eval(format!(
                "record ({}, {:?}) has {} ground-truth boxes, precision@1 needs exactly one",
                r.image_id,
                r.query,
                r.ground_truth.len()
            )));
        }
        let top = r.predictions.iter().fold(None::<&Detection>, |best, p| match best {
            Some(b) if b.score >= p.score => Some(b),
            _ => Some(p),
        });
        if top.is_some_and(|p| p.bbox.iou(&r.ground_truth[0].0) >= 0.5) {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// AP of one category, or `None` when it has no ground truth.
pub fn category_ap(records: &[EvalRecord], category: usize, iou_threshold: f64) -> Option<f64> {
    let num_gt: usize = records.iter().map(|r| r.ground_truth.iter().filter(|g| g.1 == category).count()).sum();
    if num_gt == 0 {
        return None;
    }
    // (score, image key, record, prediction)
    let mut preds: Vec<(f64, (u64, &str), usize, usize)> = Vec::new();
    for (ri, r) in records.iter().enumerate() {
        let mut own: Vec<usize> = (0..r.predictions.len()).collect();
        own.sort_by(|&a, &b| r.predictions[b].score.total_cmp(&r.predictions[a].score).then(a.cmp(&b)));
        own.truncate(MAX_DETECTIONS_PER_IMAGE);
        for pi in own {
            if r.predictions[pi].category == category {
                preds.push((r.predictions[pi].score, (r.image_id, r.query.as_str()), ri, pi));
            }
        }
    }
    preds.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)).then(a.3.cmp(&b.3)));
    let mut matched: Vec<Vec<bool>> = records.iter().map(|r| vec![false; r.ground_truth.len()]).collect();
    let mut tp = Vec::with_capacity(preds.len());
    for &(_, _, ri, pi) in &preds {
        let p = &records[ri].predictions[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in records[ri].ground_truth.iter().enumerate() {
            if g.1 != category || matched[ri][gi] {
                continue;
            }
            let iou = p.bbox.iou(&g.0);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            matched[ri][gi] = true;
        }
        tp.push(best.is_some());
    }
    Some(interpolated_ap(&tp, num_gt))
}

/// 101-point interpolated area under the precision-recall curve of a ranked
/// true/false-positive sequence.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let (mut ctp, mut cfp) = (0usize, 0usize);
    for &t in tp {
        if t {
            ctp += 1;
        } else {
            cfp += 1;
        }
        precision.push(ctp as f64 / (ctp + cfp) as f64);
        recall.push(ctp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

fn categories(records: &[EvalRecord]) -> BTreeSet<usize> {
    records.iter().flat_map(|r| r.ground_truth.iter().map(|g| g.1)).collect()
}

/// Mean AP over categories with ground truth; `None` when there is none.
pub fn average_precision(records: &[EvalRecord], iou_threshold: f64) -> Option<f64> {
    let aps: Vec<f64> =
        categories(records).into_iter().filter_map(|c| category_ap(records, c, iou_threshold)).collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

/// Mean of [`average_precision`] over IoU 0.50:0.05:0.95.
pub fn coco_map(records: &[EvalRecord]) -> Option<f64> {
    let aps: Option<Vec<f64>> = coco_thresholds().iter().map(|&t| average_precision(records, t)).collect();
    aps.map(|a| a.iter().sum::<f64>() / a.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub num_records: usize,
    pub precision_at_1: Option<f64>,
    pub ap50: Option<f64>,
    pub map: Option<f64>,
    /// Category name → AP50.
    pub per_category_ap50: BTreeMap<String, Option<f64>>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut rows: Vec<(String, String)> = vec![
            ("task".into(), self.task.clone()),
            ("records".into(), self.num_records.to_string()),
            ("precision@1".into(), fmt(self.precision_at_1)),
            ("AP50".into(), fmt(self.ap50)),
            ("mAP".into(), fmt(self.map)),
        ];
        for (name, ap) in &self.per_category_ap50 {
            rows.push((format!("AP50[{name}]"), fmt(*ap)));
        }
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<w$}  {v:>10}");
        }
        out
    }
}
