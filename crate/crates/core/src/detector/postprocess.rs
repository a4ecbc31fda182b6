use serde::{Deserialize, Serialize};

use super::InferConfig;
use crate::geometry::{argsort_desc, batched_nms, BBox};

/// One output box with its category (1..=K) and confidence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
}

/// How the head outputs are turned into detections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QueryMode {
    /// Per-class scores, per-class NMS.
    Detection,
    /// Foreground score, class-agnostic NMS.
    Localization,
    /// The single box maximizing foreground probability × objectness.
    Referring,
}

/// Serialized form: `{image_id, query, boxes, scores, categories}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub query: String,
    pub boxes: Vec<[f64; 4]>,
    pub scores: Vec<f64>,
    pub categories: Vec<usize>,
}

impl DetectionRecord {
    pub fn new(image_id: u64, query: &str, dets: &[Detection]) -> Self {
        DetectionRecord {
            image_id,
            query: query.to_string(),
            boxes: dets.iter().map(|d| d.bbox.to_array()).collect(),
            scores: dets.iter().map(|d| d.score).collect(),
            categories: dets.iter().map(|d| d.category).collect(),
        }
    }

    pub fn detections(&self) -> Vec<Detection> {
        self.boxes
            .iter()
            .zip(&self.scores)
            .zip(&self.categories)
            .map(|((b, &score), &category)| Detection { bbox: BBox::new(b[0], b[1], b[2], b[3]), category, score })
            .collect()
    }
}

pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<Vec<f64>> {
    logits
        .chunks(k)
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

fn argmax_fg(p: &[f64]) -> usize {
    let mut best = 1;
    for c in 2..p.len() {
        if p[c] > p[best] {
            best = c;
        }
    }
    best
}

/// `probs[i]` are class probabilities (background first) for the refined box
/// `boxes[i]`, whose proposal had objectness `objectness[i]`.
pub fn postprocess(
    boxes: &[BBox],
    probs: &[Vec<f64>],
    objectness: &[f64],
    mode: QueryMode,
    cfg: &InferConfig,
) -> Vec<Detection> {
    let thr = cfg.score_threshold;
    match mode {
        QueryMode::Detection => {
            let mut cand = Vec::new();
            for (i, p) in probs.iter().enumerate() {
                for (c, &s) in p.iter().enumerate().skip(1) {
                    if s >= thr && s > 0.0 && boxes[i].area() > 0.0 {
                        cand.push(Detection { bbox: boxes[i], category: c, score: s });
                    }
                }
            }
            let b: Vec<BBox> = cand.iter().map(|d| d.bbox).collect();
            let s: Vec<f64> = cand.iter().map(|d| d.score).collect();
            let groups: Vec<usize> = cand.iter().map(|d| d.category).collect();
            batched_nms(&b, &s, &groups, cfg.nms_threshold, cfg.max_detections).into_iter().map(|k| cand[k]).collect()
        }
        QueryMode::Localization => {
            let cand: Vec<Detection> = probs
                .iter()
                .enumerate()
                .map(|(i, p)| Detection { bbox: boxes[i], category: argmax_fg(p), score: 1.0 - p[0] })
                .filter(|d| d.score >= thr && d.score > 0.0 && d.bbox.area() > 0.0)
                .collect();
            let b: Vec<BBox> = cand.iter().map(|d| d.bbox).collect();
            let s: Vec<f64> = cand.iter().map(|d| d.score).collect();
            let groups = vec![0; cand.len()];
            batched_nms(&b, &s, &groups, cfg.nms_threshold, cfg.max_detections).into_iter().map(|k| cand[k]).collect()
        }
        QueryMode::Referring => {
            let scores: Vec<f64> = probs.iter().zip(objectness).map(|(p, &o)| (1.0 - p[0]) * o).collect();
            argsort_desc(&scores)
                .into_iter()
                .find(|&i| boxes[i].area() > 0.0)
                .filter(|&i| scores[i] >= thr && scores[i] > 0.0)
                .map(|i| vec![Detection { bbox: boxes[i], category: argmax_fg(&probs[i]), score: scores[i] }])
                .unwrap_or_default()
        }
    }
}
