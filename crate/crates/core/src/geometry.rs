//! Boxes, anchors, delta coding, NMS and target matching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, corner convention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    /// From COCO `(x, y, w, h)`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.x2 >= self.x1 && self.y2 >= self.y1
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let (a, b) = (self.area(), other.area());
        if a <= 0.0 || b <= 0.0 {
            return 0.0;
        }
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        (inter / (a + b - inter)).clamp(0.0, 1.0)
    }
}

/// Dense row-major `a.len() × b.len()` IoU table.
#[derive(Clone, Debug, PartialEq)]
pub struct IouMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl IouMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn iou_matrix(a: &[BBox], b: &[BBox]) -> IouMatrix {
    let mut data = Vec::with_capacity(a.len() * b.len());
    for x in a {
        data.extend(b.iter().map(|y| x.iou(y)));
    }
    IouMatrix { rows: a.len(), cols: b.len(), data }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub stride: usize,
    /// Side length of the ratio-1 anchor.
    pub size: f64,
    /// Height / width ratios.
    pub aspect_ratios: Vec<f64>,
}

impl LevelSpec {
    /// Pyramid levels 2..=5 with base size `size_factor × stride`.
    pub fn pyramid(size_factor: f64, aspect_ratios: &[f64]) -> Vec<LevelSpec> {
        [4usize, 8, 16, 32]
            .iter()
            .map(|&stride| LevelSpec {
                stride,
                size: size_factor * stride as f64,
                aspect_ratios: aspect_ratios.to_vec(),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelAnchors {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub num_ratios: usize,
    /// Ordered by (row, column, ratio).
    pub boxes: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub image_width: usize,
    pub image_height: usize,
    pub levels: Vec<LevelAnchors>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.levels.iter().map(|l| l.boxes.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All anchors concatenated level by level.
    pub fn flat(&self) -> Vec<BBox> {
        self.levels.iter().flat_map(|l| l.boxes.iter().copied()).collect()
    }

    /// Start offset of each level in [`AnchorSet::flat`], plus the total at the end.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = vec![0];
        for l in &self.levels {
            out.push(out.last().unwrap() + l.boxes.len());
        }
        out
    }
}

pub fn generate_anchors(image_width: usize, image_height: usize, specs: &[LevelSpec]) -> Result<AnchorSet> {
    let max_stride = specs.iter().map(|s| s.stride).max().ok_or_else(|| Error::Config("no anchor levels".into()))?;
    if !image_width.is_multiple_of(max_stride) || !image_height.is_multiple_of(max_stride) {
        return Err(Error::Config(format!(
            "image size {image_width}x{image_height} is not divisible by the largest stride {max_stride}"
        )));
    }
    let levels = specs
        .iter()
        .map(|spec| {
            let (h, w) = (image_height / spec.stride, image_width / spec.stride);
            let shapes: Vec<(f64, f64)> =
                spec.aspect_ratios.iter().map(|&r| (spec.size / r.sqrt(), spec.size * r.sqrt())).collect();
            let s = spec.stride as f64;
            let mut boxes = Vec::with_capacity(h * w * shapes.len());
            for y in 0..h {
                for x in 0..w {
                    let (cx, cy) = (s * (x as f64 + 0.5), s * (y as f64 + 0.5));
                    for &(aw, ah) in &shapes {
                        boxes.push(BBox::new(cx - 0.5 * aw, cy - 0.5 * ah, cx + 0.5 * aw, cy + 0.5 * ah));
                    }
                }
            }
            LevelAnchors { stride: spec.stride, height: h, width: w, num_ratios: shapes.len(), boxes }
        })
        .collect();
    Ok(AnchorSet { image_width, image_height, levels })
}

/// `(dx, dy, dw, dh)` offsets before weighting.
pub type BoxDeltas = [f64; 4];

/// Standard two-stage parameterization with per-coordinate weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCoder {
    pub weights: [f64; 4],
    /// Upper bound on decoded `dw`, `dh` (log-space).
    pub scale_clamp: f64,
}

impl Default for BoxCoder {
    fn default() -> Self {
        BoxCoder { weights: [1.0; 4], scale_clamp: (1000.0f64 / 16.0).ln() }
    }
}

impl BoxCoder {
    pub fn with_weights(weights: [f64; 4]) -> Self {
        BoxCoder { weights, ..BoxCoder::default() }
    }

    fn check_anchor(a: &BBox) -> Result<()> {
        if !(a.width() > 0.0 && a.height() > 0.0) {
            return Err(Error::Geometry(format!("degenerate anchor {:?}", a.to_array())));
        }
        Ok(())
    }

    pub fn encode_one(&self, anchor: &BBox, target: &BBox) -> Result<BoxDeltas> {
        Self::check_anchor(anchor)?;
        let (aw, ah) = (anchor.width(), anchor.height());
        let (acx, acy) = anchor.center();
        let (tcx, tcy) = target.center();
        let [wx, wy, ww, wh] = self.weights;
        Ok([
            wx * (tcx - acx) / aw,
            wy * (tcy - acy) / ah,
            ww * (target.width() / aw).ln(),
            wh * (target.height() / ah).ln(),
        ])
    }

    pub fn decode_one(&self, anchor: &BBox, d: &BoxDeltas) -> Result<BBox> {
        Self::check_anchor(anchor)?;
        let (aw, ah) = (anchor.width(), anchor.height());
        let (acx, acy) = anchor.center();
        let [wx, wy, ww, wh] = self.weights;
        let cx = acx + d[0] / wx * aw;
        let cy = acy + d[1] / wy * ah;
        let w = aw * (d[2] / ww).min(self.scale_clamp).exp();
        let h = ah * (d[3] / wh).min(self.scale_clamp).exp();
        Ok(BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h))
    }

    pub fn encode(&self, anchors: &[BBox], targets: &[BBox]) -> Result<Vec<BoxDeltas>> {
        if anchors.len() != targets.len() {
            return Err(Error::Geometry(format!("{} anchors vs {} targets", anchors.len(), targets.len())));
        }
        anchors.iter().zip(targets).map(|(a, t)| self.encode_one(a, t)).collect()
    }

    /// Decodes and, when `clip_to` is `Some((w, h))`, clips to the image.
    pub fn decode(&self, anchors: &[BBox], deltas: &[BoxDeltas], clip_to: Option<(f64, f64)>) -> Result<Vec<BBox>> {
        if anchors.len() != deltas.len() {
            return Err(Error::Geometry(format!("{} anchors vs {} deltas", anchors.len(), deltas.len())));
        }
        anchors
            .iter()
            .zip(deltas)
            .map(|(a, d)| {
                let b = self.decode_one(a, d)?;
                Ok(match clip_to {
                    Some((w, h)) => b.clip(w, h),
                    None => b,
                })
            })
            .collect()
    }
}

/// Indices sorted by descending score; equal scores keep input order.
pub fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression. A box is dropped when its IoU with an
/// already kept box exceeds `iou_threshold`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64, max_out: usize) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores differ in length");
    let order = argsort_desc(scores);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if keep.len() >= max_out {
            break;
        }
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && boxes[i].iou(&boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// NMS applied independently within each group label; the merged result is
/// ordered by descending score.
pub fn batched_nms(boxes: &[BBox], scores: &[f64], groups: &[usize], iou_threshold: f64, max_out: usize) -> Vec<usize> {
    let mut by_group: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &g) in groups.iter().enumerate() {
        by_group.entry(g).or_default().push(i);
    }
    let mut kept = Vec::new();
    for idx in by_group.values() {
        let b: Vec<BBox> = idx.iter().map(|&i| boxes[i]).collect();
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        kept.extend(nms(&b, &s, iou_threshold, usize::MAX).into_iter().map(|k| idx[k]));
    }
    kept.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    kept.truncate(max_out);
    kept
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchLabel {
    /// Matched ground-truth index.
    Positive(usize),
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    pub labels: Vec<MatchLabel>,
}

impl MatchResult {
    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels.iter().enumerate().filter_map(|(i, l)| match l {
            MatchLabel::Positive(g) => Some((i, *g)),
            _ => None,
        })
    }

    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, l)| **l == MatchLabel::Negative).map(|(i, _)| i)
    }
}

/// Threshold matching. With `force_best_match`, every candidate attaining a
/// ground truth's (non-zero) maximum IoU becomes positive, matched to its own
/// best ground truth.
pub fn match_targets(
    candidates: &[BBox],
    gt: &[BBox],
    pos_iou: f64,
    neg_iou: f64,
    force_best_match: bool,
) -> MatchResult {
    assert!(pos_iou >= neg_iou, "match_targets: pos_iou < neg_iou");
    if gt.is_empty() {
        return MatchResult { labels: vec![MatchLabel::Negative; candidates.len()] };
    }
    let m = iou_matrix(candidates, gt);
    let best: Vec<(usize, f64)> = (0..candidates.len())
        .map(|i| {
            let row = m.row(i);
            let mut arg = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[arg] {
                    arg = j;
                }
            }
            (arg, row[arg])
        })
        .collect();
    let mut labels: Vec<MatchLabel> = best
        .iter()
        .map(|&(g, v)| {
            if v >= pos_iou {
                MatchLabel::Positive(g)
            } else if v < neg_iou {
                MatchLabel::Negative
            } else {
                MatchLabel::Ignore
            }
        })
        .collect();
    if force_best_match {
        for j in 0..gt.len() {
            let col_max = (0..candidates.len()).map(|i| m.get(i, j)).fold(0.0, f64::max);
            if col_max <= 0.0 {
                continue;
            }
            for i in 0..candidates.len() {
                if m.get(i, j) == col_max {
                    labels[i] = MatchLabel::Positive(best[i].0);
                }
            }
        }
    }
    MatchResult { labels }
}
