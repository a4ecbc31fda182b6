//! Region proposal network, RoI feature extraction, box head, losses and
//! post-processing.

mod loss;
mod postprocess;

pub use loss::{detection_loss, roi_targets, rpn_targets, sample_labels, LossReport, RoiTargets, RpnTargets};
pub use postprocess::{postprocess, softmax_rows, Detection, DetectionRecord, QueryMode};

use findkit_autograd::{Graph, RoiSample, Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::fusion::{map_to_seq, FusedPyramid};
use crate::geometry::{argsort_desc, batched_nms, AnchorSet, BBox, BoxCoder, BoxDeltas};
use crate::imenc::LEVEL_STRIDES;
use crate::nn::{Conv, Init, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpnConfig {
    pub aspect_ratios: Vec<f64>,
    /// Anchor side = factor × stride.
    pub anchor_size_factor: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub batch_per_image: usize,
    pub positive_fraction: f64,
    pub pre_nms_train: usize,
    pub post_nms_train: usize,
    pub pre_nms_test: usize,
    pub post_nms_test: usize,
    pub nms_threshold: f64,
    pub min_size: f64,
    pub smooth_l1_beta: f64,
}

impl Default for RpnConfig {
    fn default() -> Self {
        RpnConfig {
            aspect_ratios: vec![0.5, 1.0, 2.0],
            anchor_size_factor: 4.0,
            pos_iou: 0.7,
            neg_iou: 0.3,
            batch_per_image: 256,
            positive_fraction: 0.5,
            pre_nms_train: 256,
            post_nms_train: 64,
            pre_nms_test: 256,
            post_nms_test: 64,
            nms_threshold: 0.7,
            min_size: 0.0,
            smooth_l1_beta: 1.0 / 9.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiHeadConfig {
    pub out_size: usize,
    pub sampling_ratio: usize,
    pub batch_per_image: usize,
    pub positive_fraction: f64,
    pub fg_iou: f64,
    pub bg_iou: f64,
    pub hidden: usize,
    pub canonical_size: f64,
    pub canonical_level: usize,
    pub bbox_weights: [f64; 4],
    pub smooth_l1_beta: f64,
}

impl Default for RoiHeadConfig {
    fn default() -> Self {
        RoiHeadConfig {
            out_size: 7,
            sampling_ratio: 2,
            batch_per_image: 32,
            positive_fraction: 0.25,
            fg_iou: 0.5,
            bg_iou: 0.5,
            hidden: 256,
            canonical_size: 224.0,
            canonical_level: 4,
            bbox_weights: [10.0, 10.0, 5.0, 5.0],
            smooth_l1_beta: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { score_threshold: 0.05, nms_threshold: 0.5, max_detections: 100 }
    }
}

/// Per-anchor outputs concatenated over levels in anchor order.
#[derive(Clone, Debug)]
pub struct RpnOutput {
    /// `[N, 1]` logits.
    pub objectness: Var,
    /// `[N, 4]`.
    pub deltas: Var,
    /// Level start offsets plus the total.
    pub offsets: Vec<usize>,
}

/// Shared 3×3 conv + ReLU followed by 1×1 objectness and delta convolutions.
#[derive(Clone, Debug)]
pub struct RpnHead {
    pub conv: Conv,
    pub objectness: Conv,
    pub deltas: Conv,
    pub num_anchors: usize,
}

impl RpnHead {
    pub fn new<T: Scalar>(init: &mut Init<T>, dim: usize, num_anchors: usize) -> Self {
        let mut s = init.sub("rpn");
        RpnHead {
            conv: Conv::with_std(&mut s, "conv", dim, dim, 3, 1, true, 0.01f64.max((1.0 / (9 * dim) as f64).sqrt())),
            objectness: Conv::with_std(&mut s, "objectness", dim, num_anchors, 1, 1, true, 0.01),
            deltas: Conv::with_std(&mut s, "deltas", dim, 4 * num_anchors, 1, 1, true, 0.01),
            num_anchors,
        }
    }

    /// Per-level `(objectness [H·W·A, 1], deltas [H·W·A, 4])`, anchors ordered (y, x, a).
    pub fn forward_level<T: Scalar>(&self, g: &mut Graph<T>, p: Var) -> (Var, Var) {
        let h = self.conv.forward(g, p);
        let h = g.relu(h);
        let o = self.objectness.forward(g, h);
        let d = self.deltas.forward(g, h);
        let (hh, ww) = (g.shape(p)[1], g.shape(p)[2]);
        let n = hh * ww * self.num_anchors;
        let o = map_to_seq(g, o);
        let o = g.reshape(o, &[n, 1]);
        let d = map_to_seq(g, d);
        let d = g.reshape(d, &[n, 4]);
        (o, d)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, pyramid: &FusedPyramid) -> RpnOutput {
        let mut objs = Vec::with_capacity(4);
        let mut dels = Vec::with_capacity(4);
        let mut offsets = vec![0];
        for &p in &pyramid.levels {
            let (o, d) = self.forward_level(g, p);
            offsets.push(offsets.last().unwrap() + g.shape(o)[0]);
            objs.push(o);
            dels.push(d);
        }
        RpnOutput { objectness: g.concat_rows(&objs), deltas: g.concat_rows(&dels), offsets }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    /// Sigmoid of the objectness logit.
    pub score: f64,
    pub anchor: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProposalParams {
    pub pre_nms: usize,
    pub post_nms: usize,
    pub nms_threshold: f64,
    pub min_size: f64,
}

impl RpnConfig {
    pub fn proposal_params(&self, training: bool) -> ProposalParams {
        let (pre_nms, post_nms) =
            if training { (self.pre_nms_train, self.post_nms_train) } else { (self.pre_nms_test, self.post_nms_test) };
        ProposalParams { pre_nms, post_nms, nms_threshold: self.nms_threshold, min_size: self.min_size }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Decode, clip, drop boxes not larger than `min_size`, keep the `pre_nms`
/// best per level, NMS within each level, then the `post_nms` best overall.
/// Ties in objectness fall back to anchor order.
pub fn generate_proposals(
    objectness: &[f64],
    deltas: &[BoxDeltas],
    anchors: &AnchorSet,
    params: &ProposalParams,
) -> Vec<Proposal> {
    let coder = BoxCoder::default();
    let (iw, ih) = (anchors.image_width as f64, anchors.image_height as f64);
    let offsets = anchors.offsets();
    let mut boxes = Vec::new();
    let mut logits = Vec::new();
    let mut anchor_idx = Vec::new();
    let mut levels = Vec::new();
    for (l, level) in anchors.levels.iter().enumerate() {
        let mut cand: Vec<(usize, BBox)> = Vec::new();
        for (k, a) in level.boxes.iter().enumerate() {
            let i = offsets[l] + k;
            let b = coder.decode_one(a, &deltas[i]).expect("anchors are non-degenerate").clip(iw, ih);
            if b.width() > params.min_size && b.height() > params.min_size {
                cand.push((i, b));
            }
        }
        let scores: Vec<f64> = cand.iter().map(|&(i, _)| objectness[i]).collect();
        for &c in argsort_desc(&scores).iter().take(params.pre_nms) {
            let (i, b) = cand[c];
            boxes.push(b);
            logits.push(objectness[i]);
            anchor_idx.push(i);
            levels.push(l);
        }
    }
    batched_nms(&boxes, &logits, &levels, params.nms_threshold, params.post_nms)
        .into_iter()
        .map(|k| Proposal { bbox: boxes[k], score: sigmoid(logits[k]), anchor: anchor_idx[k] })
        .collect()
}

/// Pyramid index (0 for P2) for a box under the size-based assignment rule.
pub fn assign_level(b: &BBox, canonical_size: f64, canonical_level: usize) -> usize {
    let s = b.area().sqrt();
    let k = (canonical_level as f64 + (s / canonical_size + 1e-8).log2()).floor();
    (k.clamp(2.0, 5.0) as usize) - 2
}

/// RoIAlign features `[N, D·out·out]` for boxes in image pixels.
pub fn roi_extract<T: Scalar>(g: &mut Graph<T>, pyramid: &FusedPyramid, boxes: &[BBox], cfg: &RoiHeadConfig) -> Var {
    let rois: Vec<RoiSample> = boxes
        .iter()
        .map(|b| {
            let level = assign_level(b, cfg.canonical_size, cfg.canonical_level);
            let s = LEVEL_STRIDES[level] as f64;
            RoiSample { level, x1: b.x1 / s, y1: b.y1 / s, x2: b.x2 / s, y2: b.y2 / s }
        })
        .collect();
    g.roi_align(&pyramid.levels, &rois, cfg.out_size, cfg.sampling_ratio)
}

#[derive(Clone, Debug)]
pub struct HeadOutput {
    /// `[N, K+1]`, background at column 0.
    pub logits: Var,
    /// `[N, 4]` class-agnostic.
    pub deltas: Var,
}

/// Two hidden FC layers, then class logits and class-agnostic deltas.
#[derive(Clone, Debug)]
pub struct BoxHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub cls: Linear,
    pub reg: Linear,
    pub num_classes: usize,
}

impl BoxHead {
    pub fn new<T: Scalar>(init: &mut Init<T>, in_dim: usize, hidden: usize, num_classes: usize) -> Self {
        let mut s = init.sub("box_head");
        BoxHead {
            fc1: Linear::with_std(&mut s, "fc1", in_dim, hidden, true, (2.0 / in_dim as f64).sqrt()),
            fc2: Linear::with_std(&mut s, "fc2", hidden, hidden, true, (2.0 / hidden as f64).sqrt()),
            cls: Linear::with_std(&mut s, "cls", hidden, num_classes + 1, true, 0.01),
            reg: Linear::with_std(&mut s, "reg", hidden, 4, true, 0.001),
            num_classes,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, roi_features: Var) -> HeadOutput {
        let h = self.fc1.forward(g, roi_features);
        let h = g.relu(h);
        let h = self.fc2.forward(g, h);
        let h = g.relu(h);
        HeadOutput { logits: self.cls.forward(g, h), deltas: self.reg.forward(g, h) }
    }
}
