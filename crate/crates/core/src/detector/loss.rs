use findkit_autograd::{Graph, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{HeadOutput, RoiHeadConfig, RpnConfig, RpnOutput};
use crate::geometry::{match_targets, BBox, BoxCoder, MatchLabel};

/// Loss components; `total` is their plain sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub box_cls: f64,
    pub box_reg: f64,
    pub total: f64,
}

impl LossReport {
    pub fn add(&mut self, o: &LossReport) {
        self.rpn_cls += o.rpn_cls;
        self.rpn_reg += o.rpn_reg;
        self.box_cls += o.box_cls;
        self.box_reg += o.box_reg;
        self.total += o.total;
    }

    pub fn scaled(mut self, c: f64) -> LossReport {
        self.rpn_cls *= c;
        self.rpn_reg *= c;
        self.box_cls *= c;
        self.box_reg *= c;
        self.total *= c;
        self
    }

    pub fn is_finite(&self) -> bool {
        [self.rpn_cls, self.rpn_reg, self.box_cls, self.box_reg, self.total].iter().all(|v| v.is_finite())
    }
}

/// Subsamples labelled candidates: at most `fraction × batch` positives, the
/// rest negatives. Returns sorted indices of chosen positives and negatives.
pub fn sample_labels<R: Rng>(
    labels: &[MatchLabel],
    batch: usize,
    fraction: f64,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let mut pos: Vec<usize> =
        labels.iter().enumerate().filter(|(_, l)| matches!(l, MatchLabel::Positive(_))).map(|(i, _)| i).collect();
    let mut neg: Vec<usize> =
        labels.iter().enumerate().filter(|(_, l)| **l == MatchLabel::Negative).map(|(i, _)| i).collect();
    let num_pos = pos.len().min((batch as f64 * fraction) as usize);
    let num_neg = neg.len().min(batch - num_pos);
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(num_pos);
    neg.truncate(num_neg);
    pos.sort_unstable();
    neg.sort_unstable();
    (pos, neg)
}

/// Sampled anchors with binary labels and regression targets for positives.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RpnTargets {
    pub labels: Vec<(usize, f64)>,
    pub regression: Vec<(usize, Vec<f64>)>,
    pub normalizer: f64,
}

pub fn rpn_targets<R: Rng>(anchors: &[BBox], gt: &[BBox], cfg: &RpnConfig, rng: &mut R) -> RpnTargets {
    let m = match_targets(anchors, gt, cfg.pos_iou, cfg.neg_iou, true);
    let (pos, neg) = sample_labels(&m.labels, cfg.batch_per_image, cfg.positive_fraction, rng);
    let coder = BoxCoder::default();
    let mut labels: Vec<(usize, f64)> = pos.iter().map(|&i| (i, 1.0)).chain(neg.iter().map(|&i| (i, 0.0))).collect();
    labels.sort_by_key(|l| l.0);
    let regression = pos
        .iter()
        .map(|&i| {
            let MatchLabel::Positive(g) = m.labels[i] else { unreachable!() };
            (i, coder.encode_one(&anchors[i], &gt[g]).expect("anchors are non-degenerate").to_vec())
        })
        .collect();
    RpnTargets { labels, regression, normalizer: cfg.batch_per_image as f64 }
}

/// Sampled RoIs (proposals plus ground truth) with class labels (0 =
/// background) and regression targets for foreground rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoiTargets {
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
    pub regression: Vec<(usize, Vec<f64>)>,
}

pub fn roi_targets<R: Rng>(
    proposals: &[BBox],
    gt: &[BBox],
    gt_classes: &[usize],
    cfg: &RoiHeadConfig,
    rng: &mut R,
) -> RoiTargets {
    let mut cands: Vec<BBox> = proposals.to_vec();
    cands.extend_from_slice(gt);
    let m = match_targets(&cands, gt, cfg.fg_iou, cfg.bg_iou, false);
    let (pos, neg) = sample_labels(&m.labels, cfg.batch_per_image, cfg.positive_fraction, rng);
    let coder = BoxCoder::with_weights(cfg.bbox_weights);
    let mut out = RoiTargets::default();
    for &i in pos.iter().chain(&neg) {
        let row = out.boxes.len();
        out.boxes.push(cands[i]);
        match m.labels[i] {
            MatchLabel::Positive(g) => {
                out.classes.push(gt_classes[g]);
                let d = coder.encode_one(&cands[i], &gt[g]).expect("positive boxes overlap their target");
                out.regression.push((row, d.to_vec()));
            }
            _ => out.classes.push(0),
        }
    }
    out
}

fn zero<T: Scalar>(g: &mut Graph<T>) -> Var {
    g.constant(Tensor::scalar(T::zero()))
}

/// The four shared losses. Nothing here depends on which task produced the
/// example.
pub fn detection_loss<T: Scalar>(
    g: &mut Graph<T>,
    rpn: &RpnOutput,
    head: Option<&HeadOutput>,
    rpn_t: &RpnTargets,
    roi_t: &RoiTargets,
    rpn_cfg: &RpnConfig,
    roi_cfg: &RoiHeadConfig,
) -> (Var, LossReport) {
    let (rpn_cls, rpn_reg) = if rpn_t.labels.is_empty() {
        (zero(g), zero(g))
    } else {
        (
            g.sigmoid_bce(rpn.objectness, &rpn_t.labels, rpn_t.normalizer),
            if rpn_t.regression.is_empty() {
                zero(g)
            } else {
                g.smooth_l1(rpn.deltas, &rpn_t.regression, rpn_cfg.smooth_l1_beta, rpn_t.normalizer)
            },
        )
    };
    let (box_cls, box_reg) = match head {
        Some(h) if !roi_t.classes.is_empty() => {
            let n = roi_t.classes.len() as f64;
            let labels: Vec<(usize, usize)> = roi_t.classes.iter().copied().enumerate().collect();
            let cls = g.softmax_ce(h.logits, &labels, n);
            let reg = if roi_t.regression.is_empty() {
                zero(g)
            } else {
                g.smooth_l1(h.deltas, &roi_t.regression, roi_cfg.smooth_l1_beta, n)
            };
            (cls, reg)
        }
        _ => (zero(g), zero(g)),
    };
    let a = g.add(rpn_cls, rpn_reg);
    let b = g.add(box_cls, box_reg);
    let total = g.add(a, b);
    let v = |g: &Graph<T>, x: Var| g.value(x).item().as_f64();
    let report = LossReport {
        rpn_cls: v(g, rpn_cls),
        rpn_reg: v(g, rpn_reg),
        box_cls: v(g, box_cls),
        box_reg: v(g, box_reg),
        total: v(g, total),
    };
    (total, report)
}
