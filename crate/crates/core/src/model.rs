//! The full network: text and image encoders, fusion, RPN and box head.

use findkit_autograd::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{
    detection_loss, generate_proposals, postprocess, roi_extract, roi_targets, rpn_targets, softmax_rows, BoxHead,
    Detection, InferConfig, LossReport, QueryMode, RoiHeadConfig, RpnConfig, RpnHead,
};
use crate::error::{Error, Result};
use crate::fusion::{FusedPyramid, Fusion, FusionConfig};
use crate::geometry::{generate_anchors, AnchorSet, BBox, BoxCoder, LevelSpec};
use crate::imenc::{BackboneConfig, ImageEncoder, ImageTensor};
use crate::nn::{Init, GROUP_DETECTOR, GROUP_FUSION, GROUP_IMAGE, GROUP_TEXT};
use crate::textenc::{TextConfig, TextEncoder, TextFeatures, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub text: TextConfig,
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    pub rpn: RpnConfig,
    pub roi: RoiHeadConfig,
    pub infer: InferConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 128,
            num_classes: crate::datakit::NUM_CATEGORIES,
            text: TextConfig::default(),
            backbone: BackboneConfig::default(),
            fusion: FusionConfig::default(),
            rpn: RpnConfig::default(),
            roi: RoiHeadConfig::default(),
            infer: InferConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn level_specs(&self) -> Vec<LevelSpec> {
        LevelSpec::pyramid(self.rpn.anchor_size_factor, &self.rpn.aspect_ratios)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(Error::Config(format!("image_size {} is not a positive multiple of 32", self.image_size)));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if !self.text.dim.is_multiple_of(self.text.heads) {
            return Err(Error::Config(format!(
                "text dim {} not divisible by {} heads",
                self.text.dim, self.text.heads
            )));
        }
        self.fusion.validate()
    }
}

/// Image, tokens and targets ready for the network.
#[derive(Clone, Debug)]
pub struct PreparedExample {
    pub image: ImageTensor,
    pub tokens: TokenSequence,
    pub targets: Vec<(BBox, usize)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub fusion: Fusion,
    pub rpn: RpnHead,
    pub head: BoxHead,
    pub anchors: AnchorSet,
}

impl Model {
    /// Builds the network and registers freshly initialized parameters in `store`.
    pub fn new<T: Scalar>(
        config: &ModelConfig,
        vocab_size: usize,
        store: &mut ParamStore<T>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = TextEncoder::new(&mut Init::new(store, &mut rng, GROUP_TEXT, "text"), vocab_size, &config.text)?;
        let image = ImageEncoder::new(&mut Init::new(store, &mut rng, GROUP_IMAGE, "image"), &config.backbone)?;
        let fusion = Fusion::new(
            &mut Init::new(store, &mut rng, GROUP_FUSION, "fusion"),
            config.backbone.channels,
            config.text.dim,
            &config.fusion,
        )?;
        let mut det = Init::new(store, &mut rng, GROUP_DETECTOR, "detector");
        let rpn = RpnHead::new(&mut det, config.fusion.dim, config.rpn.aspect_ratios.len());
        let roi_dim = config.fusion.dim * config.roi.out_size * config.roi.out_size;
        let head = BoxHead::new(&mut det, roi_dim, config.roi.hidden, config.num_classes);
        let anchors = generate_anchors(config.image_size, config.image_size, &config.level_specs())?;
        Ok(Model { config: config.clone(), vocab_size, text, image, fusion, rpn, head, anchors })
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        if image.height() != self.config.image_size || image.width() != self.config.image_size {
            return Err(Error::Shape(format!(
                "model expects {0}x{0} images, got {1}x{2}",
                self.config.image_size,
                image.width(),
                image.height()
            )));
        }
        Ok(())
    }

    /// Encoder and fusion forward pass. Trailing padding is trimmed first.
    pub fn features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        image: &ImageTensor,
        tokens: &TokenSequence,
    ) -> Result<FusedPyramid> {
        self.check_image(image)?;
        let tokens = tokens.trimmed();
        if tokens.num_tokens() == 0 {
            return Err(Error::EmptyQuery);
        }
        let text: TextFeatures = self.text.encode(g, &tokens)?;
        let img = g.constant(image.data.cast::<T>());
        let feats = self.image.encode(g, img)?;
        self.fusion.forward(g, &feats, &text)
    }

    /// Builds the shared detection loss for one example. The caller's rng
    /// drives anchor and RoI sampling.
    pub fn loss<T: Scalar, R: Rng>(
        &self,
        g: &mut Graph<T>,
        ex: &PreparedExample,
        rng: &mut R,
    ) -> Result<(Var, LossReport)> {
        let pyramid = self.features(g, &ex.image, &ex.tokens)?;
        let rpn_out = self.rpn.forward(g, &pyramid);
        let flat = self.anchors.flat();
        let gt: Vec<BBox> = ex.targets.iter().map(|t| t.0).collect();
        let gt_classes: Vec<usize> = ex.targets.iter().map(|t| t.1).collect();
        let rpn_t = rpn_targets(&flat, &gt, &self.config.rpn, rng);

        let (obj, deltas) = rpn_values(g, rpn_out.objectness, rpn_out.deltas);
        let proposals = generate_proposals(&obj, &deltas, &self.anchors, &self.config.rpn.proposal_params(true));
        let prop_boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        let roi_t = roi_targets(&prop_boxes, &gt, &gt_classes, &self.config.roi, rng);
        let head = if roi_t.boxes.is_empty() {
            None
        } else {
            let feats = roi_extract(g, &pyramid, &roi_t.boxes, &self.config.roi);
            Some(self.head.forward(g, feats))
        };
        Ok(detection_loss(g, &rpn_out, head.as_ref(), &rpn_t, &roi_t, &self.config.rpn, &self.config.roi))
    }

    /// Full inference pipeline in `f32`.
    pub fn infer(
        &self,
        params: &ParamStore<f32>,
        image: &ImageTensor,
        tokens: &TokenSequence,
        mode: QueryMode,
        cfg: &InferConfig,
    ) -> Result<Vec<Detection>> {
        let mut g = Graph::new(params);
        let pyramid = self.features(&mut g, image, tokens)?;
        let rpn_out = self.rpn.forward(&mut g, &pyramid);
        let (obj, deltas) = rpn_values(&g, rpn_out.objectness, rpn_out.deltas);
        let proposals = generate_proposals(&obj, &deltas, &self.anchors, &self.config.rpn.proposal_params(false));
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        let feats = roi_extract(&mut g, &pyramid, &boxes, &self.config.roi);
        let head = self.head.forward(&mut g, feats);
        let logits: Vec<f64> = g.value(head.logits).data().iter().map(|&v| v as f64).collect();
        let probs = softmax_rows(&logits, self.config.num_classes + 1);
        let hd = g.value(head.deltas).data();
        let coder = BoxCoder::with_weights(self.config.roi.bbox_weights);
        let size = self.config.image_size as f64;
        let refined: Vec<BBox> = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let d = [hd[4 * i] as f64, hd[4 * i + 1] as f64, hd[4 * i + 2] as f64, hd[4 * i + 3] as f64];
                coder.decode_one(b, &d).map(|r| r.clip(size, size))
            })
            .collect::<Result<_>>()?;
        let objectness: Vec<f64> = proposals.iter().map(|p| p.score).collect();
        Ok(postprocess(&refined, &probs, &objectness, mode, cfg))
    }
}

fn rpn_values<T: Scalar>(g: &Graph<T>, objectness: Var, deltas: Var) -> (Vec<f64>, Vec<[f64; 4]>) {
    let obj = g.value(objectness).data().iter().map(|v| v.as_f64()).collect();
    let d: &Tensor<T> = g.value(deltas);
    let deltas = d.data().chunks(4).map(|c| [c[0].as_f64(), c[1].as_f64(), c[2].as_f64(), c[3].as_f64()]).collect();
    (obj, deltas)
}
