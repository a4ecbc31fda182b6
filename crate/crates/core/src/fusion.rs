//! Per-level image-text fusion and the top-down pyramid merge.

use std::fmt;
use std::str::FromStr;

use findkit_autograd::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imenc::FeatureMapSet;
use crate::nn::{Conv, Init, LayerNorm, Linear, RelativeBias, TransformerLayer};
use crate::textenc::TextFeatures;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Product,
    Attention,
    Concat,
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionKind::Product => "product",
            FusionKind::Attention => "attention",
            FusionKind::Concat => "concat",
        })
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "product" => Ok(FusionKind::Product),
            "attention" => Ok(FusionKind::Attention),
            "concat" => Ok(FusionKind::Concat),
            other => Err(Error::Config(format!("unknown fusion mechanism {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Mechanism for levels 2, 3, 4, 5.
    pub mechanisms: [FusionKind; 4],
    pub num_buckets: usize,
    pub max_distance: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            dim: 256,
            layers: 3,
            heads: 8,
            mlp_ratio: 4,
            mechanisms: [FusionKind::Product, FusionKind::Product, FusionKind::Attention, FusionKind::Attention],
            num_buckets: 32,
            max_distance: 128,
        }
    }
}

impl FusionConfig {
    /// `mechanism` at the listed pyramid levels (2..=5), product fusion elsewhere.
    pub fn with_levels(mut self, mechanism: FusionKind, levels: &[usize]) -> Result<Self> {
        self.mechanisms = [FusionKind::Product; 4];
        for &l in levels {
            if !(2..=5).contains(&l) {
                return Err(Error::Config(format!("fusion level {l} outside 2..=5")));
            }
            self.mechanisms[l - 2] = mechanism;
        }
        Ok(self)
    }

    pub fn attention_levels(&self) -> Vec<usize> {
        (0..4).filter(|&i| self.mechanisms[i] == FusionKind::Attention).map(|i| i + 2).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("fusion dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        Ok(())
    }
}

/// `[C, H, W]` → `[H·W, C]`.
pub fn map_to_seq<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let m = g.reshape(x, &[s[0], s[1] * s[2]]);
    g.transpose(m)
}

/// `[H·W, C]` → `[C, H, W]`.
pub fn seq_to_map<T: Scalar>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Var {
    let c = g.shape(x)[1];
    let t = g.transpose(x);
    g.reshape(t, &[c, h, w])
}

/// Masked mean of text rows, `[D]`.
fn pool_text<T: Scalar>(g: &mut Graph<T>, text: &TextFeatures) -> Result<Var> {
    let n = text.mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::EmptyQuery);
    }
    let t = g.shape(text.features)[0];
    if t != text.mask.len() {
        return Err(Error::Shape(format!("text has {t} rows but mask length {}", text.mask.len())));
    }
    let inv = T::from_f64_lossy(1.0 / n as f64);
    let weights = text.mask.iter().map(|&m| if m { inv } else { T::zero() }).collect();
    let w = g.constant(Tensor::from_vec(&[1, t], weights));
    let pooled = g.matmul(w, text.features);
    let d = g.shape(pooled)[1];
    Ok(g.reshape(pooled, &[d]))
}

fn check_vision<T: Scalar>(g: &Graph<T>, vision: Var, channels: usize) -> Result<(usize, usize)> {
    let s = g.shape(vision);
    if s.len() != 3 || s[0] != channels {
        return Err(Error::Shape(format!("expected vision map with {channels} channels, got {s:?}")));
    }
    Ok((s[1], s[2]))
}

fn check_text<T: Scalar>(g: &Graph<T>, text: &TextFeatures, dim: usize) -> Result<()> {
    let s = g.shape(text.features);
    if s.len() != 2 || s[1] != dim {
        return Err(Error::Shape(format!("expected text features [T, {dim}], got {s:?}")));
    }
    Ok(())
}

/// Pooled text broadcast-multiplied into the projected vision map.
#[derive(Clone, Debug)]
pub struct ProductFusion {
    pub vision_proj: Linear,
    pub text_proj: Linear,
    pub out: Linear,
}

impl ProductFusion {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, vision_dim: usize, text_dim: usize, dim: usize) -> Self {
        let mut s = init.sub(name);
        ProductFusion {
            vision_proj: Linear::new(&mut s, "vision_proj", vision_dim, dim, true),
            text_proj: Linear::new(&mut s, "text_proj", text_dim, dim, true),
            out: Linear::new(&mut s, "out", dim, dim, true),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, vision: Var, text: &TextFeatures) -> Result<Var> {
        let (h, w) = check_vision(g, vision, self.vision_proj.in_dim)?;
        check_text(g, text, self.text_proj.in_dim)?;
        let pooled = pool_text(g, text)?;
        let pooled = g.reshape(pooled, &[1, self.text_proj.in_dim]);
        let t = self.text_proj.forward(g, pooled);
        let gate = g.reshape(t, &[self.text_proj.out_dim]);
        let seq = map_to_seq(g, vision);
        let v = self.vision_proj.forward(g, seq);
        let fused = g.mul_last(v, gate);
        let y = self.out.forward(g, fused);
        Ok(seq_to_map(g, y, h, w))
    }
}

/// Pooled text broadcast and channel-concatenated with projected vision,
/// followed by a 1×1 convolution (stored as separate vision and text halves).
#[derive(Clone, Debug)]
pub struct ConcatFusion {
    pub vision_proj: Linear,
    pub text_proj: Linear,
    pub out_vision: Linear,
    pub out_text: Linear,
}

impl ConcatFusion {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, vision_dim: usize, text_dim: usize, dim: usize) -> Self {
        let mut s = init.sub(name);
        let std = (1.0 / (2 * dim) as f64).sqrt();
        ConcatFusion {
            vision_proj: Linear::new(&mut s, "vision_proj", vision_dim, dim, true),
            text_proj: Linear::new(&mut s, "text_proj", text_dim, dim, true),
            out_vision: Linear::with_std(&mut s, "out_vision", dim, dim, true, std),
            out_text: Linear::with_std(&mut s, "out_text", dim, dim, false, std),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, vision: Var, text: &TextFeatures) -> Result<Var> {
        let (h, w) = check_vision(g, vision, self.vision_proj.in_dim)?;
        check_text(g, text, self.text_proj.in_dim)?;
        let pooled = pool_text(g, text)?;
        let pooled = g.reshape(pooled, &[1, self.text_proj.in_dim]);
        let t = self.text_proj.forward(g, pooled);
        let t = self.out_text.forward(g, t);
        let t = g.reshape(t, &[self.out_text.out_dim]);
        let seq = map_to_seq(g, vision);
        let v = self.vision_proj.forward(g, seq);
        let v = self.out_vision.forward(g, v);
        let y = g.add_last(v, t);
        Ok(seq_to_map(g, y, h, w))
    }
}

/// Self-attention over the vision-first concatenation of flattened vision and
/// text tokens; the first H·W outputs are reshaped back into a map.
#[derive(Clone, Debug)]
pub struct AttentionFusion {
    pub vision_proj: Linear,
    pub text_proj: Linear,
    pub bias: RelativeBias,
    pub layers: Vec<TransformerLayer>,
    pub final_norm: Option<LayerNorm>,
}

impl AttentionFusion {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        vision_dim: usize,
        text_dim: usize,
        cfg: &FusionConfig,
    ) -> Self {
        let mut s = init.sub(name);
        let d = cfg.dim;
        AttentionFusion {
            vision_proj: Linear::new(&mut s, "vision_proj", vision_dim, d, true),
            text_proj: Linear::new(&mut s, "text_proj", text_dim, d, true),
            bias: RelativeBias::new(&mut s, "rel_bias", cfg.heads, cfg.num_buckets, cfg.max_distance),
            layers: (0..cfg.layers)
                .map(|i| TransformerLayer::new(&mut s, &format!("layer{i}"), d, cfg.heads, cfg.mlp_ratio))
                .collect(),
            final_norm: (cfg.layers > 0).then(|| LayerNorm::new(&mut s, "final_norm", d)),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, vision: Var, text: &TextFeatures) -> Result<Var> {
        let (h, w) = check_vision(g, vision, self.vision_proj.in_dim)?;
        check_text(g, text, self.text_proj.in_dim)?;
        if !text.mask.iter().any(|&m| m) {
            return Err(Error::EmptyQuery);
        }
        let hw = h * w;
        let seq = map_to_seq(g, vision);
        let v = self.vision_proj.forward(g, seq);
        let t = self.text_proj.forward(g, text.features);
        let mut x = g.concat_rows(&[v, t]);
        let total = hw + text.mask.len();
        let key_mask: Vec<bool> = std::iter::repeat_n(true, hw).chain(text.mask.iter().copied()).collect();
        if !self.layers.is_empty() {
            let bias = self.bias.forward(g, total);
            for layer in &self.layers {
                x = layer.forward(g, x, Some(bias), &key_mask);
            }
        }
        if let Some(ln) = &self.final_norm {
            x = ln.forward(g, x);
        }
        let x = g.slice_rows(x, 0, hw);
        Ok(seq_to_map(g, x, h, w))
    }
}

#[derive(Clone, Debug)]
pub enum FusionBlock {
    Product(ProductFusion),
    Attention(AttentionFusion),
    Concat(ConcatFusion),
}

impl FusionBlock {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, vision: Var, text: &TextFeatures) -> Result<Var> {
        match self {
            FusionBlock::Product(b) => b.forward(g, vision, text),
            FusionBlock::Attention(b) => b.forward(g, vision, text),
            FusionBlock::Concat(b) => b.forward(g, vision, text),
        }
    }
}

/// P2..P5, each `[D, H_k, W_k]`.
#[derive(Clone, Debug)]
pub struct FusedPyramid {
    pub levels: [Var; 4],
}

/// Top-down merge: bias-free 1×1 laterals summed with the upsampled coarser
/// level, each followed by a 3×3 convolution with bias.
#[derive(Clone, Debug)]
pub struct PyramidMerge {
    pub laterals: Vec<Linear>,
    pub outputs: Vec<Conv>,
    pub dim: usize,
}

impl PyramidMerge {
    pub fn new<T: Scalar>(init: &mut Init<T>, dim: usize) -> Self {
        let mut s = init.sub("pyramid");
        let laterals = (2..=5).map(|k| Linear::new(&mut s, &format!("lateral{k}"), dim, dim, false)).collect();
        let outputs = (2..=5)
            .map(|k| {
                Conv::with_std(&mut s, &format!("output{k}"), dim, dim, 3, 1, true, (1.0 / (9 * dim) as f64).sqrt())
            })
            .collect();
        PyramidMerge { laterals, outputs, dim }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, fused: &[Var]) -> Result<FusedPyramid> {
        if fused.len() != 4 {
            return Err(Error::Shape(format!("pyramid merge needs 4 levels, got {}", fused.len())));
        }
        for (k, &f) in fused.iter().enumerate() {
            let s = g.shape(f);
            if s.len() != 3 || s[0] != self.dim {
                return Err(Error::Shape(format!("level {} has shape {s:?}, expected {} channels", k + 2, self.dim)));
            }
        }
        let mut out: Vec<Var> = vec![fused[0]; 4];
        let mut inner: Option<Var> = None;
        for k in (0..4).rev() {
            let mut lat = self.laterals[k].forward_map(g, fused[k]);
            if let Some(up) = inner {
                let up = g.upsample2x(up);
                if g.shape(up) != g.shape(lat) {
                    return Err(Error::Shape(format!("level {} does not double level {}", k + 2, k + 3)));
                }
                lat = g.add(lat, up);
            }
            inner = Some(lat);
            out[k] = self.outputs[k].forward(g, lat);
        }
        Ok(FusedPyramid { levels: out.try_into().expect("four levels") })
    }
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub config: FusionConfig,
    pub blocks: Vec<FusionBlock>,
    pub pyramid: PyramidMerge,
}

impl Fusion {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        vision_dims: [usize; 4],
        text_dim: usize,
        cfg: &FusionConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..4)
            .map(|k| {
                let name = format!("level{}", k + 2);
                match cfg.mechanisms[k] {
                    FusionKind::Product => {
                        FusionBlock::Product(ProductFusion::new(init, &name, vision_dims[k], text_dim, cfg.dim))
                    }
                    FusionKind::Concat => {
                        FusionBlock::Concat(ConcatFusion::new(init, &name, vision_dims[k], text_dim, cfg.dim))
                    }
                    FusionKind::Attention => {
                        FusionBlock::Attention(AttentionFusion::new(init, &name, vision_dims[k], text_dim, cfg))
                    }
                }
            })
            .collect();
        let pyramid = PyramidMerge::new(init, cfg.dim);
        Ok(Fusion { config: cfg.clone(), blocks, pyramid })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        features: &FeatureMapSet,
        text: &TextFeatures,
    ) -> Result<FusedPyramid> {
        let fused = self
            .blocks
            .iter()
            .zip(features.levels.iter())
            .map(|(b, &f)| b.forward(g, f, text))
            .collect::<Result<Vec<_>>>()?;
        self.pyramid.forward(g, &fused)
    }
}
