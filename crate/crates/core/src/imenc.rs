//! Residual convolutional backbone producing F2..F5.

use findkit_autograd::{Graph, Scalar, Tensor, Var};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{norm_groups, Conv, GroupNorm, Init};

pub const LEVEL_STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Per-channel normalization applied to 0..255 pixel values.
pub const PIXEL_MEAN: [f32; 3] = [127.5, 127.5, 127.5];
pub const PIXEL_SCALE: [f32; 3] = [64.0, 64.0, 64.0];

/// Normalized `[3, H, W]` image; H and W divisible by 32.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub data: Tensor<f32>,
}

impl ImageTensor {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Shape(format!("image tensor must be [3, H, W], got {s:?}")));
        }
        if s[1] == 0 || s[2] == 0 || !s[1].is_multiple_of(32) || !s[2].is_multiple_of(32) {
            return Err(Error::Shape(format!("image size {}x{} is not a positive multiple of 32", s[2], s[1])));
        }
        Ok(ImageTensor { data })
    }

    pub fn from_rgb(img: &RgbImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0f32; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = (p[c] as f32 - PIXEL_MEAN[c]) / PIXEL_SCALE[c];
            }
        }
        Self::new(Tensor::from_vec(&[3, h, w], data))
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub channels: [usize; 4],
    pub blocks_per_stage: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { stem_channels: 16, channels: [16, 32, 64, 128], blocks_per_stage: 2 }
    }
}

/// F2..F5 as graph vars, each `[C_k, H/stride_k, W/stride_k]`.
#[derive(Clone, Debug)]
pub struct FeatureMapSet {
    pub levels: [Var; 4],
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv,
    gn1: GroupNorm,
    conv2: Conv,
    gn2: GroupNorm,
    shortcut: Option<(Conv, GroupNorm)>,
}

impl ResBlock {
    fn new<T: Scalar>(init: &mut Init<T>, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let mut s = init.sub(name);
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv::new(&mut s, "down", cin, cout, 1, stride, false),
                GroupNorm::new(&mut s, "down_gn", cout, norm_groups(cout), 1.0),
            )
        });
        ResBlock {
            conv1: Conv::new(&mut s, "conv1", cin, cout, 3, stride, false),
            gn1: GroupNorm::new(&mut s, "gn1", cout, norm_groups(cout), 1.0),
            conv2: Conv::new(&mut s, "conv2", cout, cout, 3, 1, false),
            gn2: GroupNorm::new(&mut s, "gn2", cout, norm_groups(cout), 0.0),
            shortcut,
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let h = self.conv1.forward(g, x);
        let h = self.gn1.forward(g, h);
        let h = g.relu(h);
        let h = self.conv2.forward(g, h);
        let h = self.gn2.forward(g, h);
        let skip = match &self.shortcut {
            Some((conv, gn)) => {
                let s = conv.forward(g, x);
                gn.forward(g, s)
            }
            None => x,
        };
        let y = g.add(h, skip);
        g.relu(y)
    }
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub config: BackboneConfig,
    stem: [(Conv, GroupNorm); 2],
    stages: Vec<Vec<ResBlock>>,
}

impl ImageEncoder {
    pub fn new<T: Scalar>(init: &mut Init<T>, config: &BackboneConfig) -> Result<Self> {
        if config.blocks_per_stage == 0 {
            return Err(Error::Config("backbone needs at least one block per stage".into()));
        }
        let sc = config.stem_channels;
        let stem = [
            (Conv::new(init, "stem1", 3, sc, 3, 2, false), GroupNorm::new(init, "stem1_gn", sc, norm_groups(sc), 1.0)),
            (Conv::new(init, "stem2", sc, sc, 3, 2, false), GroupNorm::new(init, "stem2_gn", sc, norm_groups(sc), 1.0)),
        ];
        let mut cin = sc;
        let mut stages = Vec::new();
        for (k, &cout) in config.channels.iter().enumerate() {
            let blocks = (0..config.blocks_per_stage)
                .map(|b| {
                    let stride = if k > 0 && b == 0 { 2 } else { 1 };
                    let blk = ResBlock::new(init, &format!("stage{}.{b}", k + 1), cin, cout, stride);
                    cin = cout;
                    blk
                })
                .collect();
            stages.push(blocks);
        }
        Ok(ImageEncoder { config: config.clone(), stem, stages })
    }

    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, image: Var) -> Result<FeatureMapSet> {
        let s = g.shape(image).to_vec();
        if s.len() != 3 || s[0] != 3 || s[1] == 0 || s[2] == 0 || !s[1].is_multiple_of(32) || !s[2].is_multiple_of(32) {
            return Err(Error::Shape(format!("image must be [3, H, W] with H, W multiples of 32, got {s:?}")));
        }
        let mut x = image;
        for (conv, gn) in &self.stem {
            x = conv.forward(g, x);
            x = gn.forward(g, x);
            x = g.relu(x);
        }
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            for blk in stage {
                x = blk.forward(g, x);
            }
            levels.push(x);
        }
        Ok(FeatureMapSet { levels: levels.try_into().expect("four stages") })
    }
}
