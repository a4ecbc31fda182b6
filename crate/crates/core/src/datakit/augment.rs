use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::taskkit::Task;

/// Fill for padded canvas regions; normalizes to zero.
pub const PAD_COLOR: [u8; 3] = [128, 128, 128];
const REC_CROP_ATTEMPTS: usize = 10;
/// A REC referent counts as cropped out once less than this fraction of it survives.
const REC_MIN_VISIBLE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AugmentProfile {
    /// Scale jitter in [0.4, 2.5].
    Full,
    /// Scale jitter in [0.8, 1.25].
    Ablation,
    /// Identity.
    None,
    Custom {
        lo: f64,
        hi: f64,
    },
}

impl AugmentProfile {
    /// `None` for the identity profile.
    pub fn scale_range(self) -> Option<(f64, f64)> {
        match self {
            AugmentProfile::Full => Some((0.4, 2.5)),
            AugmentProfile::Ablation => Some((0.8, 1.25)),
            AugmentProfile::None => None,
            AugmentProfile::Custom { lo, hi } => Some((lo, hi)),
        }
    }
}

impl FromStr for AugmentProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(AugmentProfile::Full),
            "ablation" => Ok(AugmentProfile::Ablation),
            "none" => Ok(AugmentProfile::None),
            other => {
                let parsed =
                    other.split_once(',').and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)));
                match parsed {
                    Some((lo, hi)) if lo > 0.0 && hi >= lo => Ok(AugmentProfile::Custom { lo, hi }),
                    _ => Err(Error::Config(format!("unknown augmentation profile {other:?}"))),
                }
            }
        }
    }
}

/// Scale, then crop (positive offset) or pad (offset 0) to the output canvas,
/// then optionally mirror horizontally.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub scale: f64,
    pub offset_x: usize,
    pub offset_y: usize,
    pub flip: bool,
    pub out_width: usize,
    pub out_height: usize,
}

impl Transform {
    pub fn identity(width: usize, height: usize) -> Self {
        Transform { scale: 1.0, offset_x: 0, offset_y: 0, flip: false, out_width: width, out_height: height }
    }

    fn scaled_dims(&self, width: usize, height: usize) -> (u32, u32) {
        (((width as f64 * self.scale).round() as u32).max(1), ((height as f64 * self.scale).round() as u32).max(1))
    }

    pub fn apply_image(&self, img: &RgbImage, filter: FilterType) -> RgbImage {
        let (sw, sh) = self.scaled_dims(img.width() as usize, img.height() as usize);
        let scaled = if (sw, sh) == img.dimensions() { img.clone() } else { imageops::resize(img, sw, sh, filter) };
        let mut out = RgbImage::from_pixel(self.out_width as u32, self.out_height as u32, Rgb(PAD_COLOR));
        let view = imageops::crop_imm(
            &scaled,
            self.offset_x as u32,
            self.offset_y as u32,
            (self.out_width as u32).min(sw.saturating_sub(self.offset_x as u32)),
            (self.out_height as u32).min(sh.saturating_sub(self.offset_y as u32)),
        )
        .to_image();
        imageops::replace(&mut out, &view, 0, 0);
        if self.flip {
            imageops::flip_horizontal_in_place(&mut out);
        }
        out
    }

    /// Transformed box clipped to the canvas (possibly empty).
    pub fn apply_box(&self, b: &BBox) -> BBox {
        let (ox, oy) = (self.offset_x as f64, self.offset_y as f64);
        let t =
            BBox::new(b.x1 * self.scale - ox, b.y1 * self.scale - oy, b.x2 * self.scale - ox, b.y2 * self.scale - oy)
                .clip(self.out_width as f64, self.out_height as f64);
        if self.flip {
            let w = self.out_width as f64;
            BBox::new(w - t.x2, t.y1, w - t.x1, t.y2)
        } else {
            t
        }
    }
}

fn sample_transform<R: Rng>(w: usize, h: usize, out: (usize, usize), range: (f64, f64), rng: &mut R) -> Transform {
    let scale = if range.1 > range.0 { rng.gen_range(range.0..=range.1) } else { range.0 };
    let mut t = Transform { scale, offset_x: 0, offset_y: 0, flip: false, out_width: out.0, out_height: out.1 };
    let (sw, sh) = t.scaled_dims(w, h);
    if sw as usize > out.0 {
        t.offset_x = rng.gen_range(0..=sw as usize - out.0);
    }
    if sh as usize > out.1 {
        t.offset_y = rng.gen_range(0..=sh as usize - out.1);
    }
    t
}

/// Scale jitter with pad or random crop to `out_size`, plus a horizontal flip
/// (p = 0.5) for DET and LOC. Targets reduced to nothing are dropped; for REC
/// a crop that loses the referent is resampled, falling back to a plain resize.
pub fn augment<R: Rng>(
    image: &RgbImage,
    targets: &[(BBox, usize)],
    task: Task,
    rng: &mut R,
    profile: AugmentProfile,
    out_size: usize,
) -> (RgbImage, Vec<(BBox, usize)>, Transform) {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let out = (out_size, out_size);
    let base = Transform { scale: out_size as f64 / w.max(h) as f64, ..Transform::identity(out_size, out_size) };
    let mut t = match profile.scale_range() {
        None => base,
        Some(range) => {
            let range = (range.0 * base.scale, range.1 * base.scale);
            let mut t = sample_transform(w, h, out, range, rng);
            if task == Task::Rec {
                let keeps_referent = |t: &Transform| {
                    targets.iter().all(|(b, _)| {
                        let full = b.area() * t.scale * t.scale;
                        full > 0.0 && t.apply_box(b).area() >= REC_MIN_VISIBLE * full
                    })
                };
                let mut attempts = 1;
                while !keeps_referent(&t) && attempts < REC_CROP_ATTEMPTS {
                    t = sample_transform(w, h, out, range, rng);
                    attempts += 1;
                }
                if !keeps_referent(&t) {
                    t = base;
                }
            }
            t
        }
    };
    if task != Task::Rec && profile != AugmentProfile::None {
        t.flip = rng.gen_bool(0.5);
    }
    let img = t.apply_image(image, FilterType::Triangle);
    let boxes = targets
        .iter()
        .map(|(b, c)| (t.apply_box(b), *c))
        .filter(|(b, _)| b.width() >= 1.0 && b.height() >= 1.0)
        .collect();
    (img, boxes, t)
}
