//! Synthetic shapes scenes, referring expressions, COCO-style I/O and
//! augmentation.

mod augment;
mod coco;
mod expr;

pub use augment::{augment, AugmentProfile, Transform, PAD_COLOR};
pub use coco::{load_coco_json, CocoAnnotation, CocoAttributes, CocoCategory, CocoDataset, CocoImage, ExpressionLine};
pub use expr::{
    evaluate_expression, parse_expression, synthesize_expression, Descriptor, Expression, ParsedExpression, Relation,
};

use std::fmt;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

macro_rules! named_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Data(format!(concat!("unknown ", stringify!($name), " {:?}"), other))),
                }
            }
        }
    };
}

named_enum!(Shape { Circle => "circle", Square => "square", Triangle => "triangle", Star => "star" });
named_enum!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Purple => "purple",
    Orange => "orange",
    Cyan => "cyan",
    White => "white",
});
named_enum!(SizeClass { Small => "small", Large => "large" });

pub const NUM_CATEGORIES: usize = 4;

impl Shape {
    /// Detection category id, 1-based.
    pub fn category(self) -> usize {
        Shape::ALL.iter().position(|&s| s == self).unwrap() + 1
    }

    pub fn from_category(id: usize) -> Option<Shape> {
        id.checked_sub(1).and_then(|i| Shape::ALL.get(i).copied())
    }
}

pub fn category_name(id: usize) -> &'static str {
    Shape::from_category(id).map_or("unknown", Shape::name)
}

impl Color {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [50, 90, 230],
            Color::Yellow => [235, 215, 40],
            Color::Purple => [150, 60, 200],
            Color::Orange => [245, 140, 30],
            Color::Cyan => [40, 210, 220],
            Color::White => [240, 240, 240],
        }
    }
}

pub const BACKGROUND: [u8; 3] = [40, 40, 40];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub bbox: BBox,
    pub shape: Shape,
    pub color: Color,
    pub size: SizeClass,
}

impl SceneObject {
    /// Whether the pixel center `(px, py)` lies inside the rendered shape.
    pub fn covers(&self, px: f64, py: f64) -> bool {
        let b = &self.bbox;
        if px < b.x1 || px > b.x2 || py < b.y1 || py > b.y2 {
            return false;
        }
        let (u, v) = ((px - b.x1) / b.width(), (py - b.y1) / b.height());
        match self.shape {
            Shape::Square => true,
            Shape::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            Shape::Triangle => point_in_polygon(u, v, &[(0.5, 0.0), (1.0, 1.0), (0.0, 1.0)]),
            Shape::Star => point_in_polygon(u, v, &star_polygon()),
        }
    }
}

fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Five-pointed star stretched to the unit square.
fn star_polygon() -> Vec<(f64, f64)> {
    let pts: Vec<(f64, f64)> = (0..10)
        .map(|k| {
            let r = if k % 2 == 0 { 1.0 } else { 0.45 };
            let a = -std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::PI / 5.0;
            (r * a.cos(), r * a.sin())
        })
        .collect();
    let (minx, maxx) = pts.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let (miny, maxy) = pts.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    pts.into_iter().map(|(x, y)| ((x - minx) / (maxx - minx), (y - miny) / (maxy - miny))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub max_iou: f64,
    pub small_range: (f64, f64),
    pub large_range: (f64, f64),
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 128,
            min_objects: 1,
            max_objects: 6,
            max_iou: 0.3,
            small_range: (0.19, 0.23),
            large_range: (0.32, 0.38),
            max_attempts: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub seed: u64,
    pub image: RgbImage,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn width(&self) -> usize {
        self.image.width() as usize
    }

    pub fn height(&self) -> usize {
        self.image.height() as usize
    }

    pub fn targets(&self) -> Vec<(BBox, usize)> {
        self.objects.iter().map(|o| (o.bbox, o.shape.category())).collect()
    }
}

/// Draws objects in order over the background; later objects occlude earlier ones.
pub fn render(objects: &[SceneObject], width: usize, height: usize) -> RgbImage {
    let mut img = RgbImage::from_pixel(width as u32, height as u32, Rgb(BACKGROUND));
    for o in objects {
        paint(&mut img, o, o.color.rgb());
    }
    img
}

pub fn paint(img: &mut RgbImage, o: &SceneObject, rgb: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let y0 = (o.bbox.y1.floor() as i64).max(0);
    let y1 = (o.bbox.y2.ceil() as i64).min(h);
    let x0 = (o.bbox.x1.floor() as i64).max(0);
    let x1 = (o.bbox.x2.ceil() as i64).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            if o.covers(x as f64 + 0.5, y as f64 + 0.5) {
                img.put_pixel(x as u32, y as u32, Rgb(rgb));
            }
        }
    }
}

/// Rejection-samples a scene of non-overlapping shapes.
pub fn generate_scene(id: u64, seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    if cfg.min_objects == 0 || cfg.max_objects < cfg.min_objects {
        return Err(Error::Config(format!("bad object range {}..={}", cfg.min_objects, cfg.max_objects)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.image_size as f64;
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    let mut attempts = 0;
    while objects.len() < n {
        attempts += 1;
        if attempts > cfg.max_attempts {
            return Err(Error::Data(format!(
                "scene {id}: placed {} of {n} objects within {} attempts",
                objects.len(),
                cfg.max_attempts
            )));
        }
        let shape = Shape::ALL[rng.gen_range(0..Shape::ALL.len())];
        let color = Color::ALL[rng.gen_range(0..Color::ALL.len())];
        let size = if rng.gen_bool(0.5) { SizeClass::Small } else { SizeClass::Large };
        let (lo, hi) = match size {
            SizeClass::Small => cfg.small_range,
            SizeClass::Large => cfg.large_range,
        };
        let side = (rng.gen_range(lo..=hi) * s).round().max(2.0);
        let max_pos = (s - side) as i64;
        if max_pos < 0 {
            continue;
        }
        let x = rng.gen_range(0..=max_pos) as f64;
        let y = rng.gen_range(0..=max_pos) as f64;
        let bbox = BBox::new(x, y, x + side, y + side);
        if objects.iter().all(|o| o.bbox.iou(&bbox) <= cfg.max_iou) {
            objects.push(SceneObject { bbox, shape, color, size });
        }
    }
    let image = render(&objects, cfg.image_size, cfg.image_size);
    Ok(Scene { id, seed, image, objects })
}

/// Seed of scene `index` in the stream rooted at `root`.
pub fn scene_seed(root: u64, index: u64) -> u64 {
    let mut z = root ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A referring expression bound to a scene and object.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefExpr {
    pub scene: usize,
    pub object: usize,
    pub text: String,
}

/// Scenes plus one expression per uniquely describable object.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub scenes: Vec<Scene>,
    pub expressions: Vec<RefExpr>,
}

impl SyntheticDataset {
    pub fn generate(root_seed: u64, count: usize, first_id: u64, cfg: &SceneConfig) -> Result<Self> {
        let mut scenes = Vec::with_capacity(count);
        let mut expressions = Vec::new();
        for i in 0..count {
            let id = first_id + i as u64;
            let seed = scene_seed(root_seed, id);
            let scene = generate_scene(id, seed, cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(seed, 0xE1));
            for obj in 0..scene.objects.len() {
                if let Some(e) = synthesize_expression(&scene, obj, &mut rng) {
                    expressions.push(RefExpr { scene: i, object: obj, text: e.text });
                }
            }
            scenes.push(scene);
        }
        Ok(SyntheticDataset { scenes, expressions })
    }

    /// Every word that can appear in a query.
    pub fn corpus(&self) -> Vec<String> {
        self.expressions.iter().map(|e| e.text.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_round_trip() {
        for &s in Shape::ALL {
            assert_eq!(Shape::from_category(s.category()), Some(s));
        }
        assert_eq!(Shape::from_category(0), None);
        assert_eq!("star".parse::<Shape>().unwrap(), Shape::Star);
    }

    #[test]
    fn shapes_fill_their_box() {
        for &shape in Shape::ALL {
            let o =
                SceneObject { bbox: BBox::new(2.0, 3.0, 42.0, 43.0), shape, color: Color::Red, size: SizeClass::Large };
            let img = render(&[o], 48, 48);
            let (mut minx, mut miny, mut maxx, mut maxy) = (48, 48, 0, 0);
            for (x, y, p) in img.enumerate_pixels() {
                if p.0 != BACKGROUND {
                    minx = minx.min(x);
                    miny = miny.min(y);
                    maxx = maxx.max(x + 1);
                    maxy = maxy.max(y + 1);
                }
            }
            assert!((minx as f64 - 2.0).abs() <= 1.0 && (maxx as f64 - 42.0).abs() <= 1.0, "{shape}");
            assert!((miny as f64 - 3.0).abs() <= 1.0 && (maxy as f64 - 43.0).abs() <= 1.0, "{shape}");
        }
    }
}
