use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Color, RefExpr, Scene, SceneObject, Shape, SizeClass, SyntheticDataset};
use crate::error::{io_err, Error, Result};
use crate::geometry::BBox;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoAttributes {
    pub color: Color,
    pub size: SizeClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: usize,
    /// `[x, y, w, h]`.
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<CocoAttributes>,
}

impl CocoAnnotation {
    pub fn corner_box(&self) -> BBox {
        let [x, y, w, h] = self.bbox;
        BBox::from_xywh(x, y, w, h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: usize,
    pub name: String,
    #[serde(default)]
    pub supercategory: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// One line of the expressions file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpressionLine {
    pub image_id: u64,
    pub expression: String,
    pub annotation_id: u64,
}

impl CocoDataset {
    /// Checks id uniqueness, references and box bounds; the error lists every offender.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut images = HashMap::new();
        for im in &self.images {
            if images.insert(im.id, im).is_some() {
                problems.push(format!("duplicate image id {}", im.id));
            }
        }
        let mut cats = BTreeSet::new();
        for c in &self.categories {
            if !cats.insert(c.id) {
                problems.push(format!("duplicate category id {}", c.id));
            }
        }
        let mut ann_ids = BTreeSet::new();
        for a in &self.annotations {
            if !ann_ids.insert(a.id) {
                problems.push(format!("duplicate annotation id {}", a.id));
            }
            if !cats.contains(&a.category_id) {
                problems.push(format!("annotation {} references missing category id {}", a.id, a.category_id));
            }
            match images.get(&a.image_id) {
                None => problems.push(format!("annotation {} references missing image id {}", a.id, a.image_id)),
                Some(im) => {
                    let b = a.corner_box();
                    let inside = b.is_valid()
                        && b.x1 >= 0.0
                        && b.y1 >= 0.0
                        && b.x2 <= im.width as f64
                        && b.y2 <= im.height as f64;
                    if !inside {
                        problems.push(format!("annotation {} bbox {:?} outside image {}", a.id, a.bbox, im.id));
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Data(format!("invalid COCO dataset: {}", problems.join("; "))))
        }
    }

    /// Corner-convention boxes and categories per image id.
    pub fn targets_by_image(&self) -> HashMap<u64, Vec<(BBox, usize)>> {
        let mut out: HashMap<u64, Vec<(BBox, usize)>> = self.images.iter().map(|i| (i.id, Vec::new())).collect();
        for a in &self.annotations {
            out.entry(a.image_id).or_default().push((a.corner_box(), a.category_id));
        }
        out
    }

    pub fn from_synthetic(data: &SyntheticDataset) -> (CocoDataset, Vec<ExpressionLine>) {
        let categories = Shape::ALL
            .iter()
            .map(|s| CocoCategory { id: s.category(), name: s.name().into(), supercategory: "shape".into() })
            .collect();
        let mut images = Vec::new();
        let mut annotations = Vec::new();
        let mut ann_of: HashMap<(usize, usize), u64> = HashMap::new();
        for (si, s) in data.scenes.iter().enumerate() {
            images.push(CocoImage {
                id: s.id,
                file_name: image_file_name(s.id),
                width: s.width(),
                height: s.height(),
                seed: Some(s.seed),
            });
            for (oi, o) in s.objects.iter().enumerate() {
                let id = annotations.len() as u64 + 1;
                ann_of.insert((si, oi), id);
                annotations.push(CocoAnnotation {
                    id,
                    image_id: s.id,
                    category_id: o.shape.category(),
                    bbox: o.bbox.to_xywh(),
                    area: o.bbox.area(),
                    iscrowd: 0,
                    attributes: Some(CocoAttributes { color: o.color, size: o.size }),
                });
            }
        }
        let expressions = data
            .expressions
            .iter()
            .map(|e| ExpressionLine {
                image_id: data.scenes[e.scene].id,
                expression: e.text.clone(),
                annotation_id: ann_of[&(e.scene, e.object)],
            })
            .collect();
        (CocoDataset { images, annotations, categories }, expressions)
    }
}

pub fn image_file_name(id: u64) -> String {
    format!("images/{id:06}.png")
}

pub fn load_coco_json(path: &Path) -> Result<CocoDataset> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let ds: CocoDataset = serde_json::from_str(&text)?;
    ds.validate()?;
    Ok(ds)
}

impl SyntheticDataset {
    /// Writes `annotations.json`, `expressions.jsonl` and `images/*.png` under `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("images")).map_err(io_err(dir))?;
        let (coco, exprs) = CocoDataset::from_synthetic(self);
        for s in &self.scenes {
            s.image.save(dir.join(image_file_name(s.id)))?;
        }
        let ann = dir.join("annotations.json");
        std::fs::write(&ann, serde_json::to_string_pretty(&coco)?).map_err(io_err(&ann))?;
        let path = dir.join("expressions.jsonl");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(io_err(&path))?);
        for e in &exprs {
            writeln!(f, "{}", serde_json::to_string(e)?).map_err(io_err(&path))?;
        }
        f.flush().map_err(io_err(&path))
    }

    /// Inverse of [`SyntheticDataset::export`].
    pub fn load(dir: &Path) -> Result<Self> {
        let coco = load_coco_json(&dir.join("annotations.json"))?;
        let mut scenes = Vec::with_capacity(coco.images.len());
        let mut objects_of: HashMap<u64, Vec<&CocoAnnotation>> = HashMap::new();
        for a in &coco.annotations {
            objects_of.entry(a.image_id).or_default().push(a);
        }
        let mut ann_pos: HashMap<u64, (usize, usize)> = HashMap::new();
        for im in &coco.images {
            let path = dir.join(&im.file_name);
            let image = image::open(&path).map_err(Error::from)?.to_rgb8();
            let mut objects = Vec::new();
            for a in objects_of.get(&im.id).map(Vec::as_slice).unwrap_or(&[]) {
                let shape = Shape::from_category(a.category_id).ok_or_else(|| {
                    Error::Data(format!("annotation {}: category {} is not a shape", a.id, a.category_id))
                })?;
                let attrs = a
                    .attributes
                    .as_ref()
                    .ok_or_else(|| Error::Data(format!("annotation {} lacks colour/size attributes", a.id)))?;
                ann_pos.insert(a.id, (scenes.len(), objects.len()));
                objects.push(SceneObject { bbox: a.corner_box(), shape, color: attrs.color, size: attrs.size });
            }
            scenes.push(Scene { id: im.id, seed: im.seed.unwrap_or(0), image, objects });
        }
        let path = dir.join("expressions.jsonl");
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut expressions = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: ExpressionLine = serde_json::from_str(line)?;
            let &(scene, object) = ann_pos.get(&e.annotation_id).ok_or_else(|| {
                Error::Data(format!("expressions line {}: unknown annotation id {}", n + 1, e.annotation_id))
            })?;
            if scenes[scene].id != e.image_id {
                return Err(Error::Data(format!(
                    "expressions line {}: annotation {} belongs to image {}, not {}",
                    n + 1,
                    e.annotation_id,
                    scenes[scene].id,
                    e.image_id
                )));
            }
            expressions.push(RefExpr { scene, object, text: e.expression });
        }
        Ok(SyntheticDataset { scenes, expressions })
    }
}
