//! Train/val splits, vocabulary and per-step example preparation.

use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;
use rand::Rng;

use super::config::TrainConfig;
use crate::datakit::{augment, category_name, AugmentProfile, Shape, SyntheticDataset, Transform};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::imenc::ImageTensor;
use crate::model::PreparedExample;
use crate::taskkit::{adapt_det, adapt_loc, adapt_rec, fill_template, Task, TaskExample};
use crate::textenc::{tokenize, Vocabulary};

/// First scene id of the generated validation split.
pub const VAL_FIRST_ID: u64 = 1_000_000;

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: SyntheticDataset,
    pub val: SyntheticDataset,
}

impl Splits {
    /// `data_dir/{train,val}` when set, otherwise generated from `data_seed`.
    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        match &cfg.data_dir {
            Some(dir) => Self::load(dir),
            None => Self::generate(cfg),
        }
    }

    pub fn generate(cfg: &TrainConfig) -> Result<Self> {
        Ok(Splits {
            train: SyntheticDataset::generate(cfg.data_seed, cfg.train_scenes, 0, &cfg.scene)?,
            val: SyntheticDataset::generate(cfg.data_seed, cfg.val_scenes, VAL_FIRST_ID, &cfg.scene)?,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Splits {
            train: SyntheticDataset::load(&dir.join("train"))?,
            val: SyntheticDataset::load(&dir.join("val"))?,
        })
    }

    pub fn split(&self, name: &str) -> Result<&SyntheticDataset> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            other => Err(Error::Config(format!("unknown split {other:?} (expected train or val)"))),
        }
    }
}

/// Vocabulary over training expressions and every prompt the config can emit.
pub fn build_vocabulary(train: &SyntheticDataset, cfg: &TrainConfig) -> Result<Vocabulary> {
    let mut corpus = train.corpus();
    corpus.push(cfg.det_prompt.clone());
    for s in Shape::ALL {
        corpus.push(fill_template(&cfg.loc_prompt, category_name(s.category())));
    }
    Vocabulary::build(&corpus, 1)
}

/// Item lists of one task stream over a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Scene indices.
    Det(Vec<usize>),
    /// Indices of scenes with at least one object.
    Loc(Vec<usize>),
    /// Expression indices.
    Rec(Vec<usize>),
}

impl Stream {
    pub fn new(task: Task, data: &SyntheticDataset) -> Self {
        match task {
            Task::Det => Stream::Det((0..data.scenes.len()).collect()),
            Task::Loc => Stream::Loc((0..data.scenes.len()).filter(|&i| !data.scenes[i].objects.is_empty()).collect()),
            Task::Rec => Stream::Rec((0..data.expressions.len()).collect()),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Stream::Det(v) | Stream::Loc(v) | Stream::Rec(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adapts item `i`; LOC draws its category from `rng`.
    pub fn example<R: Rng>(
        &self,
        i: usize,
        data: &SyntheticDataset,
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Result<TaskExample> {
        match self {
            Stream::Det(v) => Ok(adapt_det(&data.scenes[v[i]], &cfg.det_prompt)),
            Stream::Loc(v) => adapt_loc(&data.scenes[v[i]], rng, &cfg.loc_prompt, cfg.loc_negative_rate)
                .ok_or_else(|| Error::Task(format!("scene {} has no objects", data.scenes[v[i]].id))),
            Stream::Rec(v) => {
                let e = &data.expressions[v[i]];
                adapt_rec(&data.scenes[e.scene], Some(e))
            }
        }
    }
}

/// Augments, tensorizes and tokenizes one example.
pub fn prepare<R: Rng>(
    ex: &TaskExample,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    profile: AugmentProfile,
    rng: &mut R,
) -> Result<PreparedExample> {
    let (img, targets, _) = augment(&ex.image, &ex.targets, ex.task, rng, profile, cfg.model.image_size);
    Ok(PreparedExample {
        image: ImageTensor::from_rgb(&img)?,
        tokens: tokenize(&ex.query, vocab, cfg.model.text.max_len),
        targets,
    })
}

/// Resizes (aspect-preserving, top-left aligned, padded) to the model input.
pub fn fit_image(img: &RgbImage, size: usize) -> Result<(ImageTensor, Transform)> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Data("empty image".into()));
    }
    let t = Transform { scale: size as f64 / w.max(h) as f64, ..Transform::identity(size, size) };
    let out = if w == size && h == size { img.clone() } else { t.apply_image(img, FilterType::Triangle) };
    Ok((ImageTensor::from_rgb(&out)?, t))
}

/// Maps a box in model-input coordinates back to the original image.
pub fn unfit_box(b: &BBox, t: &Transform) -> BBox {
    BBox::new(b.x1 / t.scale, b.y1 / t.scale, b.x2 / t.scale, b.y2 / t.scale)
}
