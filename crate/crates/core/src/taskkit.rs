//! Adapting scenes to REC / LOC / DET examples and mixing task streams.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::{category_name, RefExpr, Scene, Shape};
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const DEFAULT_LOC_PROMPT: &str = "Find the X";
pub const DEFAULT_DET_PROMPT: &str = "Find all the objects";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    Rec,
    Loc,
    Det,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Det, Task::Loc, Task::Rec];

    pub fn name(self) -> &'static str {
        match self {
            Task::Rec => "rec",
            Task::Loc => "loc",
            Task::Det => "det",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rec" => Ok(Task::Rec),
            "loc" => Ok(Task::Loc),
            "det" => Ok(Task::Det),
            other => Err(Error::Task(format!("unknown task {other:?} (expected rec, loc or det)"))),
        }
    }
}

/// One adapted example: image, query, targets and the task it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskExample {
    pub image_id: u64,
    pub image: Arc<RgbImage>,
    pub query: String,
    /// Boxes with category ids (1-based).
    pub targets: Vec<(BBox, usize)>,
    pub task: Task,
}

impl TaskExample {
    /// REC has one target, LOC targets share a category.
    pub fn check_invariant(&self) -> Result<()> {
        match self.task {
            Task::Rec if self.targets.len() != 1 => {
                Err(Error::Task(format!("REC example for image {} has {} targets", self.image_id, self.targets.len())))
            }
            Task::Loc if self.targets.windows(2).any(|w| w[0].1 != w[1].1) => {
                Err(Error::Task(format!("LOC example for image {} mixes categories", self.image_id)))
            }
            _ => Ok(()),
        }
    }
}

/// Substitutes the category name for the word `X` in a template.
pub fn fill_template(template: &str, category: &str) -> String {
    template.split(' ').map(|w| if w == "X" { category } else { w }).collect::<Vec<_>>().join(" ")
}

/// Samples a present category uniformly (or, with probability
/// `negative_rate`, an absent one) and keeps only its boxes as targets.
/// `None` for scenes without objects.
pub fn adapt_loc<R: Rng>(scene: &Scene, rng: &mut R, template: &str, negative_rate: f64) -> Option<TaskExample> {
    let mut present: Vec<usize> = scene.objects.iter().map(|o| o.shape.category()).collect();
    present.sort_unstable();
    present.dedup();
    if present.is_empty() {
        return None;
    }
    let absent: Vec<usize> = Shape::ALL.iter().map(|s| s.category()).filter(|c| !present.contains(c)).collect();
    let category = if negative_rate > 0.0 && !absent.is_empty() && rng.gen_bool(negative_rate.min(1.0)) {
        absent[rng.gen_range(0..absent.len())]
    } else {
        present[rng.gen_range(0..present.len())]
    };
    Some(loc_example(scene, category, template))
}

/// The LOC example of `scene` for a fixed category.
pub fn loc_example(scene: &Scene, category: usize, template: &str) -> TaskExample {
    TaskExample {
        image_id: scene.id,
        image: Arc::new(scene.image.clone()),
        query: fill_template(template, category_name(category)),
        targets: scene.targets().into_iter().filter(|&(_, c)| c == category).collect(),
        task: Task::Loc,
    }
}

pub fn adapt_det(scene: &Scene, prompt: &str) -> TaskExample {
    TaskExample {
        image_id: scene.id,
        image: Arc::new(scene.image.clone()),
        query: prompt.to_string(),
        targets: scene.targets(),
        task: Task::Det,
    }
}

pub fn adapt_rec(scene: &Scene, expr: Option<&RefExpr>) -> Result<TaskExample> {
    let e = expr.ok_or_else(|| Error::Task(format!("scene {} has no referring expression", scene.id)))?;
    let obj = scene
        .objects
        .get(e.object)
        .ok_or_else(|| Error::Task(format!("scene {}: referent {} out of range", scene.id, e.object)))?;
    Ok(TaskExample {
        image_id: scene.id,
        image: Arc::new(scene.image.clone()),
        query: e.text.clone(),
        targets: vec![(obj.bbox, obj.shape.category())],
        task: Task::Rec,
    })
}

/// Integer stream weights and a batch size divisible by their sum.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixSpec {
    pub weights: Vec<usize>,
    pub batch_size: usize,
}

impl MixSpec {
    pub fn new(weights: Vec<usize>, batch_size: usize) -> Result<Self> {
        let spec = MixSpec { weights, batch_size };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let total: usize = self.weights.iter().sum();
        if self.weights.is_empty() || self.weights.contains(&0) {
            return Err(Error::Config(format!("mix weights must be positive, got {:?}", self.weights)));
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(total) {
            return Err(Error::Config(format!(
                "batch size {} not divisible by mix weight sum {total}",
                self.batch_size
            )));
        }
        Ok(())
    }

    /// Examples drawn from each stream per batch.
    pub fn counts(&self) -> Vec<usize> {
        let unit = self.batch_size / self.weights.iter().sum::<usize>();
        self.weights.iter().map(|w| w * unit).collect()
    }

    /// Parses `a:b:c`.
    pub fn parse_ratio(s: &str) -> Result<Vec<usize>> {
        s.split(':')
            .map(|p| p.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad mix ratio {s:?}"))))
            .collect()
    }
}

/// Position of one stream: shuffled order of the current epoch and a cursor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamCursor {
    pub len: usize,
    pub epoch: u64,
    pub cursor: usize,
}

/// Deterministic batch mixer. Each batch holds exactly `counts()[i]` items
/// of stream `i`; every stream walks its own per-epoch shuffle.
#[derive(Clone, Debug)]
pub struct Mixer {
    spec: MixSpec,
    seed: u64,
    streams: Vec<StreamCursor>,
    orders: Vec<Vec<usize>>,
}

fn epoch_order(seed: u64, stream: usize, epoch: u64, len: usize) -> Vec<usize> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ ((stream as u64 + 1) << 48) ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

impl Mixer {
    pub fn new(stream_lens: &[usize], spec: MixSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        if stream_lens.len() != spec.weights.len() {
            return Err(Error::Config(format!("{} streams but {} mix weights", stream_lens.len(), spec.weights.len())));
        }
        if let Some(i) = stream_lens.iter().position(|&l| l == 0) {
            return Err(Error::Task(format!("stream {i} is empty")));
        }
        let streams: Vec<StreamCursor> =
            stream_lens.iter().map(|&len| StreamCursor { len, epoch: 0, cursor: 0 }).collect();
        Self::restore(spec, seed, streams)
    }

    pub fn restore(spec: MixSpec, seed: u64, streams: Vec<StreamCursor>) -> Result<Self> {
        let orders = streams.iter().enumerate().map(|(i, s)| epoch_order(seed, i, s.epoch, s.len)).collect();
        Ok(Mixer { spec, seed, streams, orders })
    }

    pub fn state(&self) -> &[StreamCursor] {
        &self.streams
    }

    pub fn spec(&self) -> &MixSpec {
        &self.spec
    }

    /// `(stream, item)` pairs of the next batch, grouped by stream.
    pub fn next_batch(&mut self) -> Vec<(usize, usize)> {
        let mut batch = Vec::with_capacity(self.spec.batch_size);
        for (i, n) in self.spec.counts().into_iter().enumerate() {
            for _ in 0..n {
                let s = &mut self.streams[i];
                if s.cursor == s.len {
                    s.epoch += 1;
                    s.cursor = 0;
                    self.orders[i] = epoch_order(self.seed, i, s.epoch, s.len);
                }
                batch.push((i, self.orders[i][s.cursor]));
                self.streams[i].cursor += 1;
            }
        }
        batch
    }
}

impl Iterator for Mixer {
    type Item = Vec<(usize, usize)>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates() {
        assert_eq!(fill_template(DEFAULT_LOC_PROMPT, "car"), "Find the car");
        assert_eq!(fill_template("X", "car"), "car");
    }

    #[test]
    fn counts_follow_ratio() {
        assert_eq!(MixSpec::new(vec![1, 1, 1], 12).unwrap().counts(), vec![4, 4, 4]);
        assert_eq!(MixSpec::new(vec![2, 2, 1, 1, 1, 1], 16).unwrap().counts(), vec![4, 4, 2, 2, 2, 2]);
        assert!(MixSpec::new(vec![1, 1, 1], 10).is_err());
        assert!(MixSpec::new(vec![1, 0], 10).is_err());
    }

    #[test]
    fn mixer_restores_mid_epoch() {
        let spec = MixSpec::new(vec![1, 2], 6).unwrap();
        let mut a = Mixer::new(&[5, 7], spec.clone(), 3).unwrap();
        for _ in 0..4 {
            a.next_batch();
        }
        let mut b = Mixer::restore(spec, 3, a.state().to_vec()).unwrap();
        for _ in 0..10 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }
}
