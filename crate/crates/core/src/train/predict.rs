//! Inference on a frozen parameter snapshot and per-task evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use findkit_autograd::ParamStore;
use image::RgbImage;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::data::{fit_image, unfit_box};
use crate::datakit::{category_name, Shape, SyntheticDataset};
use crate::detector::{Detection, QueryMode};
use crate::error::{Error, Result};
use crate::evalkit::{average_precision, category_ap, coco_map, precision_at_1, EvalRecord, MetricsReport};
use crate::geometry::BBox;
use crate::model::Model;
use crate::parallel::par_map;
use crate::taskkit::{fill_template, Task};
use crate::textenc::{tokenize, Vocabulary};

/// Model, parameters and vocabulary frozen for inference.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub config: TrainConfig,
    pub model: Model,
    pub params: ParamStore<f32>,
    pub vocab: Vocabulary,
}

impl Predictor {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ckpt.config()?;
        let vocab = ckpt.vocabulary()?;
        let mut params = ParamStore::new();
        let model = Model::new(&config.model, vocab.len(), &mut params, config.seed)?;
        ckpt.copy_params_into(&mut params)?;
        Ok(Predictor { config, model, params, vocab })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Detection for the DET prompt, localization for a filled LOC template,
    /// referring otherwise.
    pub fn query_mode(&self, query: &str) -> QueryMode {
        if norm(query) == norm(&self.config.det_prompt) {
            QueryMode::Detection
        } else if self.loc_category(query).is_some() {
            QueryMode::Localization
        } else {
            QueryMode::Referring
        }
    }

    /// Category named by a filled LOC template.
    pub fn loc_category(&self, query: &str) -> Option<usize> {
        let q = norm(query);
        Shape::ALL
            .iter()
            .map(|s| s.category())
            .find(|&c| q == norm(&fill_template(&self.config.loc_prompt, category_name(c))))
    }

    /// Boxes in the coordinates of `image`.
    pub fn predict_with_mode(&self, image: &RgbImage, query: &str, mode: QueryMode) -> Result<Vec<Detection>> {
        let (tensor, t) = fit_image(image, self.config.model.image_size)?;
        let tokens = tokenize(query, &self.vocab, self.config.model.text.max_len);
        let dets = self.model.infer(&self.params, &tensor, &tokens, mode, &self.config.model.infer)?;
        let (w, h) = (image.width() as f64, image.height() as f64);
        Ok(dets.into_iter().map(|d| Detection { bbox: unfit_box(&d.bbox, &t).clip(w, h), ..d }).collect())
    }

    /// LOC detections carry the queried category.
    pub fn predict(&self, image: &RgbImage, query: &str) -> Result<Vec<Detection>> {
        let mode = self.query_mode(query);
        let mut dets = self.predict_with_mode(image, query, mode)?;
        if let (QueryMode::Localization, Some(c)) = (mode, self.loc_category(query)) {
            dets.iter_mut().for_each(|d| d.category = c);
        }
        Ok(dets)
    }

    /// One record per evaluation query of `task` on `data`. LOC and REC
    /// predictions take the query's category.
    pub fn eval_records(&self, data: &SyntheticDataset, task: Task) -> Result<Vec<EvalRecord>> {
        struct Query {
            scene: usize,
            text: String,
            truth: Vec<(BBox, usize)>,
            relabel: Option<usize>,
            mode: QueryMode,
        }
        let mut queries = Vec::new();
        match task {
            Task::Det => {
                for (i, s) in data.scenes.iter().enumerate() {
                    queries.push(Query {
                        scene: i,
                        text: self.config.det_prompt.clone(),
                        truth: s.targets(),
                        relabel: None,
                        mode: QueryMode::Detection,
                    });
                }
            }
            Task::Loc => {
                for (i, s) in data.scenes.iter().enumerate() {
                    let mut cats: Vec<usize> = s.objects.iter().map(|o| o.shape.category()).collect();
                    cats.sort_unstable();
                    cats.dedup();
                    for c in cats {
                        queries.push(Query {
                            scene: i,
                            text: fill_template(&self.config.loc_prompt, category_name(c)),
                            truth: s.targets().into_iter().filter(|t| t.1 == c).collect(),
                            relabel: Some(c),
                            mode: QueryMode::Localization,
                        });
                    }
                }
            }
            Task::Rec => {
                for e in &data.expressions {
                    let o = &data.scenes[e.scene].objects[e.object];
                    queries.push(Query {
                        scene: e.scene,
                        text: e.text.clone(),
                        truth: vec![(o.bbox, o.shape.category())],
                        relabel: Some(o.shape.category()),
                        mode: QueryMode::Referring,
                    });
                }
            }
        }
        if queries.is_empty() {
            return Err(Error::Eval(format!("dataset has no {task} queries")));
        }
        par_map(&queries, self.config.parallel, |_, q| {
            let scene = &data.scenes[q.scene];
            let mut preds = self.predict_with_mode(&scene.image, &q.text, q.mode)?;
            if let Some(c) = q.relabel {
                preds.iter_mut().for_each(|p| p.category = c);
            }
            Ok(EvalRecord::new(scene.id, &q.text, preds, q.truth.clone()))
        })
        .into_iter()
        .collect()
    }

    pub fn evaluate(&self, data: &SyntheticDataset, task: Task) -> Result<MetricsReport> {
        metrics_report(&self.eval_records(data, task)?, task)
    }
}

fn norm(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Scores records with the metric set of `task`.
pub fn metrics_report(records: &[EvalRecord], task: Task) -> Result<MetricsReport> {
    let per_category_ap50: BTreeMap<String, Option<f64>> =
        Shape::ALL.iter().map(|s| (s.name().to_string(), category_ap(records, s.category(), 0.5))).collect();
    Ok(MetricsReport {
        task: task.name().to_string(),
        num_records: records.len(),
        precision_at_1: if task == Task::Rec { Some(precision_at_1(records)?) } else { None },
        ap50: average_precision(records, 0.5),
        map: if task == Task::Det { coco_map(records) } else { None },
        per_category_ap50,
    })
}
