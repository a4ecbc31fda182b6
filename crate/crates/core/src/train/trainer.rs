//! The training loop: mixed batches, per-example graphs, fixed-order gradient
//! reduction and SGD updates.

use std::io::Write as _;
use std::path::Path;

use findkit_autograd::{Graph, ParamGrads, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::data::{build_vocabulary, prepare, Splits, Stream};
use super::optim::Sgd;
use super::predict::Predictor;
use super::schedule::Schedule;
use crate::datakit::scene_seed;
use crate::detector::LossReport;
use crate::error::{io_err, Error, Result};
use crate::evalkit::MetricsReport;
use crate::model::Model;
use crate::parallel::par_map;
use crate::taskkit::{MixSpec, Mixer, TaskExample};
use crate::textenc::Vocabulary;

/// Salt separating per-example streams from every other use of the seed.
const EXAMPLE_SALT: u64 = 0x7EA1_5EED;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: LossReport,
    pub grad_norm: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub params: ParamStore<f32>,
    pub optim: Sgd,
    pub mixer: Mixer,
    pub vocab: Vocabulary,
    pub splits: Splits,
    streams: Vec<Stream>,
    schedule: Schedule,
    /// Completed updates.
    pub step: usize,
}

/// Deterministic rng of batch slot `slot` at `step`.
pub fn example_rng(seed: u64, step: usize, slot: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(scene_seed(seed ^ EXAMPLE_SALT, ((step as u64) << 20) | slot as u64))
}

impl Trainer {
    pub fn new(config: TrainConfig, splits: Splits) -> Result<Self> {
        let vocab = build_vocabulary(&splits.train, &config)?;
        Self::with_vocab(config, splits, vocab)
    }

    pub fn with_vocab(config: TrainConfig, splits: Splits, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let model = Model::new(&config.model, vocab.len(), &mut params, config.seed)?;
        let streams: Vec<Stream> = config.tasks.iter().map(|&t| Stream::new(t, &splits.train)).collect();
        if let Some((t, _)) = config.tasks.iter().zip(&streams).find(|(_, s)| s.is_empty()) {
            return Err(Error::Task(format!("training split yields no {t} examples")));
        }
        let lens: Vec<usize> = streams.iter().map(Stream::len).collect();
        let mixer = Mixer::new(&lens, config.mix.clone(), config.seed)?;
        let optim = Sgd::new(&params, config.momentum, config.weight_decay);
        let schedule = Schedule::from_config(&config);
        Ok(Trainer { config, model, params, optim, mixer, vocab, splits, streams, schedule, step: 0 })
    }

    /// Restores parameters, optimizer state, mixer position and step. The
    /// checkpoint must come from the same configuration.
    pub fn resume(config: TrainConfig, splits: Splits, ckpt: &Checkpoint) -> Result<Self> {
        let hash = config.hash();
        if ckpt.header.config_hash != hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {} vs config {hash}",
                ckpt.header.config_hash
            )));
        }
        let vocab = Vocabulary::parse(&ckpt.header.vocab)?;
        let mut t = Self::with_vocab(config, splits, vocab)?;
        ckpt.copy_params_into(&mut t.params)?;
        t.optim.velocity =
            ckpt.velocity.clone().ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        let spec = MixSpec { weights: ckpt.header.mix_weights.clone(), batch_size: ckpt.header.batch_size };
        t.mixer = Mixer::restore(spec, t.config.seed, ckpt.header.streams.clone())?;
        t.step = ckpt.header.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.step, &self.config, &self.vocab, &self.params, Some(&self.optim.velocity), &self.mixer)
    }

    /// Frozen copy for evaluation.
    pub fn predictor(&self) -> Predictor {
        Predictor {
            config: self.config.clone(),
            model: self.model.clone(),
            params: self.params.clone(),
            vocab: self.vocab.clone(),
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        self.schedule.lr_at(step)
    }

    fn batch_examples(&mut self, step: usize) -> Result<Vec<(TaskExample, ChaCha8Rng)>> {
        self.mixer
            .next_batch()
            .into_iter()
            .enumerate()
            .map(|(slot, (stream, item))| {
                let mut rng = example_rng(self.config.seed, step, slot);
                let ex = self.streams[stream].example(item, &self.splits.train, &self.config, &mut rng)?;
                Ok((ex, rng))
            })
            .collect()
    }

    /// Runs one update and returns its batch-mean losses.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step + 1;
        let batch = self.batch_examples(step)?;
        let (model, params, vocab, cfg) = (&self.model, &self.params, &self.vocab, &self.config);
        let results = par_map(&batch, cfg.parallel, |_, (ex, rng)| -> Result<(LossReport, ParamGrads<f32>)> {
            let mut rng = rng.clone();
            let prepared = prepare(ex, vocab, cfg, cfg.augment, &mut rng)?;
            let mut g = Graph::new(params);
            let (loss, report) = model.loss(&mut g, &prepared, &mut rng)?;
            Ok((report, g.backward(loss).params))
        });
        let mut total = LossReport::default();
        let mut grads = ParamGrads::zeros_like(&self.params);
        let mut reports = Vec::with_capacity(results.len());
        for r in results {
            let (report, g) = r?;
            total.add(&report);
            grads.accumulate(&g);
            reports.push(report);
        }
        let n = batch.len() as f64;
        let loss = total.scaled(1.0 / n);
        grads.scale(1.0 / n as f32);
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::NonFinite { step, detail: dump_batch(&batch, &reports) });
        }
        let grad_norm = (grads.sq_norm() as f64).sqrt();
        if self.config.grad_clip > 0.0 && grad_norm > self.config.grad_clip {
            grads.scale((self.config.grad_clip / grad_norm) as f32);
        }
        let lr = self.schedule.lr_at(step);
        let cfg = &self.config;
        self.optim.step(&mut self.params, &grads, lr, |group| cfg.group_lr_mult(group));
        self.step = step;
        Ok(StepLog { step, lr, loss, grad_norm })
    }

    /// Trains to `config.steps`, writing logs, evaluations and checkpoints
    /// under `config.out_dir`. `progress` sees every logged step.
    pub fn run(&mut self, mut progress: impl FnMut(&StepLog, Option<&[MetricsReport]>)) -> Result<()> {
        let dir = self.config.out_dir.clone();
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let cfg_path = dir.join("config.txt");
        std::fs::write(&cfg_path, self.config.to_kv()).map_err(io_err(&cfg_path))?;
        self.vocab.save(&dir.join("vocab.tsv"))?;
        let log_path = dir.join("train_log.jsonl");
        let mut log =
            std::fs::OpenOptions::new().create(true).append(true).open(&log_path).map_err(io_err(&log_path))?;
        while self.step < self.config.steps {
            let entry = self.train_step()?;
            let s = entry.step;
            let every = |n: usize| n > 0 && s % n == 0;
            let last = s == self.config.steps;
            let evals = if every(self.config.eval_every) || (last && self.config.eval_every > 0) {
                let p = self.predictor();
                let reports =
                    self.config.tasks.iter().map(|&t| p.evaluate(&self.splits.val, t)).collect::<Result<Vec<_>>>()?;
                let path = dir.join("eval_log.jsonl");
                let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
                writeln!(f, "{}", serde_json::json!({ "step": s, "reports": reports })).map_err(io_err(&path))?;
                Some(reports)
            } else {
                None
            };
            if every(self.config.log_every) || last || evals.is_some() {
                writeln!(log, "{}", serde_json::to_string(&entry)?).map_err(io_err(&log_path))?;
                progress(&entry, evals.as_deref());
            }
            if every(self.config.checkpoint_every) || last {
                let ckpt = self.checkpoint();
                ckpt.save(&dir.join(format!("ckpt_{s:07}.bin")))?;
                ckpt.save(&dir.join("last.bin"))?;
            }
        }
        Ok(())
    }
}

fn dump_batch(batch: &[(TaskExample, ChaCha8Rng)], reports: &[LossReport]) -> String {
    let items: Vec<serde_json::Value> = batch
        .iter()
        .zip(reports)
        .map(|((ex, _), r)| {
            serde_json::json!({
                "task": ex.task.name(),
                "image_id": ex.image_id,
                "query": ex.query,
                "targets": ex.targets.iter().map(|(b, c)| (b.to_array(), c)).collect::<Vec<_>>(),
                "loss": r,
            })
        })
        .collect();
    format!("non-finite loss or gradient; batch: {}", serde_json::Value::Array(items))
}

/// Loads a checkpoint and resumes, or starts fresh when `path` is `None`.
pub fn trainer_from(config: TrainConfig, resume: Option<&Path>) -> Result<Trainer> {
    let splits = Splits::from_config(&config)?;
    match resume {
        Some(p) => Trainer::resume(config, splits, &Checkpoint::load(p)?),
        None => Trainer::new(config, splits),
    }
}
