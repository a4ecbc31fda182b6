//! Shared training scenarios: task-tag invariance, seeded determinism and
//! checkpoint resumption.

use findkit::autograd::{Graph, ParamGrads};
use findkit::datakit::AugmentProfile;
use findkit::detector::LossReport;
use findkit::taskkit::{adapt_det, adapt_loc, adapt_rec, Task, TaskExample};
use findkit::train::data::prepare;
use findkit::train::{Checkpoint, Splits, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn report_bits(r: &LossReport) -> [u64; 5] {
    [r.rpn_cls, r.rpn_reg, r.box_cls, r.box_reg, r.total].map(f64::to_bits)
}

fn grad_bits(g: &ParamGrads<f32>) -> Vec<Vec<u32>> {
    g.iter().map(|(_, t)| t.map_or_else(Vec::new, |t| t.data().iter().map(|v| v.to_bits()).collect())).collect()
}

/// The same image, query and targets under each task tag must give
/// bit-identical losses and gradients. Returns the number of examples checked.
pub fn tag_invariance(cfg: &TrainConfig, splits: &Splits, scenes: usize) -> Result<usize, String> {
    let trainer = Trainer::new(cfg.clone(), splits.clone()).map_err(|e| e.to_string())?;
    let data = &splits.train;
    let mut bases: Vec<TaskExample> = Vec::new();
    for (i, scene) in data.scenes.iter().take(scenes).enumerate() {
        bases.push(adapt_det(scene, &cfg.det_prompt));
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        bases.extend(adapt_loc(scene, &mut rng, &cfg.loc_prompt, 0.0));
        if let Some(e) = data.expressions.iter().find(|e| e.scene == i) {
            bases.push(adapt_rec(scene, Some(e)).map_err(|e| e.to_string())?);
        }
    }
    for (k, base) in bases.iter().enumerate() {
        let mut seen: Option<([u64; 5], Vec<Vec<u32>>, Task)> = None;
        for tag in Task::ALL {
            let ex = TaskExample { task: tag, ..base.clone() };
            let mut rng = ChaCha8Rng::seed_from_u64(k as u64 ^ 0xABCD);
            let prepared =
                prepare(&ex, &trainer.vocab, cfg, AugmentProfile::None, &mut rng).map_err(|e| e.to_string())?;
            let mut g = Graph::new(&trainer.params);
            let (loss, report) = trainer.model.loss(&mut g, &prepared, &mut rng).map_err(|e| e.to_string())?;
            let grads = grad_bits(&g.backward(loss).params);
            let bits = report_bits(&report);
            match &seen {
                None => seen = Some((bits, grads, tag)),
                Some((b, gr, first)) => {
                    if *b != bits {
                        return Err(format!("example {k}: {first} and {tag} tags give different losses"));
                    }
                    if *gr != grads {
                        return Err(format!("example {k}: {first} and {tag} tags give different gradients"));
                    }
                }
            }
        }
    }
    Ok(bases.len())
}

/// Total loss after every step up to `steps`.
pub fn loss_trace(cfg: &TrainConfig, splits: &Splits, steps: usize) -> Result<Vec<f64>, String> {
    let mut t = Trainer::new(cfg.clone(), splits.clone()).map_err(|e| e.to_string())?;
    (0..steps).map(|_| t.train_step().map(|l| l.loss.total).map_err(|e| e.to_string())).collect()
}

/// Trains `at` steps, round-trips a checkpoint through bytes, and compares the
/// next `next` losses of the original and the resumed trainer.
pub fn resume_matches(cfg: &TrainConfig, splits: &Splits, at: usize, next: usize) -> Result<(), String> {
    let err = |e: findkit::Error| e.to_string();
    let mut a = Trainer::new(cfg.clone(), splits.clone()).map_err(err)?;
    for _ in 0..at {
        a.train_step().map_err(err)?;
    }
    let bytes = a.checkpoint().to_bytes().map_err(err)?;
    let ck = Checkpoint::from_bytes(&bytes).map_err(err)?;
    if ck.to_bytes().map_err(err)? != bytes {
        return Err("checkpoint bytes changed on save-load-save".into());
    }
    let mut b = Trainer::resume(cfg.clone(), splits.clone(), &ck).map_err(err)?;
    for _ in 0..next {
        let (la, lb) = (a.train_step().map_err(err)?, b.train_step().map_err(err)?);
        if la.loss.total.to_bits() != lb.loss.total.to_bits() || la != lb {
            return Err(format!("step {}: {:?} vs resumed {:?}", la.step, la.loss, lb.loss));
        }
    }
    Ok(())
}
