//! Grid ablations: every combination of the listed alternatives trained with
//! the short schedule and scored on the validation split.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use super::config::{parse_kv, TrainConfig};
use super::data::Splits;
use super::trainer::{StepLog, Trainer};
use crate::datakit::AugmentProfile;
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::taskkit::Task;

/// Fraction of the profile schedule used when the grid does not set `steps`.
pub const SHORT_SCHEDULE: f64 = 0.25;

/// Grid-only keys: the mechanism applied at `fusion_levels`, product elsewhere.
const FUSION_KEY: &str = "fusion";
const LEVELS_KEY: &str = "fusion_levels";

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub fixed: BTreeMap<String, String>,
    /// Keys with several `|`-separated alternatives, in file order of key name.
    pub axes: Vec<(String, Vec<String>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub settings: Vec<(String, String)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub status: String,
    pub reason: String,
    pub rec_precision_at_1: Option<f64>,
    pub loc_ap50: Option<f64>,
    pub det_ap50: Option<f64>,
    pub det_map: Option<f64>,
    pub final_loss: Option<f64>,
}

impl Grid {
    /// `key = a | b | c` declares an axis; single values are fixed.
    pub fn parse(text: &str) -> Result<Self> {
        let mut fixed = BTreeMap::new();
        let mut axes = Vec::new();
        for (k, v) in parse_kv(text)? {
            let alts: Vec<String> = v.split('|').map(|s| s.trim().to_string()).collect();
            if alts.len() > 1 {
                axes.push((k, alts));
            } else {
                fixed.insert(k, v);
            }
        }
        Ok(Grid { fixed, axes })
    }

    /// Cartesian product of the axes, first axis varying slowest.
    pub fn variants(&self) -> Vec<Variant> {
        let mut out = vec![Vec::<(String, String)>::new()];
        for (k, alts) in &self.axes {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    alts.iter().map(move |a| {
                        let mut p = prefix.clone();
                        p.push((k.clone(), a.clone()));
                        p
                    })
                })
                .collect();
        }
        out.into_iter()
            .map(|settings| {
                let name = if settings.is_empty() {
                    "base".to_string()
                } else {
                    settings.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
                };
                Variant { name, settings }
            })
            .collect()
    }

    /// Training config of one variant.
    pub fn config(&self, v: &Variant) -> Result<TrainConfig> {
        let mut map = self.fixed.clone();
        map.extend(v.settings.iter().cloned());
        let fusion = map.remove(FUSION_KEY);
        let levels = map.remove(LEVELS_KEY);
        let text: String = map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        let mut cfg = TrainConfig::parse_unvalidated(&text)?;
        if !map.contains_key("steps") {
            cfg.steps = ((cfg.steps as f64 * SHORT_SCHEDULE).ceil() as usize).max(1);
        }
        let unit: usize = cfg.mix.weights.iter().sum();
        if unit > 0 && cfg.mix.batch_size % unit != 0 {
            cfg.mix.batch_size = unit * ((cfg.mix.batch_size as f64 / unit as f64).round() as usize).max(1);
        }
        if !map.contains_key("augment") {
            cfg.augment = AugmentProfile::Ablation;
        }
        if fusion.is_some() || levels.is_some() {
            let kind: FusionKind = fusion.as_deref().unwrap_or("attention").parse()?;
            let levels = parse_levels(levels.as_deref().unwrap_or("4,5"))?;
            cfg.model.fusion = cfg.model.fusion.clone().with_levels(kind, &levels)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Accepts `5`, `4,5` and the tuple spellings `(5,)`, `(4, 5)`.
pub fn parse_levels(s: &str) -> Result<Vec<usize>> {
    s.trim_matches(|c| c == '(' || c == ')' || c == ' ')
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| Error::Config(format!("bad fusion level {p:?} in {s:?}"))))
        .collect()
}

/// Trains and evaluates every variant. Invalid combinations become skipped
/// rows; `progress` receives `(variant, log)` for each logged step.
pub fn run_ablation(grid: &Grid, mut progress: impl FnMut(&str, &StepLog)) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for v in grid.variants() {
        let mut row = AblationRow { variant: v.name.clone(), ..AblationRow::default() };
        let cfg = match grid.config(&v) {
            Ok(c) => c,
            Err(e) => {
                row.status = "skipped".into();
                row.reason = e.to_string();
                rows.push(row);
                continue;
            }
        };
        let splits = Splits::from_config(&cfg)?;
        let mut trainer = Trainer::new(cfg.clone(), splits)?;
        let mut last = None;
        while trainer.step < cfg.steps {
            let log = trainer.train_step()?;
            if cfg.log_every > 0 && log.step % cfg.log_every == 0 {
                progress(&v.name, &log);
            }
            last = Some(log.loss.total);
        }
        row.final_loss = last;
        let p = trainer.predictor();
        for &t in &cfg.tasks {
            let m = p.evaluate(&trainer.splits.val, t)?;
            match t {
                Task::Rec => row.rec_precision_at_1 = m.precision_at_1,
                Task::Loc => row.loc_ap50 = m.ap50,
                Task::Det => {
                    row.det_ap50 = m.ap50;
                    row.det_map = m.map;
                }
            }
        }
        row.status = "ok".into();
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[AblationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::Data(format!("csv: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_are_the_cartesian_product() {
        let g = Grid::parse("profile = toy\nfusion = concat | product | attention\nfusion_dim = 32 | 48\n").unwrap();
        let v = g.variants();
        assert_eq!(v.len(), 6);
        assert_eq!(v[0].name, "fusion=concat;fusion_dim=32");
        assert_eq!(v[5].name, "fusion=attention;fusion_dim=48");
    }

    #[test]
    fn levels_spellings() {
        assert_eq!(parse_levels("(5,)").unwrap(), vec![5]);
        assert_eq!(parse_levels("(4, 5)").unwrap(), vec![4, 5]);
        assert_eq!(parse_levels("3,4,5").unwrap(), vec![3, 4, 5]);
    }

    #[test]
    fn indivisible_heads_are_rejected() {
        let g = Grid::parse("profile = toy\nfusion_dim = 30 | 32\nfusion_heads = 4\n").unwrap();
        let v = g.variants();
        assert!(g.config(&v[0]).is_err());
        let ok = g.config(&v[1]).unwrap();
        assert_eq!(ok.steps, 500);
        assert_eq!(ok.augment, AugmentProfile::Ablation);
    }
}
