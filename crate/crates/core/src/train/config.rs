//! Flat `key = value` training configuration with named profiles.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::datakit::{AugmentProfile, SceneConfig};
use crate::error::{io_err, Error, Result};
use crate::fusion::FusionKind;
use crate::model::ModelConfig;
use crate::nn::GROUPS;
use crate::parallel::Parallelism;
use crate::taskkit::{MixSpec, Task, DEFAULT_DET_PROMPT, DEFAULT_LOC_PROMPT};
use crate::textenc::TextConfig;

pub const SEED_ENV: &str = "FINDKIT_SEED";

/// Keys that do not change what is trained and stay out of the config hash.
const RUNTIME_KEYS: [&str; 6] = ["out_dir", "eval_every", "checkpoint_every", "log_every", "parallel", "data_dir"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// 64px scenes and a small network; minutes on one core.
    Toy,
    /// 128px scenes, 3000 steps of batch 12.
    Desk,
    /// Reference recipe: 640px, 150k steps of batch 255 (85 per task at 1:1:1).
    Full,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "toy" => Ok(Profile::Toy),
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(Error::Config(format!("unknown profile {other:?} (expected toy, desk or full)"))),
        }
    }
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Toy => "toy",
            Profile::Desk => "desk",
            Profile::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub profile: Profile,
    pub seed: u64,
    pub steps: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    /// Fractions of `steps` at which the LR is multiplied by `lr_decay`.
    pub milestones: Vec<f64>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Parameter groups whose LR is scaled by `pretrained_lr_mult`.
    pub pretrained: Vec<String>,
    pub pretrained_lr_mult: f64,
    pub tasks: Vec<Task>,
    pub mix: MixSpec,
    pub loc_prompt: String,
    pub det_prompt: String,
    pub loc_negative_rate: f64,
    pub augment: AugmentProfile,
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub data_dir: Option<PathBuf>,
    pub data_seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub out_dir: PathBuf,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub parallel: Parallelism,
}

impl TrainConfig {
    pub fn profile(profile: Profile) -> Self {
        let mut model = ModelConfig::default();
        let mut scene = SceneConfig::default();
        let (steps, batch, base_lr, warmup, augment);
        match profile {
            Profile::Toy => {
                model.image_size = 64;
                model.text = TextConfig { dim: 32, layers: 1, heads: 4, ..TextConfig::default() };
                model.backbone.stem_channels = 16;
                model.backbone.channels = [16, 32, 48, 64];
                model.backbone.blocks_per_stage = 1;
                model.fusion.dim = 32;
                model.fusion.layers = 1;
                model.fusion.heads = 4;
                model.rpn.anchor_size_factor = 3.0;
                model.rpn.batch_per_image = 64;
                model.rpn.pre_nms_train = 128;
                model.rpn.post_nms_train = 32;
                model.rpn.pre_nms_test = 128;
                model.rpn.post_nms_test = 32;
                model.roi.canonical_size = 32.0;
                model.roi.hidden = 128;
                model.roi.batch_per_image = 32;
                model.roi.out_size = 5;
                scene.image_size = 64;
                steps = 2000;
                batch = 12;
                base_lr = 0.02;
                warmup = 100;
                augment = AugmentProfile::None;
            }
            Profile::Desk => {
                model.image_size = 128;
                model.fusion.dim = 64;
                model.fusion.layers = 2;
                model.fusion.heads = 4;
                model.rpn.anchor_size_factor = 3.0;
                model.roi.canonical_size = 64.0;
                model.roi.hidden = 256;
                scene.image_size = 128;
                steps = 3000;
                batch = 12;
                base_lr = 0.02;
                warmup = 200;
                augment = AugmentProfile::Ablation;
            }
            Profile::Full => {
                model.image_size = 640;
                model.text = TextConfig::sized("base").expect("known size");
                model.backbone.channels = [64, 128, 256, 512];
                model.backbone.stem_channels = 64;
                model.rpn.pre_nms_train = 2000;
                model.rpn.post_nms_train = 1000;
                model.rpn.pre_nms_test = 1000;
                model.rpn.post_nms_test = 1000;
                model.roi.batch_per_image = 512;
                model.roi.hidden = 1024;
                scene.image_size = 640;
                steps = 150_000;
                batch = 255;
                base_lr = 0.08;
                warmup = 500;
                augment = AugmentProfile::Full;
            }
        }
        TrainConfig {
            profile,
            seed: 0,
            steps,
            base_lr,
            warmup_steps: warmup,
            milestones: vec![0.7, 0.9],
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 10.0,
            pretrained: Vec::new(),
            pretrained_lr_mult: 0.1,
            tasks: vec![Task::Det, Task::Loc, Task::Rec],
            mix: MixSpec { weights: vec![1, 1, 1], batch_size: batch },
            loc_prompt: DEFAULT_LOC_PROMPT.into(),
            det_prompt: DEFAULT_DET_PROMPT.into(),
            loc_negative_rate: 0.0,
            augment,
            model,
            scene,
            data_dir: None,
            data_seed: 1,
            train_scenes: 500,
            val_scenes: 100,
            out_dir: PathBuf::from("runs/default"),
            eval_every: 0,
            checkpoint_every: 0,
            log_every: 50,
            parallel: Parallelism::default(),
        }
    }

    /// Reads a config file, then applies the `FINDKIT_SEED` override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.seed = s.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an integer")))?;
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. `profile` is applied
    /// first, every other key overrides it.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg = Self::parse_unvalidated(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// [`TrainConfig::parse`] without the final consistency check.
    pub fn parse_unvalidated(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let profile = map.get("profile").map_or(Ok(Profile::Toy), |p| p.parse())?;
        let mut cfg = Self::profile(profile);
        if let Some(size) = map.get("text_size") {
            let sized = TextConfig::sized(size)?;
            cfg.model.text = TextConfig { max_len: cfg.model.text.max_len, ..sized };
        }
        for (k, v) in &map {
            if k != "profile" && k != "text_size" {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        match key {
            "seed" => self.seed = num(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "batch_size" => self.mix.batch_size = num(key, v)?,
            "base_lr" => self.base_lr = num(key, v)?,
            "warmup_steps" => self.warmup_steps = num(key, v)?,
            "lr_milestones" => self.milestones = list(key, v)?,
            "lr_decay" => self.lr_decay = num(key, v)?,
            "momentum" => self.momentum = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "grad_clip" => self.grad_clip = num(key, v)?,
            "pretrained" => self.pretrained = names(v),
            "pretrained_lr_mult" => self.pretrained_lr_mult = num(key, v)?,
            "tasks" => self.tasks = names(v).iter().map(|t| t.parse()).collect::<Result<_>>()?,
            "mix" => self.mix.weights = MixSpec::parse_ratio(v)?,
            "loc_prompt" => self.loc_prompt = v.to_string(),
            "det_prompt" => self.det_prompt = v.to_string(),
            "loc_negative_rate" => self.loc_negative_rate = num(key, v)?,
            "augment" => self.augment = v.parse()?,
            "image_size" => {
                m.image_size = num(key, v)?;
                self.scene.image_size = m.image_size;
            }
            "text_dim" => m.text.dim = num(key, v)?,
            "text_layers" => m.text.layers = num(key, v)?,
            "text_heads" => m.text.heads = num(key, v)?,
            "text_max_len" => m.text.max_len = num(key, v)?,
            "backbone_stem" => m.backbone.stem_channels = num(key, v)?,
            "backbone_channels" => {
                let c: Vec<usize> = list(key, v)?;
                m.backbone.channels =
                    c.try_into().map_err(|_| Error::Config(format!("{key} needs 4 values, got {v:?}")))?;
            }
            "backbone_blocks" => m.backbone.blocks_per_stage = num(key, v)?,
            "fusion_dim" => m.fusion.dim = num(key, v)?,
            "fusion_layers" => m.fusion.layers = num(key, v)?,
            "fusion_heads" => m.fusion.heads = num(key, v)?,
            "fusion_mechanisms" => {
                let kinds: Vec<FusionKind> = names(v).iter().map(|s| s.parse()).collect::<Result<_>>()?;
                m.fusion.mechanisms =
                    kinds.try_into().map_err(|_| Error::Config(format!("{key} needs 4 values, got {v:?}")))?;
            }
            "anchor_size_factor" => m.rpn.anchor_size_factor = num(key, v)?,
            "anchor_ratios" => m.rpn.aspect_ratios = list(key, v)?,
            "rpn_batch" => m.rpn.batch_per_image = num(key, v)?,
            "rpn_pre_nms_train" => m.rpn.pre_nms_train = num(key, v)?,
            "rpn_post_nms_train" => m.rpn.post_nms_train = num(key, v)?,
            "rpn_pre_nms_test" => m.rpn.pre_nms_test = num(key, v)?,
            "rpn_post_nms_test" => m.rpn.post_nms_test = num(key, v)?,
            "rpn_nms" => m.rpn.nms_threshold = num(key, v)?,
            "roi_batch" => m.roi.batch_per_image = num(key, v)?,
            "roi_hidden" => m.roi.hidden = num(key, v)?,
            "roi_out_size" => m.roi.out_size = num(key, v)?,
            "roi_canonical_size" => m.roi.canonical_size = num(key, v)?,
            "score_threshold" => m.infer.score_threshold = num(key, v)?,
            "det_nms" => m.infer.nms_threshold = num(key, v)?,
            "max_detections" => m.infer.max_detections = num(key, v)?,
            "scene_min_objects" => self.scene.min_objects = num(key, v)?,
            "scene_max_objects" => self.scene.max_objects = num(key, v)?,
            "data_dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data_seed" => self.data_seed = num(key, v)?,
            "train_scenes" => self.train_scenes = num(key, v)?,
            "val_scenes" => self.val_scenes = num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "eval_every" => self.eval_every = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "log_every" => self.log_every = num(key, v)?,
            "parallel" => {
                self.parallel = if bool_value(key, v)? { Parallelism::Parallel } else { Parallelism::Sequential }
            }
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) || self.milestones.iter().any(|&m| m <= 0.0 || m >= 1.0) {
            return bad(format!("lr_milestones must be ascending in (0, 1), got {:?}", self.milestones));
        }
        if !(self.base_lr >= 0.0 && self.lr_decay > 0.0 && self.pretrained_lr_mult > 0.0) {
            return bad("base_lr must be ≥ 0, lr_decay and pretrained_lr_mult > 0".into());
        }
        if let Some(g) = self.pretrained.iter().find(|g| !GROUPS.contains(&g.as_str())) {
            return bad(format!("unknown parameter group {g:?} in pretrained (expected one of {GROUPS:?})"));
        }
        if self.tasks.is_empty() {
            return bad("tasks must not be empty".into());
        }
        if self.tasks.len() != self.mix.weights.len() {
            return bad(format!("{} tasks but mix ratio {:?}", self.tasks.len(), self.mix.weights));
        }
        if !(0.0..=1.0).contains(&self.loc_negative_rate) {
            return bad("loc_negative_rate must lie in [0, 1]".into());
        }
        if self.scene.image_size != self.model.image_size && self.data_dir.is_none() {
            return bad("scene and model image sizes differ".into());
        }
        self.mix.validate()?;
        self.model.validate()
    }

    /// LR multiplier of a parameter group.
    pub fn group_lr_mult(&self, group: &str) -> f64 {
        if self.pretrained.iter().any(|g| g == group) {
            self.pretrained_lr_mult
        } else {
            1.0
        }
    }

    /// The canonical `key = value` dump; [`TrainConfig::parse`] inverts it.
    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let join = |xs: &[String]| xs.join(",");
        let fmt_f = |xs: &[f64]| join(&xs.iter().map(|x| x.to_string()).collect::<Vec<_>>());
        let aug = match self.augment {
            AugmentProfile::Full => "full".to_string(),
            AugmentProfile::Ablation => "ablation".to_string(),
            AugmentProfile::None => "none".to_string(),
            AugmentProfile::Custom { lo, hi } => format!("{lo},{hi}"),
        };
        let rows: Vec<(&str, String)> = vec![
            ("profile", self.profile.name().into()),
            ("seed", self.seed.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.mix.batch_size.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("lr_milestones", fmt_f(&self.milestones)),
            ("lr_decay", self.lr_decay.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("pretrained", join(&self.pretrained)),
            ("pretrained_lr_mult", self.pretrained_lr_mult.to_string()),
            ("tasks", join(&self.tasks.iter().map(|t| t.to_string()).collect::<Vec<_>>())),
            ("mix", self.mix.weights.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(":")),
            ("loc_prompt", self.loc_prompt.clone()),
            ("det_prompt", self.det_prompt.clone()),
            ("loc_negative_rate", self.loc_negative_rate.to_string()),
            ("augment", aug),
            ("image_size", m.image_size.to_string()),
            ("text_dim", m.text.dim.to_string()),
            ("text_layers", m.text.layers.to_string()),
            ("text_heads", m.text.heads.to_string()),
            ("text_max_len", m.text.max_len.to_string()),
            ("backbone_stem", m.backbone.stem_channels.to_string()),
            ("backbone_channels", join(&m.backbone.channels.iter().map(|c| c.to_string()).collect::<Vec<_>>())),
            ("backbone_blocks", m.backbone.blocks_per_stage.to_string()),
            ("fusion_dim", m.fusion.dim.to_string()),
            ("fusion_layers", m.fusion.layers.to_string()),
            ("fusion_heads", m.fusion.heads.to_string()),
            ("fusion_mechanisms", join(&m.fusion.mechanisms.iter().map(|k| k.to_string()).collect::<Vec<_>>())),
            ("anchor_size_factor", m.rpn.anchor_size_factor.to_string()),
            ("anchor_ratios", fmt_f(&m.rpn.aspect_ratios)),
            ("rpn_batch", m.rpn.batch_per_image.to_string()),
            ("rpn_pre_nms_train", m.rpn.pre_nms_train.to_string()),
            ("rpn_post_nms_train", m.rpn.post_nms_train.to_string()),
            ("rpn_pre_nms_test", m.rpn.pre_nms_test.to_string()),
            ("rpn_post_nms_test", m.rpn.post_nms_test.to_string()),
            ("rpn_nms", m.rpn.nms_threshold.to_string()),
            ("roi_batch", m.roi.batch_per_image.to_string()),
            ("roi_hidden", m.roi.hidden.to_string()),
            ("roi_out_size", m.roi.out_size.to_string()),
            ("roi_canonical_size", m.roi.canonical_size.to_string()),
            ("score_threshold", m.infer.score_threshold.to_string()),
            ("det_nms", m.infer.nms_threshold.to_string()),
            ("max_detections", m.infer.max_detections.to_string()),
            ("scene_min_objects", self.scene.min_objects.to_string()),
            ("scene_max_objects", self.scene.max_objects.to_string()),
            ("data_dir", self.data_dir.as_ref().map_or(String::new(), |p| p.display().to_string())),
            ("data_seed", self.data_seed.to_string()),
            ("train_scenes", self.train_scenes.to_string()),
            ("val_scenes", self.val_scenes.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("log_every", self.log_every.to_string()),
            ("parallel", (self.parallel == Parallelism::Parallel).to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 over the canonical dump minus runtime-only keys.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for line in self.to_kv().lines() {
            let key = line.split('=').next().unwrap_or("").trim();
            if !RUNTIME_KEYS.contains(&key) {
                h.update(line.as_bytes());
                h.update(b"\n");
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Lines of `key = value`, comments after `#`, blank lines ignored.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
        let k = k.trim().to_string();
        if map.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
        }
    }
    Ok(map)
}

fn num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn list<N: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<N>> {
    names(v).iter().map(|s| num(key, s)).collect()
}

fn names(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

fn bool_value(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}
