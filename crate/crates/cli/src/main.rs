use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use findkit::datakit::{SceneConfig, SyntheticDataset};
use findkit::detector::DetectionRecord;
use findkit::taskkit::Task;
use findkit::train::data::VAL_FIRST_ID;
use findkit::train::trainer::trainer_from;
use findkit::train::{render_overlay, run_ablation, write_csv, Grid, Predictor, Splits, TrainConfig, SEED_ENV};

type Res<T = ()> = Result<T, Box<dyn Error>>;

/// Score cutoff applied by `visualize` unless overridden.
const VISUALIZE_THRESHOLD: f64 = 0.5;

#[derive(Parser)]
#[command(name = "findkit", version, about = "Train, evaluate and run the unified REC / LOC / DET model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file, optionally resuming a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override a config key, `key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a checkpoint on a split and print the metrics table.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// `train` or `val`.
        #[arg(long, default_value = "val")]
        split: String,
        /// `rec`, `loc` or `det`.
        #[arg(long)]
        task: Task,
        /// Dataset directory with `train/` and `val/`; defaults to the checkpoint's data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detections for one image and query, as JSON.
    Predict(PredictArgs),
    /// Like `predict`, and draws the boxes onto a copy of the image.
    Visualize {
        #[command(flatten)]
        args: PredictArgs,
        /// Overlay PNG; defaults to the JSON path with a `.png` extension.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Train and score every variant of a grid file; writes CSV.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        /// CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset as `OUT/train` and `OUT/val`.
    GenData {
        #[arg(long)]
        seed: u64,
        /// Training scenes.
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Validation scenes; defaults to a fifth of `count`.
        #[arg(long)]
        val_count: Option<usize>,
        #[arg(long, default_value_t = 128)]
        image_size: usize,
    },
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    query: String,
    /// Detection JSON path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    image_id: u64,
    /// Minimum score kept; the checkpoint's inference threshold when absent.
    #[arg(long)]
    score_threshold: Option<f64>,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Res {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn train(config: &Path, resume: Option<&Path>, overrides: &[String]) -> Res {
    let mut cfg = TrainConfig::load(config)?;
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| format!("--set expects key=value, got {o:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if !overrides.is_empty() {
        cfg.apply_env()?;
        cfg.validate()?;
    }
    if std::env::var_os(SEED_ENV).is_some() {
        eprintln!("seed {} from {SEED_ENV}", cfg.seed);
    }
    let mut trainer = trainer_from(cfg, resume)?;
    eprintln!(
        "training to step {} from step {}, writing to {}",
        trainer.config.steps,
        trainer.step,
        trainer.config.out_dir.display()
    );
    trainer.run(|log, evals| {
        let l = &log.loss;
        println!(
            "step {:>7}  lr {:.5}  loss {:.4}  rpn_cls {:.4}  rpn_reg {:.4}  box_cls {:.4}  box_reg {:.4}",
            log.step, log.lr, l.total, l.rpn_cls, l.rpn_reg, l.box_cls, l.box_reg
        );
        for r in evals.unwrap_or_default() {
            print!("{}", r.table());
        }
    })?;
    Ok(())
}

fn eval(ckpt: &Path, split: &str, task: Task, data: Option<&Path>, out: Option<&Path>) -> Res {
    let p = Predictor::load(ckpt)?;
    let splits = match data {
        Some(dir) => Splits::load(dir)?,
        None => Splits::from_config(&p.config)?,
    };
    let report = p.evaluate(splits.split(split)?, task)?;
    print!("{}", report.table());
    if let Some(path) = out {
        write(path, report.to_json()?)?;
    }
    Ok(())
}

fn predict(a: &PredictArgs, threshold: Option<f64>) -> Res<(image::RgbImage, Vec<findkit::detector::Detection>)> {
    let mut p = Predictor::load(&a.ckpt)?;
    if let Some(t) = a.score_threshold.or(threshold) {
        p.config.model.infer.score_threshold = t;
    }
    let img = image::open(&a.image).map_err(|e| format!("{}: {e}", a.image.display()))?.to_rgb8();
    let dets = p.predict(&img, &a.query)?;
    let record = DetectionRecord::new(a.image_id, &a.query, &dets);
    write(&a.out, serde_json::to_string_pretty(&record)?)?;
    println!("{} detections ({:?} mode) -> {}", dets.len(), p.query_mode(&a.query), a.out.display());
    Ok((img, dets))
}

fn ablate(grid: &Path, out: Option<&Path>) -> Res {
    let text = fs::read_to_string(grid).map_err(|e| format!("{}: {e}", grid.display()))?;
    let grid = Grid::parse(&text)?;
    eprintln!("{} variants", grid.variants().len());
    let rows =
        run_ablation(&grid, |variant, log| eprintln!("{variant}: step {} loss {:.4}", log.step, log.loss.total))?;
    match out {
        Some(path) => {
            let mut buf = Vec::new();
            write_csv(&rows, &mut buf)?;
            write(path, buf)?;
        }
        None => write_csv(&rows, std::io::stdout().lock())?,
    }
    Ok(())
}

fn gen_data(seed: u64, count: usize, out: &Path, val_count: Option<usize>, image_size: usize) -> Res {
    let scene = SceneConfig { image_size, ..SceneConfig::default() };
    let val_count = val_count.unwrap_or(count / 5);
    let train = SyntheticDataset::generate(seed, count, 0, &scene)?;
    train.export(&out.join("train"))?;
    let val = SyntheticDataset::generate(seed, val_count, VAL_FIRST_ID, &scene)?;
    val.export(&out.join("val"))?;
    println!(
        "{} train scenes ({} expressions), {} val scenes ({} expressions) -> {}",
        train.scenes.len(),
        train.expressions.len(),
        val.scenes.len(),
        val.expressions.len(),
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Res {
    match cli.command {
        Command::Train { config, resume, overrides } => train(&config, resume.as_deref(), &overrides),
        Command::Eval { ckpt, split, task, data, out } => eval(&ckpt, &split, task, data.as_deref(), out.as_deref()),
        Command::Predict(a) => predict(&a, None).map(drop),
        Command::Visualize { args, overlay } => {
            let (img, dets) = predict(&args, Some(VISUALIZE_THRESHOLD))?;
            let path = overlay.unwrap_or_else(|| args.out.with_extension("png"));
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            render_overlay(&img, &dets).save(&path)?;
            println!("overlay -> {}", path.display());
            Ok(())
        }
        Command::Ablate { grid, out } => ablate(&grid, out.as_deref()),
        Command::GenData { seed, count, out, val_count, image_size } => {
            gen_data(seed, count, &out, val_count, image_size)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
