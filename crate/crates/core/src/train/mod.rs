//! Training loop, schedule, optimizer, checkpoints, evaluation, ablations
//! and prediction overlays.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod optim;
pub mod overlay;
pub mod predict;
pub mod schedule;
pub mod trainer;

pub use ablate::{run_ablation, write_csv, AblationRow, Grid};
pub use checkpoint::Checkpoint;
pub use config::{Profile, TrainConfig, SEED_ENV};
pub use data::Splits;
pub use optim::Sgd;
pub use overlay::render_overlay;
pub use predict::{metrics_report, Predictor};
pub use schedule::{lr_at, Schedule};
pub use trainer::{StepLog, Trainer};
