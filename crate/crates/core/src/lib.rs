//! Unified referring-expression, text-localization and detection model with
//! multi-level image-text fusion, trained on synthetic desk-scale scenes.

pub mod datakit;
pub mod detector;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod geometry;
pub mod imenc;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod taskkit;
pub mod textenc;
pub mod train;

pub use error::{Error, Result};
pub use findkit_autograd as autograd;
