//! FGI-Net: an EfficientNet trunk with shifted-window attention after each
//! stage, a Res_CBAM refinement block and a two-layer regression head that
//! predicts a 3D gaze vector.

pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod gaze;
pub mod gradsuite;
pub mod model;
pub mod training;

pub use error::{Error, ErrorKind, Result};
pub use model::{AblationTarget, FgiNet, ModelConfig};
pub use training::{Preset, TrainPlan};
