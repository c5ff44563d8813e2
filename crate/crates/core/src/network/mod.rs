//! The U-shaped restoration network and its complexity accounting.

mod complexity;
mod config;
mod model;

pub use complexity::{count_flops, count_params_in, profile, CountConvention, PartCost, Profile};
pub use config::{Layout, ModelConfig, StageKind, STAGES, STAGE_NAMES};
pub use model::{build_model, Arch, Model, SIZE_MULTIPLE};
