//! Synthetic degradations, patch sampling, augmentation and image files.

mod degrade;
mod image_io;
mod patches;
mod synthetic;

pub use degrade::{degrade, DegradeSpec, Degradation, DepthMode};
pub use image_io::{load_image, save_image};
pub use patches::{crop_at, extract_patches, flip_augment, Flip, Patch};
pub use synthetic::{synthetic_pairs, synthetic_scene, PairSet};
