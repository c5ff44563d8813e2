//! `mdda make-data`: paired degraded / clean patches with a manifest.
//!
//! Layout of the output directory:
//!
//! ```text
//! clean/00000.png     clean patch
//! degraded/00000.png  the same patch after degradation
//! manifest.json       seed, degradation, sources and per-patch coordinates
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use log::{info, warn};
use mdda::data::{degrade, extract_patches, load_image, save_image, synthetic_scene, DegradeSpec, Degradation, DepthMode};
use mdda::tensor::Tensor;
use mdda::train::derive_seed;
use serde::{Deserialize, Serialize};

use crate::images::list_images;
use crate::Usage;

const STREAM_SCENE: u64 = 0x5C;
const STREAM_CROP: u64 = 0xC7;
const STREAM_DEGRADE: u64 = 0xDE;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Noise,
    Rain,
    Haze,
    LowLight,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Depth {
    Linear,
    Radial,
}

#[derive(Args, Debug)]
pub struct MakeDataArgs {
    /// Directory of clean .png / .ppm images to cut patches from.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    clean: Option<PathBuf>,
    /// Use this many procedural scenes instead of --clean.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Side of the procedural scenes.
    #[arg(long, default_value_t = 128)]
    scene_size: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    patch_size: usize,
    /// Patches cut from each source image.
    #[arg(long, default_value_t = 4)]
    per_image: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Kind::Noise)]
    degradation: Kind,
    /// Noise standard deviation on the 0-255 scale.
    #[arg(long, default_value_t = 25.0)]
    sigma: f64,
    /// Rain streaks per patch.
    #[arg(long)]
    streaks: Option<usize>,
    /// Rain streak length in pixels.
    #[arg(long)]
    length: Option<f64>,
    /// Rain direction from vertical in degrees.
    #[arg(long)]
    angle: Option<f64>,
    /// Rain streak brightness in [0, 1].
    #[arg(long)]
    intensity: Option<f64>,
    /// Haze density.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Haze airlight in (0, 1].
    #[arg(long, default_value_t = 0.9)]
    airlight: f64,
    #[arg(long, value_enum, default_value_t = Depth::Linear)]
    depth: Depth,
    /// Low-light exponent.
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    /// Low-light gain.
    #[arg(long, default_value_t = 0.6)]
    gain: f64,
}

impl MakeDataArgs {
    fn spec(&self) -> anyhow::Result<DegradeSpec> {
        let kind = match self.degradation {
            Kind::Noise => Degradation::GaussianNoise { sigma: self.sigma },
            Kind::Rain => {
                let Degradation::RainStreaks { count, length, angle_deg, intensity } = DegradeSpec::rain(0).kind else {
                    unreachable!("rain preset is rain")
                };
                Degradation::RainStreaks {
                    count: self.streaks.unwrap_or(count),
                    length: self.length.unwrap_or(length),
                    angle_deg: self.angle.unwrap_or(angle_deg),
                    intensity: self.intensity.unwrap_or(intensity),
                }
            }
            Kind::Haze => Degradation::Haze {
                beta: self.beta,
                airlight: self.airlight,
                depth: match self.depth {
                    Depth::Linear => DepthMode::LinearGradient,
                    Depth::Radial => DepthMode::Radial,
                },
            },
            Kind::LowLight => Degradation::LowLight { gamma: self.gamma, gain: self.gain },
        };
        let spec = DegradeSpec { kind, seed: self.seed };
        spec.validate().map_err(|e| Usage(e.to_string()))?;
        Ok(spec)
    }
}

/// Where patches were cut from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Source {
    /// Image file, for `--clean` runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Scene seed, for `--synthetic` runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic_seed: Option<u64>,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub file: String,
    /// Index into `sources`.
    pub source: usize,
    pub top: usize,
    pub left: usize,
    /// Seed the degradation of this patch was drawn with.
    pub degrade_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub patch_size: usize,
    pub degradation: DegradeSpec,
    pub sources: Vec<Source>,
    pub patches: Vec<PatchEntry>,
}

fn sources(a: &MakeDataArgs) -> anyhow::Result<Vec<(Source, Tensor<f32>)>> {
    if let Some(n) = a.synthetic {
        return Ok((0..n as u64)
            .map(|i| {
                let seed = derive_seed(a.seed, STREAM_SCENE, i);
                // quantize so the written patches re-index the scene exactly
                let img = synthetic_scene::<f32>(a.scene_size, a.scene_size, seed).map(|v| (v * 255.0).round() / 255.0);
                let src = Source {
                    path: None,
                    synthetic_seed: Some(seed),
                    height: a.scene_size,
                    width: a.scene_size,
                };
                (src, img)
            })
            .collect());
    }
    let dir = a.clean.as_deref().expect("clap requires --clean without --synthetic");
    if !dir.is_dir() {
        bail!(Usage(format!("--clean {} is not a directory", dir.display())));
    }
    let mut out = Vec::new();
    for p in list_images(dir)? {
        let img = load_image(&p)?;
        let (h, w) = (img.shape()[2], img.shape()[3]);
        out.push((Source { path: Some(p), synthetic_seed: None, height: h, width: w }, img));
    }
    Ok(out)
}

pub fn run(a: MakeDataArgs) -> anyhow::Result<()> {
    if a.patch_size == 0 {
        bail!(Usage("--patch-size must be positive".into()));
    }
    let spec = a.spec()?;
    let srcs = sources(&a)?;
    let clean_dir = a.out.join("clean");
    let degraded_dir = a.out.join("degraded");
    for d in [&clean_dir, &degraded_dir] {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }

    let mut manifest = Manifest {
        seed: a.seed,
        patch_size: a.patch_size,
        degradation: spec.clone(),
        sources: Vec::new(),
        patches: Vec::new(),
    };
    for (i, (src, img)) in srcs.into_iter().enumerate() {
        if src.height < a.patch_size || src.width < a.patch_size {
            warn!("skipping {}: smaller than the {} px patch", describe(&src), a.patch_size);
            continue;
        }
        let patches = extract_patches(&img, a.patch_size, a.per_image, derive_seed(a.seed, STREAM_CROP, i as u64))?;
        let source = manifest.sources.len();
        manifest.sources.push(src);
        for p in patches {
            let k = manifest.patches.len();
            let file = format!("{k:05}.png");
            let degrade_seed = derive_seed(a.seed, STREAM_DEGRADE, k as u64);
            let degraded = degrade(&p.tensor, &spec.with_seed(degrade_seed))?;
            save_image(&p.tensor, &clean_dir.join(&file))?;
            save_image(&degraded, &degraded_dir.join(&file))?;
            manifest.patches.push(PatchEntry { file, source, top: p.top, left: p.left, degrade_seed });
        }
    }
    if manifest.patches.is_empty() {
        bail!("no patches written: no source image is at least {0}x{0}", a.patch_size);
    }
    write_manifest(&a.out.join("manifest.json"), &manifest)?;
    info!("wrote {} pairs from {} source(s) to {}", manifest.patches.len(), manifest.sources.len(), a.out.display());
    Ok(())
}

fn describe(src: &Source) -> String {
    match (&src.path, src.synthetic_seed) {
        (Some(p), _) => p.display().to_string(),
        (None, Some(s)) => format!("synthetic scene {s}"),
        (None, None) => "source".into(),
    }
}

fn write_manifest(path: &Path, m: &Manifest) -> anyhow::Result<()> {
    let json = serde_json::to_string_pretty(m)?;
    std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))
}
