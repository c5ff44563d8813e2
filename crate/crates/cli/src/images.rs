//! Image directories: listing, paired loading, `infer` and `eval`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use log::{info, warn};
use mdda::data::{load_image, save_image, PairSet};
use mdda::metrics::{ChannelMode, EvalReport};
use mdda::train::load_checkpoint;

use crate::Usage;

/// `.png` and `.ppm` files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))?;
    let mut out = Vec::new();
    for e in entries {
        let p = e?.path();
        let ext = p.extension().and_then(|s| s.to_str()).map(str::to_ascii_lowercase);
        if p.is_file() && matches!(ext.as_deref(), Some("png" | "ppm")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads `dir/degraded/NAME` against `dir/clean/NAME` for every clean image.
pub fn load_pair_dir(dir: &Path) -> anyhow::Result<(PairSet<f32>, Vec<String>)> {
    let clean_dir = dir.join("clean");
    let degraded_dir = dir.join("degraded");
    if !clean_dir.is_dir() || !degraded_dir.is_dir() {
        bail!(Usage(format!(
            "{} must contain clean/ and degraded/ subdirectories (see `mdda make-data`)",
            dir.display()
        )));
    }
    let mut set = PairSet::default();
    let mut names = Vec::new();
    for clean in list_images(&clean_dir)? {
        let name = file_name(&clean);
        let degraded = degraded_dir.join(&name);
        if !degraded.exists() {
            bail!("{} has no degraded counterpart {}", clean.display(), degraded.display());
        }
        set.push(load_image(&degraded)?, load_image(&clean)?);
        names.push(name);
    }
    Ok((set, names))
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Checkpoint written by `mdda train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// An image or a directory of .png / .ppm images.
    #[arg(long)]
    input: PathBuf,
    /// Output directory; restored images keep their input file names.
    #[arg(long)]
    output: PathBuf,
}

pub fn infer(a: InferArgs) -> anyhow::Result<()> {
    let inputs = if a.input.is_dir() {
        list_images(&a.input)?
    } else if a.input.is_file() {
        vec![a.input.clone()]
    } else {
        bail!(Usage(format!("input {} does not exist", a.input.display())));
    };
    if a.input.is_dir() && same_dir(&a.input, &a.output) {
        bail!(Usage("--output must differ from --input, or the inputs would be overwritten".into()));
    }
    if inputs.is_empty() {
        warn!("no .png or .ppm images in {}; nothing to do", a.input.display());
        return Ok(());
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    std::fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    for p in &inputs {
        let img = load_image(p)?;
        let out = ck.model.restore(&img).with_context(|| format!("restoring {}", p.display()))?;
        let dest = a.output.join(file_name(p));
        save_image(&out, &dest)?;
        info!("{} -> {}", p.display(), dest.display());
    }
    info!("restored {} image(s) into {}", inputs.len(), a.output.display());
    Ok(())
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of restored images.
    #[arg(long)]
    restored: PathBuf,
    /// Directory of clean references with the same file names.
    #[arg(long)]
    clean: PathBuf,
    /// Score the BT.601 luma channel instead of RGB.
    #[arg(long)]
    y_channel: bool,
    /// Where to write the per-image CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

pub fn eval(a: EvalArgs) -> anyhow::Result<()> {
    for d in [&a.restored, &a.clean] {
        if !d.is_dir() {
            bail!(Usage(format!("{} is not a directory", d.display())));
        }
    }
    let mode = if a.y_channel { ChannelMode::Y } else { ChannelMode::Rgb };
    let mut report = EvalReport::new(mode);
    for restored in list_images(&a.restored)? {
        let name = file_name(&restored);
        let clean = a.clean.join(&name);
        if !clean.exists() {
            bail!("no clean reference {} for {}", clean.display(), restored.display());
        }
        report.push(name, &load_image(&restored)?, &load_image(&clean)?)?;
    }
    if report.rows.is_empty() {
        warn!("no .png or .ppm images in {}", a.restored.display());
    } else {
        println!(
            "{} image(s), {:?}: PSNR {:.4} dB, SSIM {:.6}",
            report.rows.len(),
            mode,
            report.mean_psnr(),
            report.mean_ssim()
        );
    }
    if let Some(csv) = &a.csv {
        report.write_csv(csv)?;
    }
    Ok(())
}
