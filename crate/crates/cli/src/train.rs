//! `mdda train`.
//!
//! The run directory holds `effective-config.toml` (written before anything
//! else), `checkpoints/`, `loss.csv`, `eval.csv` and `outputs/` with the
//! restored evaluation images.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Args;
use log::{info, warn};
use mdda::data::{save_image, synthetic_pairs, PairSet};
use mdda::metrics::{ChannelMode, EvalReport};
use mdda::network::build_model;
use mdda::train::{derive_seed, load_checkpoint, save_checkpoint, train_loop, OptState, TraceRow};

use crate::config::RunConfig;
use crate::images::load_pair_dir;
use crate::{ModelArgs, Usage};

const STREAM_TRAIN_DATA: u64 = 0x7472;
const STREAM_EVAL_DATA: u64 = 0x6576;

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Initial learning rate of the cosine schedule.
    #[arg(long)]
    lr: Option<f64>,
    /// Continue from `checkpoints/latest.ckpt` in the run directory.
    #[arg(long)]
    resume: bool,
}

impl TrainArgs {
    fn run_config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = self.model.run_config()?;
        if let Some(d) = &self.run_dir {
            cfg.run_dir = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.steps {
            cfg.train.steps = s;
        }
        if let Some(b) = self.batch {
            cfg.train.batch = b;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr_init = lr;
        }
        if cfg.train.batch == 0 {
            bail!(Usage("batch must be at least 1".into()));
        }
        cfg.effective()
    }
}

fn datasets(cfg: &RunConfig) -> anyhow::Result<(PairSet<f32>, PairSet<f32>, Vec<String>)> {
    let d = &cfg.data;
    let train = match &d.train_dir {
        Some(dir) => load_pair_dir(dir)?.0,
        None => {
            let spec = d.degradation.with_seed(derive_seed(cfg.seed, STREAM_TRAIN_DATA, 0));
            synthetic_pairs(d.patches, d.patch_size, &spec, derive_seed(cfg.seed, STREAM_TRAIN_DATA, 1))?
        }
    };
    let (eval, names) = match &d.eval_dir {
        Some(dir) => load_pair_dir(dir)?,
        None => {
            let spec = d.degradation.with_seed(derive_seed(cfg.seed, STREAM_EVAL_DATA, 0));
            let set = synthetic_pairs(d.eval_patches, d.patch_size, &spec, derive_seed(cfg.seed, STREAM_EVAL_DATA, 1))?;
            let names = (0..set.len()).map(|i| format!("eval-{i:03}.png")).collect();
            (set, names)
        }
    };
    if train.is_empty() {
        bail!(Usage("the training set is empty; set data.patches or data.train_dir".into()));
    }
    Ok((train, eval, names))
}

pub fn run(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = a.run_config()?;
    let model_cfg = cfg.model.resolve()?;
    let train_cfg = cfg.train.to_train_config(cfg.seed);
    let dir = &cfg.run_dir;
    let ck_dir = dir.join("checkpoints");
    let out_dir = dir.join("outputs");
    for d in [dir, &ck_dir, &out_dir] {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    std::fs::write(dir.join("effective-config.toml"), cfg.to_toml()?).context("writing effective-config.toml")?;

    let (train, eval, names) = datasets(&cfg)?;
    info!("{} training pairs, {} evaluation pairs", train.len(), eval.len());

    let latest = ck_dir.join("latest.ckpt");
    let (mut model, mut opt) = if a.resume {
        if !latest.exists() {
            bail!(Usage(format!("--resume given but {} does not exist", latest.display())));
        }
        let ck = load_checkpoint(&latest)?;
        if ck.model.config() != &model_cfg {
            bail!(Usage(format!("{} was trained with a different model config", latest.display())));
        }
        info!("resuming from step {}", ck.opt.step);
        (ck.model, ck.opt)
    } else {
        let m = build_model(&model_cfg, cfg.seed)?;
        let opt = OptState::new(m.params(), train_cfg.adamw);
        (m, opt)
    };
    info!("{} parameters, {} steps at batch {}", model.count_params(), train_cfg.steps, train_cfg.batch);

    let loss_path = dir.join("loss.csv");
    let appending = a.resume && loss_path.exists();
    let file = if appending {
        OpenOptions::new().append(true).open(&loss_path)
    } else {
        File::create(&loss_path)
    }
    .with_context(|| format!("opening {}", loss_path.display()))?;
    let mut loss_csv = BufWriter::new(file);
    if !appending {
        writeln!(loss_csv, "{}", TraceRow::CSV_HEADER)?;
    }

    let eval_opt = (!eval.is_empty()).then_some(&eval);
    let log_every = (train_cfg.steps / 20).max(1);
    let mut write_err = None;
    let result = train_loop(&mut model, &mut opt, &train, eval_opt, &train_cfg, Some(&ck_dir), |row| {
        if let Err(e) = writeln!(loss_csv, "{}", row.to_csv()).and_then(|_| loss_csv.flush()) {
            write_err.get_or_insert(e);
        }
        if row.step % log_every == 0 || row.eval_psnr.is_some() {
            match row.eval_psnr {
                Some(p) => info!("step {} lr {:.3e} loss {:.4} eval {:.3} dB", row.step, row.lr, row.loss, p),
                None => info!("step {} lr {:.3e} loss {:.4}", row.step, row.lr, row.loss),
            }
        }
    });
    if let Some(e) = write_err {
        return Err(e).context("writing loss.csv");
    }
    result.context("training stopped; earlier checkpoints are kept")?;
    save_checkpoint(&latest, &model, &opt, Some(&train_cfg))?;

    let mut report = EvalReport::new(ChannelMode::Rgb);
    for ((x, y), name) in eval.degraded.iter().zip(&eval.clean).zip(&names) {
        let out = model.restore(x)?;
        report.push(name.as_str(), &out, y)?;
        save_image(&out, &out_dir.join(name))?;
    }
    report.write_csv(&dir.join("eval.csv"))?;
    if report.rows.is_empty() {
        warn!("no evaluation pairs; eval.csv has only a header");
    } else {
        info!("final eval: PSNR {:.3} dB, SSIM {:.4}", report.mean_psnr(), report.mean_ssim());
    }
    info!("run written to {}", dir.display());
    Ok(())
}
