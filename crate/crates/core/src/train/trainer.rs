use std::path::Path;

use rand::rngs::Xoshiro256PlusPlus;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::{Flip, PairSet};
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::network::Model;
use crate::nn::Ctx;
use crate::tensor::{Tape, Tensor, Var};

use super::checkpoint::save_checkpoint;
use super::loss::psnr_loss;
use super::optim::{adamw_step, cosine_lr, AdamW, OptState, Schedule};

/// Training-run settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Total optimizer steps of the run, including steps before a resume.
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    #[serde(default = "default_lr_init")]
    pub lr_init: f64,
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    #[serde(default)]
    pub adamw: AdamW,
    /// Random horizontal / vertical flips of each pair.
    #[serde(default = "default_true")]
    pub augment: bool,
    /// Evaluate every this many steps (and after the last); 0 disables.
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    /// Checkpoint every this many steps (and after the last); 0 disables.
    #[serde(default)]
    pub checkpoint_every: u64,
}

fn default_lr_init() -> f64 {
    Schedule::LR_INIT
}
fn default_lr_min() -> f64 {
    Schedule::LR_MIN
}
fn default_true() -> bool {
    true
}
fn default_eval_every() -> u64 {
    100
}

impl TrainConfig {
    pub fn new(steps: u64, batch: usize, seed: u64) -> Self {
        TrainConfig {
            steps,
            batch,
            seed,
            lr_init: default_lr_init(),
            lr_min: default_lr_min(),
            adamw: AdamW::default(),
            augment: true,
            eval_every: default_eval_every(),
            checkpoint_every: 0,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            lr_init: self.lr_init,
            lr_min: self.lr_min,
            total_steps: self.steps,
        }
    }
}

/// One line of the loss trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    /// 1-based index of the optimizer step.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Mean PSNR on the held-out pairs, when evaluated at this step.
    pub eval_psnr: Option<f64>,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "step,lr,loss,eval_psnr";

    pub fn to_csv(&self) -> String {
        let eval = self.eval_psnr.map(|p| format!("{p:.6}")).unwrap_or_default();
        format!("{},{:e},{:.6},{}", self.step, self.lr, self.loss, eval)
    }
}

/// SplitMix64 finalizer over a combination of the inputs; used to give every
/// (seed, stream, index) triple an independent generator.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_EPOCH: u64 = 1;
const STREAM_FLIP: u64 = 2;

/// Dataset indices of the `batch` samples used at optimizer step `step`
/// (0-based). Each epoch walks a fresh permutation seeded by the epoch
/// number, so the order depends only on `(seed, step)`.
pub fn batch_indices(len: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for j in 0..batch as u64 {
        let q = step * batch as u64 + j;
        let epoch = q / len as u64;
        let pos = (q % len as u64) as usize;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..len).collect();
            perm.shuffle(&mut Xoshiro256PlusPlus::seed_from_u64(derive_seed(seed, STREAM_EPOCH, epoch)));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("set above").1[pos]);
    }
    out
}

fn assemble(data: &PairSet<f32>, cfg: &TrainConfig, step: u64) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let idx = batch_indices(data.len(), cfg.batch, cfg.seed, step);
    let mut deg = Vec::with_capacity(idx.len());
    let mut clean = Vec::with_capacity(idx.len());
    for (j, &i) in idx.iter().enumerate() {
        let (d, c) = (&data.degraded[i], &data.clean[i]);
        if cfg.augment {
            let f = Flip::from_seed(derive_seed(cfg.seed, STREAM_FLIP, step * cfg.batch as u64 + j as u64));
            deg.push(f.apply(d)?);
            clean.push(f.apply(c)?);
        } else {
            deg.push(d.clone());
            clean.push(c.clone());
        }
    }
    Ok((Tensor::stack(&deg)?, Tensor::stack(&clean)?))
}

/// Forward, backward and one AdamW update on a batch. Returns the loss
/// before the update.
pub fn train_step(
    model: &mut Model<f32>,
    opt: &mut OptState<f32>,
    degraded: &Tensor<f32>,
    clean: &Tensor<f32>,
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = {
        let mut tape = Tape::new();
        let mut ctx = Ctx::bind(&mut tape, model.params());
        let x = Var::constant(degraded.clone());
        let y = Var::constant(clean.clone());
        let pred = model.forward_padded(&mut ctx, &x)?;
        let params = ctx.params().to_vec();
        let loss = psnr_loss(&mut tape, &pred, &y)?;
        let mut g = tape.backward(&loss)?;
        let grads: Vec<Option<Tensor<f32>>> = params.iter().map(|p| g.take(p)).collect();
        (loss.value().data()[0] as f64, grads)
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    adamw_step(model.params_mut(), &grads, opt, lr)?;
    Ok(loss)
}

/// Mean PSNR of the restored degraded images against their clean versions.
pub fn evaluate(model: &Model<f32>, pairs: &PairSet<f32>) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let mut total = 0.0;
    for (d, c) in pairs.degraded.iter().zip(&pairs.clean) {
        total += psnr(&model.restore(d)?, c)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Runs optimizer steps `opt.step + 1 ..= cfg.steps`, so a state loaded from
/// a checkpoint continues where it stopped. `on_row` sees every trace row as
/// it is produced. Checkpoints go to `checkpoint_dir` as `step-NNNNNN.ckpt`
/// and `latest.ckpt`. A non-finite loss or gradient aborts the run and leaves
/// earlier checkpoints in place.
pub fn train_loop(
    model: &mut Model<f32>,
    opt: &mut OptState<f32>,
    data: &PairSet<f32>,
    eval: Option<&PairSet<f32>>,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    on_row: impl FnMut(&TraceRow),
) -> Result<Vec<TraceRow>> {
    train_until(model, opt, data, eval, cfg, cfg.steps, checkpoint_dir, on_row)
}

/// [`train_loop`] that stops after step `stop` (capped at `cfg.steps`)
/// while keeping the learning-rate schedule of the full run, as if the run
/// had been interrupted there.
#[allow(clippy::too_many_arguments)]
pub fn train_until(
    model: &mut Model<f32>,
    opt: &mut OptState<f32>,
    data: &PairSet<f32>,
    eval: Option<&PairSet<f32>>,
    cfg: &TrainConfig,
    stop: u64,
    checkpoint_dir: Option<&Path>,
    mut on_row: impl FnMut(&TraceRow),
) -> Result<Vec<TraceRow>> {
    let stop = stop.min(cfg.steps);
    if stop > opt.step && data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let sch = cfg.schedule();
    let mut trace = Vec::new();
    while opt.step < stop {
        let s = opt.step;
        let lr = cosine_lr(s, &sch);
        let (x, y) = assemble(data, cfg, s)?;
        let loss = train_step(model, opt, &x, &y, lr)?;
        let done = opt.step;
        let last = done == cfg.steps;
        let due = |every: u64| every > 0 && (done.is_multiple_of(every) || last);
        let eval_psnr = match eval {
            Some(e) if due(cfg.eval_every) => Some(evaluate(model, e)?),
            _ => None,
        };
        if let Some(dir) = checkpoint_dir {
            if due(cfg.checkpoint_every) {
                save_checkpoint(&dir.join(format!("step-{done:06}.ckpt")), model, opt, Some(cfg))?;
                save_checkpoint(&dir.join("latest.ckpt"), model, opt, Some(cfg))?;
            }
        }
        let row = TraceRow {
            step: done,
            lr,
            loss,
            eval_psnr,
        };
        on_row(&row);
        trace.push(row);
    }
    Ok(trace)
}
