use crate::blocks::{Block, Downsample, EtbParams, MdabParams, Upsample};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, Ctx, ParamBuilder, ParamStore};
use crate::tensor::{Float, Tape, Tensor, Var};

use super::complexity::{profile, Profile};
use super::config::{ModelConfig, StageKind, STAGES, STAGE_NAMES};

/// Inputs to the feature path must have sides divisible by this.
pub const SIZE_MULTIPLE: usize = 8;

/// Layer structure of a built model. Parameters live in the model's store.
#[derive(Clone, Debug)]
pub struct Arch {
    /// `3x3, 3 -> C0`, followed by ReLU.
    pub embed: Conv2d,
    /// Block stacks, one per slot (see [`STAGE_NAMES`]).
    pub stages: Vec<Vec<Block>>,
    /// `down[l]` leaves encoder level `l + 1`.
    pub down: Vec<Downsample>,
    /// `up[l]` enters decoder level `l + 1`.
    pub up: Vec<Upsample>,
    /// 1x1 reduction after the skip concat; none at level 1.
    pub reduce: Vec<Option<Conv2d>>,
    /// `3x3, 2C0 -> C0` then `3x3, C0 -> 3`, no activation.
    pub tail: [Conv2d; 2],
}

/// A restoration network: configuration, layer structure and parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    arch: Arch,
    params: ParamStore<T>,
}

/// Builds an `f32` model with parameters drawn from `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model<f32>> {
    Model::build(cfg, seed)
}

impl<T: Float> Model<T> {
    /// Deterministic construction followed by a symbolic shape check on a
    /// `64x64` probe.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let arch = build_arch(cfg, &mut ParamBuilder::new(&mut store, seed))?;
        let model = Model {
            config: cfg.clone(),
            arch,
            params: store,
        };
        profile(&model, 64, 64)?;
        Ok(model)
    }

    /// Rebuilds the structure for `cfg` and installs `tensors` by name,
    /// checking that names and shapes match exactly.
    pub fn from_named(cfg: &ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut model = Self::build(cfg, 0)?;
        if tensors.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            let id = model
                .params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if model.params.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    model.params.get(id).shape(),
                    t.shape()
                )));
            }
            model.params.set(id, t)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Exact number of learnable scalars.
    pub fn count_params(&self) -> usize {
        self.params.total_scalars()
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    /// Sets every parameter to zero except the attention temperatures, which
    /// stay at one since they divide.
    pub fn zero_weights(&mut self) {
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            let fill = if self.params.name(id).ends_with("temperature") {
                T::one()
            } else {
                T::zero()
            };
            self.params.get_mut(id).data_mut().fill(fill);
        }
    }

    /// Complexity profile of one `1 x 3 x h x w` forward.
    pub fn profile(&self, h: usize, w: usize) -> Result<Profile> {
        profile(self, h, w)
    }

    /// Feature path plus global residual for inputs whose sides are
    /// multiples of [`SIZE_MULTIPLE`].
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (_, c, h, w) = x.value().dims4()?;
        if c != 3 {
            return Err(Error::dim("restore", format!("expected 3 input channels, got {c}")));
        }
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::dim(
                "restore",
                format!("{h}x{w} is not a multiple of {SIZE_MULTIPLE}; use restore or forward_padded"),
            ));
        }
        let a = &self.arch;
        let f = a.embed.forward(ctx, x)?;
        let mut f = ctx.tape().relu(&f)?;
        let mut skips = Vec::with_capacity(3);
        for level in 0..3 {
            f = run_stack(ctx, &a.stages[level], f)?;
            skips.push(f.clone());
            f = a.down[level].forward(ctx, &f)?;
        }
        f = run_stack(ctx, &a.stages[3], f)?;
        for level in (0..3).rev() {
            let up = a.up[level].forward(ctx, &f)?;
            f = ctx.tape().concat_channels(&[&up, &skips[level]])?;
            if let Some(r) = &a.reduce[level] {
                f = r.forward(ctx, &f)?;
            }
            f = run_stack(ctx, &a.stages[6 - level], f)?;
        }
        let f = a.tail[0].forward(ctx, &f)?;
        let f = a.tail[1].forward(ctx, &f)?;
        ctx.tape().add(x, &f)
    }

    /// [`forward`](Self::forward) for any size: reflect-pads the bottom and
    /// right up to a multiple of [`SIZE_MULTIPLE`] and crops the result.
    pub fn forward_padded(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (_, _, h, w) = x.value().dims4()?;
        let ph = (SIZE_MULTIPLE - h % SIZE_MULTIPLE) % SIZE_MULTIPLE;
        let pw = (SIZE_MULTIPLE - w % SIZE_MULTIPLE) % SIZE_MULTIPLE;
        if ph == 0 && pw == 0 {
            return self.forward(ctx, x);
        }
        let padded = ctx.tape().reflect_pad(x, ph, pw)?;
        let y = self.forward(ctx, &padded)?;
        ctx.tape().crop(&y, h, w)
    }

    /// Inference on an `[N, 3, H, W]` image batch.
    pub fn restore(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let mut ctx = Ctx::bind(&mut tape, &self.params);
        let x = Var::constant(img.clone());
        Ok(self.forward_padded(&mut ctx, &x)?.to_tensor())
    }
}

fn run_stack<T: Float>(ctx: &mut Ctx<'_, T>, blocks: &[Block], mut f: Var<T>) -> Result<Var<T>> {
    for b in blocks {
        f = b.forward(ctx, &f)?;
    }
    Ok(f)
}

fn build_stage<T: Float>(cfg: &ModelConfig, b: &mut ParamBuilder<'_, T>, slot: usize) -> Result<Vec<Block>> {
    let name = STAGE_NAMES[slot];
    let width = cfg.block_width(slot);
    let named = |e: Error| Error::Config(format!("stage {name}: {e}"));
    b.scope(name, |b| {
        (0..cfg.block_count(slot))
            .map(|i| {
                let id = i.to_string();
                let block = match cfg.layout.0[slot] {
                    StageKind::Cnn => Block::Mdab(MdabParams::new(b, &id, width, cfg.expansion)?),
                    StageKind::Transformer => Block::Etb(EtbParams::new(
                        b,
                        &id,
                        width,
                        cfg.expansion,
                        cfg.heads,
                        cfg.ffn_shortcut_source,
                    )?),
                };
                Ok(block)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(named)
    })
}

fn build_arch<T: Float>(cfg: &ModelConfig, b: &mut ParamBuilder<'_, T>) -> Result<Arch> {
    let dims = cfg.dims();
    let c0 = cfg.base_dim;
    let embed = b.conv("embed", ConvSpec::same(3, c0, 3))?;
    let mut stages: Vec<Vec<Block>> = Vec::with_capacity(STAGES);
    let mut down = Vec::with_capacity(3);
    for level in 0..3 {
        stages.push(build_stage(cfg, b, level)?);
        down.push(Downsample::new(b, &format!("down{}", level + 1), dims[level])?);
    }
    stages.push(build_stage(cfg, b, 3)?);

    let mut up: Vec<Option<Upsample>> = vec![None, None, None];
    let mut reduce: Vec<Option<Conv2d>> = vec![None, None, None];
    for level in (0..3).rev() {
        let n = level + 1;
        up[level] = Some(Upsample::new(b, &format!("up{n}"), dims[level + 1])?);
        if level > 0 {
            let c = dims[level];
            reduce[level] = Some(b.conv(&format!("reduce{n}"), ConvSpec::same(2 * c, c, 1))?);
        }
        stages.push(build_stage(cfg, b, 6 - level)?);
    }
    let tail = [
        b.conv("tail1", ConvSpec::same(cfg.block_width(6), c0, 3))?,
        b.conv("tail2", ConvSpec::same(c0, 3, 3))?,
    ];
    Ok(Arch {
        embed,
        stages,
        down,
        up: up.into_iter().map(|u| u.expect("every level has an upsample")).collect(),
        reduce,
        tail,
    })
}
