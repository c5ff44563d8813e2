//! Building blocks of the encoder–decoder: the dynamic-convolution block
//! (MDAB), the transformer block with transposed channel attention (ETB), and
//! the pixel-(un)shuffle scale transitions.

use serde::{Deserialize, Serialize};

use crate::dynconv::{mdconv_forward, DynKernel};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, Ctx, LayerNorm, ParamBuilder, ParamId};
use crate::tensor::{Float, Var};

/// Which tensor feeds the outer shortcut terms `f1x1(s) + s` of an ETB.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortcutSource {
    /// The block input (the shortcut as literally written).
    #[default]
    BlockInput,
    /// The output of the attention sub-block.
    TsaOutput,
}

/// Width of a gated feed-forward path: `expansion * channels`, which must be
/// an even integer so it can be halved by the channel gate.
pub fn expanded_width(channels: usize, expansion: f64) -> Result<usize> {
    let w = expansion * channels as f64;
    if !(w.is_finite() && w > 0.0) || (w - w.round()).abs() > 1e-9 || !(w.round() as usize).is_multiple_of(2) {
        return Err(Error::Config(format!(
            "expansion {expansion} on {channels} channels gives width {w}, need a positive even integer"
        )));
    }
    Ok(w.round() as usize)
}

/// Parameters of one MDAB.
#[derive(Clone, Debug)]
pub struct MdabParams {
    pub norm: LayerNorm,
    pub expand: Conv2d,
    pub dw: Conv2d,
    pub mdconv: DynKernel,
    pub project: Conv2d,
    pub channels: usize,
}

impl MdabParams {
    pub fn new<T: Float>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize, expansion: f64) -> Result<Self> {
        let wide = expanded_width(channels, expansion)?;
        let half = wide / 2;
        b.scope(name, |b| {
            Ok(MdabParams {
                norm: b.layer_norm("norm", channels)?,
                expand: b.conv("expand", ConvSpec::same(channels, wide, 1))?,
                dw: b.conv("dwconv", ConvSpec::depthwise(wide, 3))?,
                mdconv: DynKernel::new(b, "mdconv", half, half, 3)?,
                project: b.conv("project", ConvSpec::same(half, channels, 1))?,
                channels,
            })
        })
    }
}

/// `x + project(mdconv(c1 ⊙ c2))` where `(c1, c2) = chunk(dw(expand(ln(x))))`.
pub fn mdab_forward<T: Float>(ctx: &mut Ctx<'_, T>, x: &Var<T>, p: &MdabParams) -> Result<Var<T>> {
    check_channels("mdab", x, p.channels)?;
    let h = p.norm.forward(ctx, x)?;
    let h = p.expand.forward(ctx, &h)?;
    let h = p.dw.forward(ctx, &h)?;
    let (c1, c2) = ctx.tape().chunk2(&h)?;
    let gated = ctx.tape().mul(&c1, &c2)?;
    let h = mdconv_forward(ctx, &gated, &p.mdconv)?;
    let h = p.project.forward(ctx, &h)?;
    ctx.tape().add(x, &h)
}

/// Parameters of one ETB.
#[derive(Clone, Debug)]
pub struct EtbParams {
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub qkv_point: Conv2d,
    pub qkv_dw: Conv2d,
    pub attn_out: Conv2d,
    /// Softmax temperature, `[1]`.
    pub temperature: ParamId,
    /// Attention shortcut scale, `[C]`.
    pub k1: ParamId,
    pub ffn_point: Conv2d,
    pub ffn_dw: Conv2d,
    /// Gate output scale, `[e*C/2]`.
    pub k2: ParamId,
    /// Maps the gate output back to `C` when `e*C/2 != C`.
    pub ffn_project: Option<Conv2d>,
    pub shortcut_point: Conv2d,
    pub channels: usize,
    pub heads: usize,
    pub shortcut_source: ShortcutSource,
}

impl EtbParams {
    pub fn new<T: Float>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        expansion: f64,
        heads: usize,
        shortcut_source: ShortcutSource,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: {heads} attention heads do not divide {channels} channels"
            )));
        }
        let wide = expanded_width(channels, expansion)?;
        let half = wide / 2;
        b.scope(name, |b| {
            Ok(EtbParams {
                norm1: b.layer_norm("norm1", channels)?,
                norm2: b.layer_norm("norm2", channels)?,
                qkv_point: b.conv("qkv", ConvSpec::same(channels, 3 * channels, 1))?,
                qkv_dw: b.conv("qkv_dwconv", ConvSpec::depthwise(3 * channels, 3))?,
                attn_out: b.conv("attn_out", ConvSpec::same(channels, channels, 1))?,
                temperature: b.constant("temperature", &[1], 1.0)?,
                k1: b.constant("k1", &[channels], 1.0)?,
                ffn_point: b.conv("ffn_in", ConvSpec::same(channels, wide, 1))?,
                ffn_dw: b.conv("ffn_dwconv", ConvSpec::depthwise(wide, 3))?,
                k2: b.constant("k2", &[half], 1.0)?,
                ffn_project: if half != channels {
                    Some(b.conv("ffn_out", ConvSpec::same(half, channels, 1))?)
                } else {
                    None
                },
                shortcut_point: b.conv("shortcut", ConvSpec::same(channels, channels, 1))?,
                channels,
                heads,
                shortcut_source,
            })
        })
    }
}

/// Intermediate results of the attention sub-block.
#[derive(Clone, Debug)]
pub struct TsaOutput<T> {
    /// `attn_out(F) + k1 ⊙ x`, `[N, C, H, W]`.
    pub output: Var<T>,
    /// Row-stochastic channel attention, `[N*heads, C/heads, C/heads]`.
    pub attention: Var<T>,
    /// `A · V`, `[N*heads, C/heads, H*W]`.
    pub features: Var<T>,
}

/// Channel ("transposed") self-attention: the attention map is `C x C`, so
/// cost grows linearly with the number of pixels.
pub fn transposed_self_attention<T: Float>(
    ctx: &mut Ctx<'_, T>,
    x: &Var<T>,
    p: &EtbParams,
) -> Result<TsaOutput<T>> {
    check_channels("etb", x, p.channels)?;
    let (n, c, h, w) = x.value().dims4()?;
    let head_c = c / p.heads;
    let mat = [n * p.heads, head_c, h * w];

    let y = p.norm1.forward(ctx, x)?;
    let y = p.qkv_point.forward(ctx, &y)?;
    let qkv = p.qkv_dw.forward(ctx, &y)?;
    let tape = ctx.tape();
    let q = tape.slice_channels(&qkv, 0, c)?;
    let k = tape.slice_channels(&qkv, c, c)?;
    let v = tape.slice_channels(&qkv, 2 * c, c)?;
    let q = tape.reshape(&q, &mat)?;
    let k = tape.reshape(&k, &mat)?;
    let v = tape.reshape(&v, &mat)?;

    let kt = tape.transpose_last_two(&k)?;
    let logits = tape.matmul(&q, &kt)?;
    let alpha = ctx.p(p.temperature);
    let tape = ctx.tape();
    let logits = tape.div_scalar(&logits, &alpha)?;
    let attention = tape.softmax(&logits)?;
    let features = tape.matmul(&attention, &v)?;
    let f = tape.reshape(&features, &[n, c, h, w])?;

    let projected = p.attn_out.forward(ctx, &f)?;
    let k1 = ctx.p(p.k1);
    let scaled = ctx.tape().channel_scale(x, &k1)?;
    let output = ctx.tape().add(&projected, &scaled)?;
    Ok(TsaOutput {
        output,
        attention,
        features,
    })
}

/// `k2 ⊙ (c1 ⊙ c2) + f1x1(s) + s` with `(c1, c2)` from the gated feed-forward
/// on the attention output and `s` chosen by `shortcut_source`.
pub fn etb_forward<T: Float>(ctx: &mut Ctx<'_, T>, x: &Var<T>, p: &EtbParams) -> Result<Var<T>> {
    let t = transposed_self_attention(ctx, x, p)?.output;
    let h = p.norm2.forward(ctx, &t)?;
    let h = p.ffn_point.forward(ctx, &h)?;
    let h = p.ffn_dw.forward(ctx, &h)?;
    let (c1, c2) = ctx.tape().chunk2(&h)?;
    let gated = ctx.tape().mul(&c1, &c2)?;
    let k2 = ctx.p(p.k2);
    let mut main = ctx.tape().channel_scale(&gated, &k2)?;
    if let Some(proj) = &p.ffn_project {
        main = proj.forward(ctx, &main)?;
    }
    let src = match p.shortcut_source {
        ShortcutSource::BlockInput => x.clone(),
        ShortcutSource::TsaOutput => t,
    };
    let short = p.shortcut_point.forward(ctx, &src)?;
    let y = ctx.tape().add(&main, &short)?;
    ctx.tape().add(&y, &src)
}

/// 3x3 conv `C -> C/2` followed by pixel unshuffle: `[N,C,H,W] -> [N,2C,H/2,W/2]`.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv2d,
    pub channels: usize,
}

impl Downsample {
    pub fn new<T: Float>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        if !channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "{name}: downsampling needs an even channel count, got {channels}"
            )));
        }
        Ok(Downsample {
            conv: b.conv(name, ConvSpec::same(channels, channels / 2, 3))?,
            channels,
        })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        check_channels("downsample", x, self.channels)?;
        let (_, _, h, w) = x.value().dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim("downsample", format!("odd spatial size {h}x{w}")));
        }
        let y = self.conv.forward(ctx, x)?;
        ctx.tape().pixel_unshuffle(&y, 2)
    }
}

/// 3x3 conv `C -> 2C` followed by pixel shuffle: `[N,C,H,W] -> [N,C/2,2H,2W]`.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub conv: Conv2d,
    pub channels: usize,
}

impl Upsample {
    pub fn new<T: Float>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        if !channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "{name}: upsampling needs an even channel count, got {channels}"
            )));
        }
        Ok(Upsample {
            conv: b.conv(name, ConvSpec::same(channels, channels * 2, 3))?,
            channels,
        })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        check_channels("upsample", x, self.channels)?;
        let y = self.conv.forward(ctx, x)?;
        ctx.tape().pixel_shuffle(&y, 2)
    }
}

/// Either block kind, for stage stacks whose type is configurable.
#[derive(Clone, Debug)]
pub enum Block {
    Mdab(MdabParams),
    Etb(EtbParams),
}

impl Block {
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        match self {
            Block::Mdab(p) => mdab_forward(ctx, x, p),
            Block::Etb(p) => etb_forward(ctx, x, p),
        }
    }
}

fn check_channels<T: Float>(op: &'static str, x: &Var<T>, want: usize) -> Result<()> {
    let (_, c, _, _) = x.value().dims4()?;
    if c != want {
        return Err(Error::dim(op, format!("input has {c} channels, block expects {want}")));
    }
    Ok(())
}
