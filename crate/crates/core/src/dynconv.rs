//! Multi-dimensional dynamic convolution (MDConv).
//!
//! A static kernel bank `W: [Cout, Cin, k, k]` is rescaled per input sample by
//! three sigmoid attentions produced from the pooled input:
//!
//! ```text
//! z       = relu(fc1(gap(x)))
//! a_s     = sigmoid(head_s(z))   // [k, k]   spatial
//! a_c     = sigmoid(head_c(z))   // [Cin]    input channel
//! a_f     = sigmoid(head_f(z))   // [Cout]   filter
//! W_d[n]  = W * a_s[n] * a_c[n] * a_f[n]   (broadcast over the matching axes)
//! y[n]    = conv(x[n], W_d[n])
//! ```
//!
//! There is no bias and no kernel-mixture attention. With all three
//! attentions equal to one the layer reduces to a plain convolution by `W`.

use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, ParamBuilder, ParamId};
use crate::tensor::{Float, Var};

/// Parameters of one MDConv layer.
#[derive(Clone, Debug)]
pub struct DynKernel {
    /// Static kernel bank `[Cout, Cin, k, k]`.
    pub weight: ParamId,
    /// Squeeze layer `Cin -> hidden`.
    pub fc1: Linear,
    pub head_spatial: Linear,
    pub head_channel: Linear,
    pub head_filter: Linear,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Per-sample attention factors.
#[derive(Clone, Debug)]
pub struct Attentions<T> {
    /// `[N, k, k]`
    pub spatial: Var<T>,
    /// `[N, Cin]`
    pub channel: Var<T>,
    /// `[N, Cout]`
    pub filter: Var<T>,
}

impl DynKernel {
    /// Width of the squeeze layer: a quarter of `Cin`, never below 4.
    pub fn hidden_width(cin: usize) -> usize {
        (cin / 4).max(4)
    }

    /// Same-padded, stride-1 MDConv.
    pub fn new<T: Float>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Result<Self> {
        if k.is_multiple_of(2) || cin == 0 || cout == 0 {
            return Err(Error::Config(format!(
                "{name}: invalid dynamic conv {cin}->{cout} with kernel {k}"
            )));
        }
        let hidden = Self::hidden_width(cin);
        b.scope(name, |b| {
            Ok(DynKernel {
                weight: b.fan_in_uniform("weight", &[cout, cin, k, k], cin * k * k)?,
                fc1: b.linear("attn_fc", cin, hidden, true)?,
                head_spatial: b.linear("attn_spatial", hidden, k * k, true)?,
                head_channel: b.linear("attn_channel", hidden, cin, true)?,
                head_filter: b.linear("attn_filter", hidden, cout, true)?,
                cin,
                cout,
                k,
                stride: 1,
                pad: k / 2,
            })
        })
    }

    /// Scalars in the static kernel bank.
    pub fn bank_params(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    /// Scalars in the attention generator.
    pub fn attention_params(&self) -> usize {
        self.fc1.num_params()
            + self.head_spatial.num_params()
            + self.head_channel.num_params()
            + self.head_filter.num_params()
    }

    pub fn num_params(&self) -> usize {
        self.bank_params() + self.attention_params()
    }
}

/// Computes the spatial, channel and filter attentions for every sample.
pub fn attention_triple<T: Float>(
    ctx: &mut Ctx<'_, T>,
    x: &Var<T>,
    dk: &DynKernel,
) -> Result<Attentions<T>> {
    let (n, c, _, _) = x.value().dims4()?;
    if c != dk.cin {
        return Err(Error::dim(
            "mdconv",
            format!("input has {c} channels, dynamic kernel expects {}", dk.cin),
        ));
    }
    let pooled = ctx.tape().global_avg_pool(x)?;
    let z = dk.fc1.forward(ctx, &pooled)?;
    let z = ctx.tape().relu(&z)?;

    let s = dk.head_spatial.forward(ctx, &z)?;
    let s = ctx.tape().sigmoid(&s)?;
    let spatial = ctx.tape().reshape(&s, &[n, dk.k, dk.k])?;

    let ch = dk.head_channel.forward(ctx, &z)?;
    let channel = ctx.tape().sigmoid(&ch)?;

    let f = dk.head_filter.forward(ctx, &z)?;
    let filter = ctx.tape().sigmoid(&f)?;

    Ok(Attentions {
        spatial,
        channel,
        filter,
    })
}

/// Applies externally supplied attentions to the kernel bank and convolves.
pub fn mdconv_with<T: Float>(
    ctx: &mut Ctx<'_, T>,
    x: &Var<T>,
    dk: &DynKernel,
    att: &Attentions<T>,
) -> Result<Var<T>> {
    let w = ctx.p(dk.weight);
    let wd = ctx
        .tape()
        .modulate_kernel(&w, &att.spatial, &att.channel, &att.filter)?;
    ctx.tape().dynamic_conv(x, &wd, dk.stride, dk.pad)
}

/// `y[n] = conv(x[n], W ⊙ a_s[n] ⊙ a_c[n] ⊙ a_f[n])`.
pub fn mdconv_forward<T: Float>(ctx: &mut Ctx<'_, T>, x: &Var<T>, dk: &DynKernel) -> Result<Var<T>> {
    let att = attention_triple(ctx, x, dk)?;
    mdconv_with(ctx, x, dk, &att)
}
