//! Symbolic parameter and multiply-accumulate accounting.
//!
//! The profile walks the layer structure with shapes only; nothing is
//! computed. One MAC is reported as one FLOP.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::blocks::{Block, EtbParams, MdabParams};
use crate::dynconv::DynKernel;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear};
use crate::tensor::{Float, MacCount};

use super::config::STAGE_NAMES;
use super::model::{Model, SIZE_MULTIPLE};

/// Which operations a count includes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountConvention {
    /// Every learnable scalar and every multiply-accumulate: static and
    /// dynamic convolutions, kernel modulation, linear layers and both
    /// attention matmuls.
    Exact,
    /// What a per-module forward-hook profiler sees: only static
    /// convolution and linear layers are counted. The dynamic kernel bank is
    /// consumed functionally, so it is neither counted as a parameter nor
    /// charged MACs, and attention matmuls are not charged.
    ModuleHooks,
}

impl fmt::Display for CountConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            CountConvention::Exact => "exact",
            CountConvention::ModuleHooks => "module-hooks",
        })
    }
}

/// Cost of one named part of the network.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PartCost {
    pub name: String,
    pub params: u64,
    /// Scalars of dynamic kernel banks, included in `params`.
    pub bank_params: u64,
    pub macs: MacCount,
}

impl PartCost {
    fn new(name: impl Into<String>) -> Self {
        PartCost {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn params_in(&self, conv: CountConvention) -> u64 {
        match conv {
            CountConvention::Exact => self.params,
            CountConvention::ModuleHooks => self.params - self.bank_params,
        }
    }

    pub fn flops_in(&self, conv: CountConvention) -> u64 {
        match conv {
            CountConvention::Exact => self.macs.total(),
            CountConvention::ModuleHooks => self.macs.conv + self.macs.linear,
        }
    }
}

/// Per-part costs of a `1 x 3 x height x width` forward.
#[derive(Clone, Debug, Serialize)]
pub struct Profile {
    pub height: usize,
    pub width: usize,
    pub parts: Vec<PartCost>,
}

impl Profile {
    pub fn params(&self, conv: CountConvention) -> u64 {
        self.parts.iter().map(|p| p.params_in(conv)).sum()
    }

    pub fn flops(&self, conv: CountConvention) -> u64 {
        self.parts.iter().map(|p| p.flops_in(conv)).sum()
    }

    /// MACs summed by category.
    pub fn macs(&self) -> MacCount {
        let mut m = MacCount::default();
        for p in &self.parts {
            m.conv += p.macs.conv;
            m.linear += p.macs.linear;
            m.dynamic_conv += p.macs.dynamic_conv;
            m.kernel_modulation += p.macs.kernel_modulation;
            m.matmul += p.macs.matmul;
        }
        m
    }
}

/// MACs of one forward at `h x w` under `conv`.
pub fn count_flops<T: Float>(m: &Model<T>, h: usize, w: usize, conv: CountConvention) -> Result<u64> {
    Ok(profile(m, h, w)?.flops(conv))
}

/// Learnable scalars under `conv`.
pub fn count_params_in<T: Float>(m: &Model<T>, conv: CountConvention) -> Result<u64> {
    Ok(profile(m, SIZE_MULTIPLE, SIZE_MULTIPLE)?.params(conv))
}

/// Symbolic shape `(channels, height, width)` of a single sample.
#[derive(Clone, Copy, Debug)]
struct Shape {
    c: usize,
    h: usize,
    w: usize,
}

impl Shape {
    fn hw(&self) -> u64 {
        (self.h * self.w) as u64
    }
}

fn expect_c(part: &str, s: Shape, want: usize) -> Result<()> {
    if s.c != want {
        return Err(Error::Config(format!(
            "{part}: receives {} channels but is built for {want}",
            s.c
        )));
    }
    Ok(())
}

fn conv(cost: &mut PartCost, c: &Conv2d, s: Shape) -> Result<Shape> {
    expect_c(&cost.name, s, c.spec.cin)?;
    cost.params += c.spec.num_params() as u64;
    cost.macs.conv += c.spec.macs(s.h, s.w);
    let (h, w) = c.spec.out_hw(s.h, s.w);
    Ok(Shape { c: c.spec.cout, h, w })
}

fn linear(cost: &mut PartCost, l: &Linear) {
    cost.params += l.num_params() as u64;
    cost.macs.linear += (l.fin * l.fout) as u64;
}

fn mdconv(cost: &mut PartCost, dk: &DynKernel, s: Shape) -> Result<Shape> {
    expect_c(&cost.name, s, dk.cin)?;
    cost.params += dk.bank_params() as u64;
    cost.bank_params += dk.bank_params() as u64;
    for l in [&dk.fc1, &dk.head_spatial, &dk.head_channel, &dk.head_filter] {
        linear(cost, l);
    }
    cost.macs.kernel_modulation += dk.bank_params() as u64;
    cost.macs.dynamic_conv += dk.bank_params() as u64 * s.hw();
    Ok(Shape { c: dk.cout, ..s })
}

fn mdab(cost: &mut PartCost, p: &MdabParams, s: Shape) -> Result<Shape> {
    expect_c(&cost.name, s, p.channels)?;
    cost.params += 2 * p.norm.channels as u64;
    let t = conv(cost, &p.expand, s)?;
    let t = conv(cost, &p.dw, t)?;
    let t = Shape { c: t.c / 2, ..t };
    let t = mdconv(cost, &p.mdconv, t)?;
    let t = conv(cost, &p.project, t)?;
    expect_c(&cost.name, t, s.c)?;
    Ok(t)
}

fn etb(cost: &mut PartCost, p: &EtbParams, s: Shape) -> Result<Shape> {
    expect_c(&cost.name, s, p.channels)?;
    let c = p.channels as u64;
    // two norms, temperature, k1, k2
    cost.params += 4 * c + 1 + c + (p.ffn_dw.spec.cout / 2) as u64;
    let t = conv(cost, &p.qkv_point, s)?;
    conv(cost, &p.qkv_dw, t)?;
    let head_c = c / p.heads as u64;
    // Q K^T and A V per head
    cost.macs.matmul += 2 * p.heads as u64 * head_c * head_c * s.hw();
    let t = conv(cost, &p.attn_out, s)?;
    let f = conv(cost, &p.ffn_point, t)?;
    let f = conv(cost, &p.ffn_dw, f)?;
    let mut f = Shape { c: f.c / 2, ..f };
    if let Some(proj) = &p.ffn_project {
        f = conv(cost, proj, f)?;
    }
    expect_c(&cost.name, f, s.c)?;
    conv(cost, &p.shortcut_point, s)
}

fn stack(cost: &mut PartCost, blocks: &[Block], mut s: Shape) -> Result<Shape> {
    for b in blocks {
        s = match b {
            Block::Mdab(p) => mdab(cost, p, s)?,
            Block::Etb(p) => etb(cost, p, s)?,
        };
    }
    Ok(s)
}

/// Walks the network symbolically for one `3 x h x w` input, checking that
/// every layer receives the channel count it was built for.
pub fn profile<T: Float>(m: &Model<T>, h: usize, w: usize) -> Result<Profile> {
    if h == 0 || w == 0 || !h.is_multiple_of(SIZE_MULTIPLE) || !w.is_multiple_of(SIZE_MULTIPLE) {
        return Err(Error::dim(
            "profile",
            format!("{h}x{w} must be a non-empty multiple of {SIZE_MULTIPLE}"),
        ));
    }
    let a = m.arch();
    let mut parts = Vec::new();
    let mut s = Shape { c: 3, h, w };

    let mut cost = PartCost::new("embed");
    s = conv(&mut cost, &a.embed, s)?;
    parts.push(cost);

    let mut skips = Vec::new();
    for level in 0..3 {
        let mut cost = PartCost::new(STAGE_NAMES[level]);
        s = stack(&mut cost, &a.stages[level], s)?;
        parts.push(cost);
        skips.push(s);
        let mut cost = PartCost::new(format!("down{}", level + 1));
        let t = conv(&mut cost, &a.down[level].conv, s)?;
        s = Shape { c: t.c * 4, h: t.h / 2, w: t.w / 2 };
        parts.push(cost);
    }
    let mut cost = PartCost::new(STAGE_NAMES[3]);
    s = stack(&mut cost, &a.stages[3], s)?;
    parts.push(cost);

    for level in (0..3).rev() {
        let mut cost = PartCost::new(format!("up{}", level + 1));
        let t = conv(&mut cost, &a.up[level].conv, s)?;
        s = Shape { c: t.c / 4, h: t.h * 2, w: t.w * 2 };
        s.c += skips[level].c;
        if let Some(r) = &a.reduce[level] {
            s = conv(&mut cost, r, s)?;
        }
        parts.push(cost);
        let mut cost = PartCost::new(STAGE_NAMES[6 - level]);
        s = stack(&mut cost, &a.stages[6 - level], s)?;
        parts.push(cost);
    }

    let mut cost = PartCost::new("tail");
    s = conv(&mut cost, &a.tail[0], s)?;
    s = conv(&mut cost, &a.tail[1], s)?;
    parts.push(cost);
    expect_c("tail", s, 3)?;

    Ok(Profile { height: h, width: w, parts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_model, ModelConfig};

    #[test]
    fn conventions_differ_only_in_bank_and_dynamic_terms() {
        let m = build_model(&ModelConfig::tiny(), 0).unwrap();
        let p = m.profile(32, 32).unwrap();
        let bank: u64 = p.parts.iter().map(|c| c.bank_params).sum();
        assert_eq!(p.params(CountConvention::Exact) - p.params(CountConvention::ModuleHooks), bank);
        assert_eq!(p.params(CountConvention::Exact), m.count_params() as u64);
        let macs = p.macs();
        assert_eq!(
            p.flops(CountConvention::Exact) - p.flops(CountConvention::ModuleHooks),
            macs.dynamic_conv + macs.kernel_modulation + macs.matmul
        );
    }

    #[test]
    fn counts_do_not_depend_on_seed() {
        let a = build_model(&ModelConfig::tiny(), 1).unwrap().profile(16, 24).unwrap();
        let b = build_model(&ModelConfig::tiny(), 2).unwrap().profile(16, 24).unwrap();
        assert_eq!(a.parts, b.parts);
    }

    #[test]
    fn rejects_unaligned_size() {
        let m = build_model(&ModelConfig::tiny(), 0).unwrap();
        assert!(m.profile(12, 16).is_err());
    }
}
