//! Named parameter storage and the basic layers built on it.

use std::collections::HashMap;
use std::sync::Arc;

use rand::rngs::Xoshiro256PlusPlus;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Index of a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
    index: HashMap<String, ParamId>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        self.values[id.0].clone()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.ids()
            .map(move |id| (id, self.names[id.0].as_str(), &*self.values[id.0]))
    }

    /// Number of learnable scalars.
    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|t| Arc::new(t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::dim(
                "param_store",
                format!(
                    "{} has shape {:?}, got {:?}",
                    self.names[id.0],
                    self.values[id.0].shape(),
                    value.shape()
                ),
            ));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.values.iter().map(|t| (**t).clone()).collect()
    }
}

/// A tape plus one bound variable per parameter.
pub struct Ctx<'t, T> {
    tape: &'t mut Tape<T>,
    params: Vec<Var<T>>,
}

impl<'t, T: Float> Ctx<'t, T> {
    /// Registers every parameter of `store` as a leaf of `tape`.
    pub fn bind(tape: &'t mut Tape<T>, store: &ParamStore<T>) -> Self {
        let params = store.values.iter().map(|v| tape.leaf_shared(v.clone())).collect();
        Ctx { tape, params }
    }

    /// Uses already-registered variables as the parameters, in store order.
    pub fn from_vars(tape: &'t mut Tape<T>, params: Vec<Var<T>>) -> Self {
        Ctx { tape, params }
    }

    pub fn p(&self, id: ParamId) -> Var<T> {
        self.params[id.0].clone()
    }

    pub fn params(&self) -> &[Var<T>] {
        &self.params
    }

    pub fn tape(&mut self) -> &mut Tape<T> {
        self.tape
    }
}

/// Deterministic parameter factory with hierarchical names.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: Xoshiro256PlusPlus,
    prefix: String,
}

impl<'a, T: Float> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        ParamBuilder {
            store,
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name.` appended to the current prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let saved = self.prefix.len();
        self.prefix.push_str(name);
        self.prefix.push('.');
        let out = f(self);
        self.prefix.truncate(saved);
        out
    }

    fn full_name(&self, name: &str) -> String {
        format!("{}{}", self.prefix, name)
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.push(full, value)
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, drawn in f64 so f32 and f64 stores
    /// built from one seed agree.
    pub fn fan_in_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::uniform(shape, -bound, bound, &mut self.rng);
        self.tensor(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.tensor(name, Tensor::full(shape, T::c(value)))
    }

    pub fn conv(&mut self, name: &str, spec: ConvSpec) -> Result<Conv2d> {
        spec.validate(name)?;
        let cpg = spec.cin / spec.groups;
        let fan_in = cpg * spec.k * spec.k;
        self.scope(name, |b| {
            let weight = b.fan_in_uniform("weight", &[spec.cout, cpg, spec.k, spec.k], fan_in)?;
            let bias = if spec.bias {
                Some(b.fan_in_uniform("bias", &[spec.cout], fan_in)?)
            } else {
                None
            };
            Ok(Conv2d { weight, bias, spec })
        })
    }

    pub fn linear(&mut self, name: &str, fin: usize, fout: usize, zero_bias: bool) -> Result<Linear> {
        self.scope(name, |b| {
            let weight = b.fan_in_uniform("weight", &[fout, fin], fin)?;
            let bias = if zero_bias {
                b.constant("bias", &[fout], 0.0)?
            } else {
                b.fan_in_uniform("bias", &[fout], fin)?
            };
            Ok(Linear {
                weight,
                bias,
                fin,
                fout,
            })
        })
    }

    pub fn layer_norm(&mut self, name: &str, channels: usize) -> Result<LayerNorm> {
        self.scope(name, |b| {
            Ok(LayerNorm {
                gamma: b.constant("weight", &[channels], 1.0)?,
                beta: b.constant("bias", &[channels], 0.0)?,
                channels,
                eps: LayerNorm::DEFAULT_EPS,
            })
        })
    }
}

/// Static description of a convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride-1, same-padding convolution with bias.
    pub fn same(cin: usize, cout: usize, k: usize) -> Self {
        ConvSpec {
            cin,
            cout,
            k,
            stride: 1,
            pad: k / 2,
            groups: 1,
            bias: true,
        }
    }

    pub fn depthwise(channels: usize, k: usize) -> Self {
        ConvSpec {
            groups: channels,
            ..Self::same(channels, channels, k)
        }
    }

    pub fn without_bias(self) -> Self {
        ConvSpec { bias: false, ..self }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.groups == 0 || !self.cin.is_multiple_of(self.groups) || !self.cout.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "{name}: groups={} must divide Cin={} and Cout={}",
                self.groups, self.cin, self.cout
            )));
        }
        if self.k.is_multiple_of(2) {
            return Err(Error::Config(format!("{name}: kernel size {} must be odd", self.k)));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.cout * (self.cin / self.groups) * self.k * self.k + if self.bias { self.cout } else { 0 }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Multiply-accumulates for one `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.out_hw(h, w);
        (self.cout * (self.cin / self.groups) * self.k * self.k * ho * wo) as u64
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = ctx.p(self.weight);
        let b = self.bias.map(|b| ctx.p(b));
        let s = &self.spec;
        ctx.tape().conv2d(x, &w, b.as_ref(), s.stride, s.pad, s.groups)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fin: usize,
    pub fout: usize,
}

impl Linear {
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = ctx.p(self.weight);
        let b = ctx.p(self.bias);
        ctx.tape().linear(x, &w, Some(&b))
    }

    pub fn num_params(&self) -> usize {
        self.fin * self.fout + self.fout
    }
}

/// Channel layer norm with learned affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let g = ctx.p(self.gamma);
        let b = ctx.p(self.beta);
        ctx.tape().layer_norm(x, &g, &b, self.eps)
    }
}
