//! Wengert-list reverse-mode differentiation.
//!
//! Forward ops are methods on [`Tape`]. When the tape is recording and at
//! least one input is tracked, the op appends a node holding its inputs and
//! output; [`Tape::backward`] replays the nodes in exact reverse order.

use std::sync::Arc;

use super::kernels::{self, ConvArgs};
use super::{Float, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// A value produced on a tape. Cloning is cheap (shared buffer).
#[derive(Clone, Debug)]
pub struct Var<T> {
    id: Option<NodeId>,
    value: Arc<Tensor<T>>,
}

impl<T: Float> Var<T> {
    /// An untracked value: no gradient flows into it.
    pub fn constant(t: Tensor<T>) -> Self {
        Var {
            id: None,
            value: Arc::new(t),
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.id
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        (*self.value).clone()
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { stride: usize, pad: usize, groups: usize },
    DynamicConv { stride: usize, pad: usize },
    ModulateKernel,
    LayerNorm { xhat: Tensor<T>, inv_std: Vec<T> },
    Softmax,
    PixelUnshuffle(usize),
    PixelShuffle(usize),
    SliceChannels { start: usize },
    Concat,
    MatMul,
    Transpose,
    Reshape,
    Relu,
    Sigmoid,
    Add,
    Sub,
    Mul,
    Scale(T),
    AddConst,
    ChannelScale,
    DivScalar,
    GlobalAvgPool,
    Linear,
    Ln,
    Sum,
    Mean,
    ReflectPad,
    Crop,
}

#[derive(Debug)]
struct Node<T> {
    name: &'static str,
    op: Op<T>,
    inputs: Vec<Var<T>>,
    out: Arc<Tensor<T>>,
}

/// Multiply-accumulate counts of everything executed on a tape, by op family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct MacCount {
    /// Static convolutions (standard, point-wise, depth-wise).
    pub conv: u64,
    /// Fully connected layers.
    pub linear: u64,
    /// Per-sample dynamic convolutions.
    pub dynamic_conv: u64,
    /// Per-sample kernel modulation, one MAC per modulated kernel element.
    pub kernel_modulation: u64,
    /// Matrix products (attention maps).
    pub matmul: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.conv + self.linear + self.dynamic_conv + self.kernel_modulation + self.matmul
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    visited: Vec<NodeId>,
}

impl<T: Float> Grads<T> {
    /// Gradient of a tracked leaf. `None` when the leaf did not influence the loss.
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        v.id.and_then(|id| self.grads.get(id)).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: &Var<T>) -> Option<Tensor<T>> {
        v.id.and_then(|id| self.grads.get_mut(id)).and_then(Option::take)
    }

    /// Node ids in the order the backward pass processed them.
    pub fn visit_order(&self) -> &[NodeId] {
        &self.visited
    }
}

#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
    macs: MacCount,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
            macs: MacCount::default(),
        }
    }

    /// A tape that never records: ops only compute values.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Op names in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.name).collect()
    }

    pub fn macs(&self) -> MacCount {
        self.macs
    }

    /// A leaf that receives a gradient (when recording).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var<T> {
        self.leaf_shared(Arc::new(t))
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>) -> Var<T> {
        if !self.recording {
            return Var { id: None, value };
        }
        self.nodes.push(Node {
            name: "leaf",
            op: Op::Leaf,
            inputs: Vec::new(),
            out: value.clone(),
        });
        Var {
            id: Some(self.nodes.len() - 1),
            value,
        }
    }

    fn record(
        &mut self,
        name: &'static str,
        op: Op<T>,
        inputs: &[&Var<T>],
        out: Tensor<T>,
    ) -> Result<Var<T>> {
        if !out.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let value = Arc::new(out);
        let tracked = self.recording && inputs.iter().any(|v| v.id.is_some());
        let id = tracked.then(|| {
            self.nodes.push(Node {
                name,
                op,
                inputs: inputs.iter().map(|v| (*v).clone()).collect(),
                out: value.clone(),
            });
            self.nodes.len() - 1
        });
        Ok(Var { id, value })
    }

    pub fn conv2d(
        &mut self,
        x: &Var<T>,
        w: &Var<T>,
        b: Option<&Var<T>>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var<T>> {
        let args = ConvArgs { stride, pad, groups };
        let out = kernels::conv2d(x.value(), w.value(), b.map(|b| b.value()), &args)?;
        let ws = w.shape();
        self.macs.conv += (out.numel() * ws[1] * ws[2] * ws[3]) as u64;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record("conv2d", Op::Conv2d { stride, pad, groups }, &inputs, out)
    }

    /// Convolution of sample `n` with kernel `wd[n]` (`wd: [N,Cout,Cin,k,k]`).
    pub fn dynamic_conv(&mut self, x: &Var<T>, wd: &Var<T>, stride: usize, pad: usize) -> Result<Var<T>> {
        let out = kernels::conv_per_sample(x.value(), wd.value(), stride, pad)?;
        let ws = wd.shape();
        self.macs.dynamic_conv += (out.numel() * ws[2] * ws[3] * ws[4]) as u64;
        self.record("dynamic_conv", Op::DynamicConv { stride, pad }, &[x, wd], out)
    }

    /// Scales a static kernel `[Cout,Cin,k,k]` per sample by spatial `[N,k,k]`,
    /// input-channel `[N,Cin]` and filter `[N,Cout]` factors.
    pub fn modulate_kernel(
        &mut self,
        w: &Var<T>,
        spatial: &Var<T>,
        channel: &Var<T>,
        filter: &Var<T>,
    ) -> Result<Var<T>> {
        let out = kernels::modulate_kernel(w.value(), spatial.value(), channel.value(), filter.value())?;
        self.macs.kernel_modulation += out.numel() as u64;
        self.record("modulate_kernel", Op::ModulateKernel, &[w, spatial, channel, filter], out)
    }

    /// Normalizes over channels at each spatial position, then applies the
    /// per-channel affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        let (y, xhat, inv_std) = kernels::layer_norm(x.value(), gamma.value(), beta.value(), eps)?;
        self.record("layer_norm", Op::LayerNorm { xhat, inv_std }, &[x, gamma, beta], y)
    }

    pub fn softmax(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let y = kernels::softmax_last(x.value())?;
        self.record("softmax", Op::Softmax, &[x], y)
    }

    pub fn pixel_unshuffle(&mut self, x: &Var<T>, r: usize) -> Result<Var<T>> {
        let y = kernels::pixel_unshuffle(x.value(), r)?;
        self.record("pixel_unshuffle", Op::PixelUnshuffle(r), &[x], y)
    }

    pub fn pixel_shuffle(&mut self, x: &Var<T>, r: usize) -> Result<Var<T>> {
        let y = kernels::pixel_shuffle(x.value(), r)?;
        self.record("pixel_shuffle", Op::PixelShuffle(r), &[x], y)
    }

    pub fn slice_channels(&mut self, x: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        let y = kernels::slice_channels(x.value(), start, len)?;
        self.record("slice_channels", Op::SliceChannels { start }, &[x], y)
    }

    /// Splits channels into equal halves.
    pub fn chunk2(&mut self, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let (_, c, _, _) = x.value().dims4()?;
        if c % 2 != 0 {
            return Err(Error::dim("chunk2", format!("{c} channels cannot be halved")));
        }
        Ok((self.slice_channels(x, 0, c / 2)?, self.slice_channels(x, c / 2, c / 2)?))
    }

    pub fn concat_channels(&mut self, xs: &[&Var<T>]) -> Result<Var<T>> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|v| v.value()).collect();
        let y = kernels::concat_channels(&vals)?;
        self.record("concat_channels", Op::Concat, xs, y)
    }

    pub fn matmul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let y = kernels::matmul(a.value(), b.value())?;
        let inner = a.shape()[a.shape().len() - 1];
        self.macs.matmul += (y.numel() * inner) as u64;
        self.record("matmul", Op::MatMul, &[a, b], y)
    }

    pub fn transpose_last_two(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let y = kernels::transpose_last_two(x.value())?;
        self.record("transpose", Op::Transpose, &[x], y)
    }

    pub fn reshape(&mut self, x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let y = x.to_tensor().reshape(shape)?;
        self.record("reshape", Op::Reshape, &[x], y)
    }

    pub fn relu(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let y = x.value().map(|v| v.max(T::zero()));
        self.record("relu", Op::Relu, &[x], y)
    }

    pub fn sigmoid(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let y = x.value().map(|v| T::one() / (T::one() + (-v).exp()));
        self.record("sigmoid", Op::Sigmoid, &[x], y)
    }

    fn zip_same(
        op: &'static str,
        a: &Var<T>,
        b: &Var<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
            ));
        }
        let data = a
            .value()
            .data()
            .iter()
            .zip(b.value().data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(a.shape(), data)
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let y = Self::zip_same("add", a, b, |x, y| x + y)?;
        self.record("add", Op::Add, &[a, b], y)
    }

    pub fn sub(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let y = Self::zip_same("sub", a, b, |x, y| x - y)?;
        self.record("sub", Op::Sub, &[a, b], y)
    }

    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let y = Self::zip_same("mul", a, b, |x, y| x * y)?;
        self.record("mul", Op::Mul, &[a, b], y)
    }

    pub fn scale(&mut self, x: &Var<T>, s: T) -> Result<Var<T>> {
        let y = x.value().map(|v| v * s);
        self.record("scale", Op::Scale(s), &[x], y)
    }

    pub fn add_const(&mut self, x: &Var<T>, c: T) -> Result<Var<T>> {
        let y = x.value().map(|v| v + c);
        self.record("add_const", Op::AddConst, &[x], y)
    }

    /// `y[n,c,...] = k[c] * x[n,c,...]`.
    pub fn channel_scale(&mut self, x: &Var<T>, k: &Var<T>) -> Result<Var<T>> {
        let xs = x.shape();
        if xs.len() < 2 || k.value().numel() != xs[1] {
            return Err(Error::dim(
                "channel_scale",
                format!("{} scales for input {:?}", k.value().numel(), xs),
            ));
        }
        let c = xs[1];
        let plane = x.value().numel() / (xs[0] * c).max(1);
        let mut data = x.value().data().to_vec();
        for (i, chunk) in data.chunks_mut(plane.max(1)).enumerate() {
            let kv = k.value().data()[i % c];
            chunk.iter_mut().for_each(|v| *v *= kv);
        }
        let y = Tensor::new(xs, data)?;
        self.record("channel_scale", Op::ChannelScale, &[x, k], y)
    }

    /// Divides every element by a one-element tensor.
    pub fn div_scalar(&mut self, x: &Var<T>, s: &Var<T>) -> Result<Var<T>> {
        if s.value().numel() != 1 {
            return Err(Error::dim("div_scalar", format!("divisor has shape {:?}", s.shape())));
        }
        let sv = s.value().data()[0];
        let y = x.value().map(|v| v / sv);
        self.record("div_scalar", Op::DivScalar, &[x, s], y)
    }

    /// `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let y = kernels::global_avg_pool(x.value())?;
        self.record("global_avg_pool", Op::GlobalAvgPool, &[x], y)
    }

    /// Affine map on feature vectors: `x: [N,In]`, `w: [Out,In]`, `b: [Out]`.
    pub fn linear(&mut self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        let y = kernels::linear(x.value(), w.value(), b.map(|b| b.value()))?;
        self.macs.linear += (y.numel() * w.shape()[1]) as u64;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record("linear", Op::Linear, &inputs, y)
    }

    pub fn ln(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let y = x.value().map(|v| v.ln());
        self.record("ln", Op::Ln, &[x], y)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let s: f64 = x.value().data().iter().map(|v| v.f64()).sum();
        self.record("sum", Op::Sum, &[x], Tensor::scalar(T::c(s)))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let n = x.value().numel();
        if n == 0 {
            return Err(Error::dim("mean", "empty tensor"));
        }
        let s: f64 = x.value().data().iter().map(|v| v.f64()).sum();
        self.record("mean", Op::Mean, &[x], Tensor::scalar(T::c(s / n as f64)))
    }

    /// Reflect-extends the bottom/right borders.
    pub fn reflect_pad(&mut self, x: &Var<T>, bottom: usize, right: usize) -> Result<Var<T>> {
        let y = kernels::reflect_pad(x.value(), bottom, right)?;
        self.record("reflect_pad", Op::ReflectPad, &[x], y)
    }

    /// Keeps the top-left `h x w` window.
    pub fn crop(&mut self, x: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
        let y = kernels::crop(x.value(), h, w)?;
        self.record("crop", Op::Crop, &[x], y)
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: &Var<T>) -> Result<Grads<T>> {
        let root = loss
            .id
            .ok_or_else(|| Error::dim("backward", "loss is not connected to any tracked leaf"))?;
        if loss.value().numel() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must have one element, has shape {:?}", loss.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::ones(loss.shape()));
        let mut visited = Vec::new();
        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                if grads[i].is_some() {
                    visited.push(i);
                }
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            let input_grads = backward_node(node, &g)?;
            for (inp, gi) in node.inputs.iter().zip(input_grads) {
                let (Some(id), Some(gi)) = (inp.id, gi) else { continue };
                match &mut grads[id] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(gi.data())
                        .for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(Grads { grads, visited })
    }
}

fn map2<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn backward_node<T: Float>(node: &Node<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
    let ins = &node.inputs;
    let need: Vec<bool> = ins.iter().map(|v| v.requires_grad()).collect();
    let val = |i: usize| ins[i].value();
    let y = &*node.out;
    let out = match &node.op {
        Op::Leaf => Vec::new(),
        Op::Conv2d { stride, pad, groups } => {
            let args = ConvArgs {
                stride: *stride,
                pad: *pad,
                groups: *groups,
            };
            let gr = kernels::conv2d_grad(
                val(0),
                val(1),
                g,
                &args,
                [need[0], need[1], need.get(2).copied().unwrap_or(false)],
            )?;
            vec![gr.dx, gr.dw, gr.db]
        }
        Op::DynamicConv { stride, pad } => {
            let (dx, dw) = kernels::conv_per_sample_grad(val(0), val(1), g, *stride, *pad, [need[0], need[1]])?;
            vec![dx, dw]
        }
        Op::ModulateKernel => kernels::modulate_kernel_grad(val(0), val(1), val(2), val(3), g)?
            .into_iter()
            .map(Some)
            .collect(),
        Op::LayerNorm { xhat, inv_std } => kernels::layer_norm_grad(g, xhat, inv_std, val(1))?
            .into_iter()
            .map(Some)
            .collect(),
        Op::Softmax => vec![Some(kernels::softmax_last_grad(y, g))],
        Op::PixelUnshuffle(r) => vec![Some(kernels::pixel_shuffle(g, *r)?)],
        Op::PixelShuffle(r) => vec![Some(kernels::pixel_unshuffle(g, *r)?)],
        Op::SliceChannels { start } => {
            let (n, c, h, w) = val(0).dims4()?;
            let len = g.shape()[1];
            let plane = h * w;
            let mut d = vec![T::zero(); n * c * plane];
            for b in 0..n {
                d[(b * c + start) * plane..(b * c + start + len) * plane]
                    .copy_from_slice(&g.data()[b * len * plane..(b + 1) * len * plane]);
            }
            vec![Some(Tensor::new(val(0).shape(), d)?)]
        }
        Op::Concat => {
            let mut start = 0;
            let mut grads = Vec::with_capacity(ins.len());
            for inp in ins {
                let len = inp.shape()[1];
                grads.push(Some(kernels::slice_channels(g, start, len)?));
                start += len;
            }
            grads
        }
        Op::MatMul => {
            let (da, db) = kernels::matmul_grad(val(0), val(1), g, [need[0], need[1]]);
            vec![da, db]
        }
        Op::Transpose => vec![Some(kernels::transpose_last_two(g)?)],
        Op::Reshape => vec![Some(g.clone().reshape(val(0).shape())?)],
        Op::Relu => vec![Some(map2(g, y, |gv, yv| if yv > T::zero() { gv } else { T::zero() }))],
        Op::Sigmoid => vec![Some(map2(g, y, |gv, yv| gv * yv * (T::one() - yv)))],
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
        Op::Mul => vec![
            need[0].then(|| map2(g, val(1), |a, b| a * b)),
            need[1].then(|| map2(g, val(0), |a, b| a * b)),
        ],
        Op::Scale(s) => vec![Some(g.map(|v| v * *s))],
        Op::AddConst => vec![Some(g.clone())],
        Op::ChannelScale => {
            let x = val(0);
            let k = val(1);
            let c = x.shape()[1];
            let plane = x.numel() / (x.shape()[0] * c).max(1);
            let mut dx = g.data().to_vec();
            let mut dk = vec![T::zero(); c];
            for (i, (dchunk, xchunk)) in dx
                .chunks_mut(plane.max(1))
                .zip(x.data().chunks(plane.max(1)))
                .enumerate()
            {
                let ch = i % c;
                let kv = k.data()[ch];
                let mut acc = T::zero();
                for (dv, &xv) in dchunk.iter_mut().zip(xchunk) {
                    acc += *dv * xv;
                    *dv *= kv;
                }
                dk[ch] += acc;
            }
            vec![Some(Tensor::new(x.shape(), dx)?), Some(Tensor::new(k.shape(), dk)?)]
        }
        Op::DivScalar => {
            let s = val(1).data()[0];
            let dx = g.map(|v| v / s);
            let ds: T = g
                .data()
                .iter()
                .zip(val(0).data())
                .map(|(&gv, &xv)| gv * xv)
                .sum::<T>()
                * (-T::one() / (s * s));
            vec![Some(dx), Some(Tensor::new(val(1).shape(), vec![ds])?)]
        }
        Op::GlobalAvgPool => {
            let (n, c, h, w) = val(0).dims4()?;
            let plane = h * w;
            let inv = T::c(1.0 / plane as f64);
            let mut d = Vec::with_capacity(n * c * plane);
            for &gv in g.data() {
                d.extend(std::iter::repeat_n(gv * inv, plane));
            }
            vec![Some(Tensor::new(val(0).shape(), d)?)]
        }
        Op::Linear => {
            let [dx, dw, db] = kernels::linear_grad(
                val(0),
                val(1),
                g,
                [need[0], need[1], need.get(2).copied().unwrap_or(false)],
            );
            vec![dx, dw, db]
        }
        Op::Ln => vec![Some(map2(g, val(0), |gv, xv| gv / xv))],
        Op::Sum => vec![Some(Tensor::full(val(0).shape(), g.data()[0]))],
        Op::Mean => {
            let n = val(0).numel();
            vec![Some(Tensor::full(val(0).shape(), g.data()[0] / T::c(n as f64)))]
        }
        Op::ReflectPad => {
            let (_, _, h, w) = val(0).dims4()?;
            vec![Some(kernels::reflect_pad_grad(g, h, w))]
        }
        Op::Crop => {
            let (_, _, h, w) = val(0).dims4()?;
            vec![Some(kernels::crop_grad(g, h, w))]
        }
    };
    Ok(out
        .into_iter()
        .zip(need)
        .map(|(g, n)| if n { g } else { None })
        .collect())
}
