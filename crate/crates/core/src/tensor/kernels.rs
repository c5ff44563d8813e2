//! Batch-level forward and backward kernels for the structured ops.
//!
//! Parallel sections split over batch samples only; anything reduced across
//! samples is summed afterwards in sample order so results do not depend on
//! the thread schedule.

use rayon::prelude::*;

use super::conv::{self, ConvGeom};
use super::{Float, Tensor};
use crate::error::{Error, Result};

pub(crate) struct ConvArgs {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

fn conv_geom<T: Float>(
    op: &'static str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    args: &ConvArgs,
) -> Result<(usize, ConvGeom)> {
    let (n, cin, h, wd) = x.dims4()?;
    let (cout, cpg, kh, kw) = match *w.shape() {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::dim(op, format!("weight shape {:?} is not 4-D", w.shape()))),
    };
    if kh != kw {
        return Err(Error::dim(op, format!("non-square kernel {kh}x{kw}")));
    }
    let g = ConvGeom::new(op, (cin, h, wd), (cout, cpg, kh), args.stride, args.pad, args.groups)?;
    Ok((n, g))
}

pub(crate) fn conv2d<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    args: &ConvArgs,
) -> Result<Tensor<T>> {
    let (n, g) = conv_geom("conv2d", x, w, args)?;
    if let Some(b) = b {
        if b.numel() != g.cout {
            return Err(Error::dim(
                "conv2d",
                format!("bias has {} entries for {} output channels", b.numel(), g.cout),
            ));
        }
    }
    let mut out = vec![T::zero(); n * g.out_len()];
    if g.out_len() > 0 {
        out.par_chunks_mut(g.out_len())
            .zip(x.data().par_chunks(g.in_len().max(1)))
            .for_each(|(o, xs)| conv::forward_sample(&g, xs, w.data(), b.map(|b| b.data()), o));
    }
    Tensor::new(&[n, g.cout, g.ho, g.wo], out)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn conv2d_grad<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    args: &ConvArgs,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let (n, g) = conv_geom("conv2d", x, w, args)?;
    let [need_x, need_w, need_b] = need;
    let wlen = g.weight_len();
    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xs = &x.data()[i * g.in_len()..(i + 1) * g.in_len()];
            let gs = &gy.data()[i * g.out_len()..(i + 1) * g.out_len()];
            let mut dx = if need_x { vec![T::zero(); g.in_len()] } else { Vec::new() };
            let mut dw = if need_w { vec![T::zero(); wlen] } else { Vec::new() };
            conv::backward_sample(
                &g,
                xs,
                w.data(),
                gs,
                need_x.then_some(dx.as_mut_slice()),
                need_w.then_some(dw.as_mut_slice()),
            );
            (dx, dw)
        })
        .collect();
    let dx = need_x.then(|| {
        let data: Vec<T> = per_sample.iter().flat_map(|(d, _)| d.iter().copied()).collect();
        Tensor::new(x.shape(), data).expect("dx shape")
    });
    let dw = need_w.then(|| {
        let mut acc = vec![T::zero(); wlen];
        for (_, d) in &per_sample {
            acc.iter_mut().zip(d).for_each(|(a, &v)| *a += v);
        }
        Tensor::new(w.shape(), acc).expect("dw shape")
    });
    let db = need_b.then(|| {
        let plane = g.ho * g.wo;
        let mut acc = vec![T::zero(); g.cout];
        for i in 0..n {
            for (o, a) in acc.iter_mut().enumerate() {
                let s = &gy.data()[(i * g.cout + o) * plane..][..plane];
                *a += s.iter().copied().sum::<T>();
            }
        }
        Tensor::new(&[g.cout], acc).expect("db shape")
    });
    Ok(ConvGrads { dx, dw, db })
}

fn per_sample_geom<T: Float>(
    op: &'static str,
    x: &Tensor<T>,
    wd: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, ConvGeom)> {
    let (n, cin, h, w) = x.dims4()?;
    let (wn, cout, ci, k) = match *wd.shape() {
        [a, b, c, d, e] if d == e => (a, b, c, d),
        _ => {
            return Err(Error::dim(
                op,
                format!("per-sample kernel shape {:?} is not [N,Cout,Cin,k,k]", wd.shape()),
            ))
        }
    };
    if wn != n {
        return Err(Error::dim(op, format!("{wn} kernels for a batch of {n}")));
    }
    let g = ConvGeom::new(op, (cin, h, w), (cout, ci, k), stride, pad, 1)?;
    Ok((n, g))
}

/// Convolution where sample `n` uses its own kernel `wd[n]`.
pub(crate) fn conv_per_sample<T: Float>(
    x: &Tensor<T>,
    wd: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, g) = per_sample_geom("dynamic_conv", x, wd, stride, pad)?;
    let wlen = g.weight_len();
    let mut out = vec![T::zero(); n * g.out_len()];
    out.par_chunks_mut(g.out_len().max(1))
        .enumerate()
        .for_each(|(i, o)| {
            let xs = &x.data()[i * g.in_len()..(i + 1) * g.in_len()];
            let ws = &wd.data()[i * wlen..(i + 1) * wlen];
            conv::forward_sample(&g, xs, ws, None, o);
        });
    Tensor::new(&[n, g.cout, g.ho, g.wo], out)
}

pub(crate) fn conv_per_sample_grad<T: Float>(
    x: &Tensor<T>,
    wd: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need: [bool; 2],
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (n, g) = per_sample_geom("dynamic_conv", x, wd, stride, pad)?;
    let wlen = g.weight_len();
    let [need_x, need_w] = need;
    let mut dx = vec![T::zero(); if need_x { n * g.in_len() } else { 0 }];
    let mut dw = vec![T::zero(); if need_w { n * wlen } else { 0 }];
    let work = |i: usize, dxs: Option<&mut [T]>, dws: Option<&mut [T]>| {
        let xs = &x.data()[i * g.in_len()..(i + 1) * g.in_len()];
        let ws = &wd.data()[i * wlen..(i + 1) * wlen];
        let gs = &gy.data()[i * g.out_len()..(i + 1) * g.out_len()];
        conv::backward_sample(&g, xs, ws, gs, dxs, dws);
    };
    match (need_x, need_w) {
        (true, true) => dx
            .par_chunks_mut(g.in_len())
            .zip(dw.par_chunks_mut(wlen))
            .enumerate()
            .for_each(|(i, (a, b))| work(i, Some(a), Some(b))),
        (true, false) => dx
            .par_chunks_mut(g.in_len())
            .enumerate()
            .for_each(|(i, a)| work(i, Some(a), None)),
        (false, true) => dw
            .par_chunks_mut(wlen)
            .enumerate()
            .for_each(|(i, b)| work(i, None, Some(b))),
        (false, false) => {}
    }
    Ok((
        need_x.then(|| Tensor::new(x.shape(), dx).expect("dx shape")),
        need_w.then(|| Tensor::new(wd.shape(), dw).expect("dw shape")),
    ))
}

pub(crate) struct KernelDims {
    pub n: usize,
    pub cout: usize,
    pub cin: usize,
    pub kk: usize,
}

pub(crate) fn modulate_dims<T: Float>(
    w: &Tensor<T>,
    a_s: &Tensor<T>,
    a_c: &Tensor<T>,
    a_f: &Tensor<T>,
) -> Result<KernelDims> {
    let op = "modulate_kernel";
    let (cout, cin, kh, kw) = match *w.shape() {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::dim(op, format!("weight shape {:?} is not 4-D", w.shape()))),
    };
    let n = a_s.shape().first().copied().unwrap_or(0);
    let expect = |t: &Tensor<T>, want: &[usize], what: &str| {
        if t.shape() != want {
            Err(Error::dim(
                op,
                format!("{what} attention has shape {:?}, expected {want:?}", t.shape()),
            ))
        } else {
            Ok(())
        }
    };
    expect(a_s, &[n, kh, kw], "spatial")?;
    expect(a_c, &[n, cin], "channel")?;
    expect(a_f, &[n, cout], "filter")?;
    Ok(KernelDims {
        n,
        cout,
        cin,
        kk: kh * kw,
    })
}

/// `wd[n,o,c,i,j] = w[o,c,i,j] * a_s[n,i,j] * a_c[n,c] * a_f[n,o]`.
pub(crate) fn modulate_kernel<T: Float>(
    w: &Tensor<T>,
    a_s: &Tensor<T>,
    a_c: &Tensor<T>,
    a_f: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = modulate_dims(w, a_s, a_c, a_f)?;
    let wlen = d.cout * d.cin * d.kk;
    let mut out = vec![T::zero(); d.n * wlen];
    for n in 0..d.n {
        let s = &a_s.data()[n * d.kk..(n + 1) * d.kk];
        for o in 0..d.cout {
            let fo = a_f.data()[n * d.cout + o];
            for c in 0..d.cin {
                let fc = fo * a_c.data()[n * d.cin + c];
                let base = (o * d.cin + c) * d.kk;
                for t in 0..d.kk {
                    out[n * wlen + base + t] = w.data()[base + t] * s[t] * fc;
                }
            }
        }
    }
    let ks = &w.shape()[2..];
    Tensor::new(&[d.n, d.cout, d.cin, ks[0], ks[1]], out)
}

pub(crate) fn modulate_kernel_grad<T: Float>(
    w: &Tensor<T>,
    a_s: &Tensor<T>,
    a_c: &Tensor<T>,
    a_f: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<[Tensor<T>; 4]> {
    let d = modulate_dims(w, a_s, a_c, a_f)?;
    let wlen = d.cout * d.cin * d.kk;
    let mut dw = vec![T::zero(); wlen];
    let mut ds = vec![T::zero(); d.n * d.kk];
    let mut dc = vec![T::zero(); d.n * d.cin];
    let mut df = vec![T::zero(); d.n * d.cout];
    for n in 0..d.n {
        let s = &a_s.data()[n * d.kk..(n + 1) * d.kk];
        for o in 0..d.cout {
            let fo = a_f.data()[n * d.cout + o];
            for c in 0..d.cin {
                let cc = a_c.data()[n * d.cin + c];
                let base = (o * d.cin + c) * d.kk;
                let mut acc_sw = T::zero();
                for t in 0..d.kk {
                    let gv = g.data()[n * wlen + base + t];
                    let wv = w.data()[base + t];
                    dw[base + t] += gv * s[t] * cc * fo;
                    ds[n * d.kk + t] += gv * wv * cc * fo;
                    acc_sw += gv * wv * s[t];
                }
                dc[n * d.cin + c] += acc_sw * fo;
                df[n * d.cout + o] += acc_sw * cc;
            }
        }
    }
    Ok([
        Tensor::new(w.shape(), dw)?,
        Tensor::new(a_s.shape(), ds)?,
        Tensor::new(a_c.shape(), dc)?,
        Tensor::new(a_f.shape(), df)?,
    ])
}

/// Channel-wise layer normalization at every `(n, y, x)` position.
/// Returns `(y, x_hat, inv_std)`.
pub(crate) fn layer_norm<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::dim(
            "layer_norm",
            format!(
                "gamma/beta have {}/{} entries for {c} channels",
                gamma.numel(),
                beta.numel()
            ),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::Config("layer_norm: eps must be positive".into()));
    }
    let plane = h * w;
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    let mut inv = vec![T::zero(); n * plane];
    let xd = x.data();
    for i in 0..n {
        let base = i * c * plane;
        for p in 0..plane {
            let mut mean = 0.0;
            for ch in 0..c {
                mean += xd[base + ch * plane + p].f64();
            }
            mean /= c as f64;
            let mut var = 0.0;
            for ch in 0..c {
                let d = xd[base + ch * plane + p].f64() - mean;
                var += d * d;
            }
            var /= c as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            inv[i * plane + p] = T::c(inv_std);
            for ch in 0..c {
                let idx = base + ch * plane + p;
                let xh = T::c((xd[idx].f64() - mean) * inv_std);
                xhat[idx] = xh;
                y[idx] = gamma.data()[ch] * xh + beta.data()[ch];
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), y)?,
        Tensor::new(x.shape(), xhat)?,
        inv,
    ))
}

pub(crate) fn layer_norm_grad<T: Float>(
    g: &Tensor<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
) -> Result<[Tensor<T>; 3]> {
    let (n, c, h, w) = xhat.dims4()?;
    let plane = h * w;
    let mut dx = vec![T::zero(); xhat.numel()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let (gd, xd) = (g.data(), xhat.data());
    let cf = T::c(c as f64);
    for i in 0..n {
        let base = i * c * plane;
        for p in 0..plane {
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for ch in 0..c {
                let idx = base + ch * plane + p;
                let d = gd[idx] * gamma.data()[ch];
                sum_d += d;
                sum_dx += d * xd[idx];
                dgamma[ch] += gd[idx] * xd[idx];
                dbeta[ch] += gd[idx];
            }
            let s = inv_std[i * plane + p] / cf;
            for ch in 0..c {
                let idx = base + ch * plane + p;
                let d = gd[idx] * gamma.data()[ch];
                dx[idx] = s * (cf * d - sum_d - xd[idx] * sum_dx);
            }
        }
    }
    Ok([
        Tensor::new(xhat.shape(), dx)?,
        Tensor::new(&[c], dgamma)?,
        Tensor::new(&[c], dbeta)?,
    ])
}

/// Numerically stable softmax over the last axis.
pub(crate) fn softmax_last<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let cols = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dim("softmax", "scalar input"))?;
    let mut out = x.data().to_vec();
    if cols == 0 {
        return Tensor::new(x.shape(), out);
    }
    for row in out.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn softmax_last_grad<T: Float>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let cols = *y.shape().last().expect("softmax output has an axis");
    let mut dx = vec![T::zero(); y.numel()];
    for ((d, yr), gr) in dx
        .chunks_mut(cols)
        .zip(y.data().chunks(cols))
        .zip(g.data().chunks(cols))
    {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((dv, &yv), &gv) in d.iter_mut().zip(yr).zip(gr) {
            *dv = yv * (gv - dot);
        }
    }
    Tensor::new(y.shape(), dx).expect("softmax grad shape")
}

/// `[N,C,H,W] -> [N,C*r*r,H/r,W/r]`; channel `c*r*r + i*r + j` holds the
/// pixel at offset `(i, j)` of each `r x r` cell.
pub(crate) fn pixel_unshuffle<T: Float>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::dim(
            "pixel_unshuffle",
            format!("{h}x{w} is not divisible by factor {r}"),
        ));
    }
    let (ho, wo) = (h / r, w / r);
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let oc = (ch * r + i) * r + j;
                    for y in 0..ho {
                        let src = ((b * c + ch) * h + y * r + i) * w;
                        let dst = ((b * c * r * r + oc) * ho + y) * wo;
                        for xx in 0..wo {
                            out[dst + xx] = xd[src + xx * r + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c * r * r, ho, wo], out)
}

/// Inverse of [`pixel_unshuffle`].
pub(crate) fn pixel_shuffle<T: Float>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::dim(
            "pixel_shuffle",
            format!("{c} channels not divisible by {}", r * r),
        ));
    }
    let co = c / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    for b in 0..n {
        for ch in 0..co {
            for i in 0..r {
                for j in 0..r {
                    let ic = (ch * r + i) * r + j;
                    for y in 0..h {
                        let src = ((b * c + ic) * h + y) * w;
                        let dst = ((b * co + ch) * ho + y * r + i) * wo;
                        for xx in 0..w {
                            out[dst + xx * r + j] = xd[src + xx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, co, ho, wo], out)
}

pub(crate) fn slice_channels<T: Float>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if start + len > c {
        return Err(Error::dim(
            "slice_channels",
            format!("channels {start}..{} out of {c}", start + len),
        ));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * len * plane);
    for b in 0..n {
        out.extend_from_slice(&x.data()[(b * c + start) * plane..(b * c + start + len) * plane]);
    }
    Tensor::new(&[n, len, h, w], out)
}

pub(crate) fn concat_channels<T: Float>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::dim("concat_channels", "nothing to concatenate"))?;
    let (n, _, h, w) = first.dims4()?;
    let mut total = 0;
    for t in xs {
        let (tn, tc, th, tw) = t.dims4()?;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::dim(
                "concat_channels",
                format!("shape {:?} incompatible with {:?}", t.shape(), first.shape()),
            ));
        }
        total += tc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for t in xs {
            let tc = t.shape()[1];
            out.extend_from_slice(&t.data()[b * tc * plane..(b + 1) * tc * plane]);
        }
    }
    Tensor::new(&[n, total, h, w], out)
}

fn mat_dims<T: Float>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [p, q] => Ok((1, p, q)),
        [b, p, q] => Ok((b, p, q)),
        _ => Err(Error::dim(
            op,
            format!("expected a matrix or batch of matrices, got {:?}", t.shape()),
        )),
    }
}

/// Batched matrix product `[B,P,Q] x [B,Q,R] -> [B,P,R]` (2-D inputs are a batch of one).
pub(crate) fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ba, p, q) = mat_dims("matmul", a)?;
    let (bb, q2, r) = mat_dims("matmul", b)?;
    if ba != bb || q != q2 {
        return Err(Error::dim(
            "matmul",
            format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![T::zero(); ba * p * r];
    for i in 0..ba {
        T::gemm(
            p,
            q,
            r,
            &a.data()[i * p * q..(i + 1) * p * q],
            false,
            &b.data()[i * q * r..(i + 1) * q * r],
            false,
            &mut out[i * p * r..(i + 1) * p * r],
            false,
        );
    }
    let shape: Vec<usize> = if a.ndim() == 2 { vec![p, r] } else { vec![ba, p, r] };
    Tensor::new(&shape, out)
}

pub(crate) fn matmul_grad<T: Float>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    need: [bool; 2],
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (ba, p, q) = mat_dims("matmul", a).expect("checked in forward");
    let (_, _, r) = mat_dims("matmul", b).expect("checked in forward");
    let da = need[0].then(|| {
        let mut d = vec![T::zero(); a.numel()];
        for i in 0..ba {
            T::gemm(
                p,
                r,
                q,
                &g.data()[i * p * r..(i + 1) * p * r],
                false,
                &b.data()[i * q * r..(i + 1) * q * r],
                true,
                &mut d[i * p * q..(i + 1) * p * q],
                false,
            );
        }
        Tensor::new(a.shape(), d).expect("da shape")
    });
    let db = need[1].then(|| {
        let mut d = vec![T::zero(); b.numel()];
        for i in 0..ba {
            T::gemm(
                q,
                p,
                r,
                &a.data()[i * p * q..(i + 1) * p * q],
                true,
                &g.data()[i * p * r..(i + 1) * p * r],
                false,
                &mut d[i * q * r..(i + 1) * q * r],
                false,
            );
        }
        Tensor::new(b.shape(), d).expect("db shape")
    });
    (da, db)
}

pub(crate) fn transpose_last_two<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let nd = x.ndim();
    if nd < 2 {
        return Err(Error::dim("transpose", format!("shape {:?} has < 2 axes", x.shape())));
    }
    let (p, q) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    let batch = x.numel() / (p * q).max(1);
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..batch {
        let src = &x.data()[b * p * q..(b + 1) * p * q];
        let dst = &mut out[b * p * q..(b + 1) * p * q];
        for i in 0..p {
            for j in 0..q {
                dst[j * p + i] = src[i * q + j];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.swap(nd - 2, nd - 1);
    Tensor::new(&shape, out)
}

/// `[N,C,H,W] -> [N,C]` spatial mean.
pub(crate) fn global_avg_pool<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    if plane == 0 {
        return Err(Error::dim("global_avg_pool", "empty spatial extent"));
    }
    let data = x
        .data()
        .chunks(plane)
        .map(|s| T::c(s.iter().map(|v| v.f64()).sum::<f64>() / plane as f64))
        .collect();
    Tensor::new(&[n, c], data)
}

/// `y = x w^T + b` for `x: [N,In]`, `w: [Out,In]`.
pub(crate) fn linear<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, fin) = match *x.shape() {
        [a, b] => (a, b),
        _ => return Err(Error::dim("linear", format!("input {:?} is not [N,In]", x.shape()))),
    };
    let (fout, win) = match *w.shape() {
        [a, b] => (a, b),
        _ => return Err(Error::dim("linear", format!("weight {:?} is not [Out,In]", w.shape()))),
    };
    if win != fin {
        return Err(Error::dim(
            "linear",
            format!("weight expects {win} features, input has {fin}"),
        ));
    }
    let mut out = vec![T::zero(); n * fout];
    T::gemm(n, fin, fout, x.data(), false, w.data(), true, &mut out, false);
    if let Some(b) = b {
        if b.numel() != fout {
            return Err(Error::dim("linear", format!("bias has {} entries for {fout} outputs", b.numel())));
        }
        for row in out.chunks_mut(fout) {
            row.iter_mut().zip(b.data()).for_each(|(v, &bv)| *v += bv);
        }
    }
    Tensor::new(&[n, fout], out)
}

pub(crate) fn linear_grad<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    need: [bool; 3],
) -> [Option<Tensor<T>>; 3] {
    let (n, fin) = (x.shape()[0], x.shape()[1]);
    let fout = w.shape()[0];
    let dx = need[0].then(|| {
        let mut d = vec![T::zero(); n * fin];
        T::gemm(n, fout, fin, g.data(), false, w.data(), false, &mut d, false);
        Tensor::new(x.shape(), d).expect("dx shape")
    });
    let dw = need[1].then(|| {
        let mut d = vec![T::zero(); fout * fin];
        T::gemm(fout, n, fin, g.data(), true, x.data(), false, &mut d, false);
        Tensor::new(w.shape(), d).expect("dw shape")
    });
    let db = need[2].then(|| {
        let mut d = vec![T::zero(); fout];
        for row in g.data().chunks(fout) {
            d.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
        }
        Tensor::new(&[fout], d).expect("db shape")
    });
    [dx, dw, db]
}

/// Mirror index into `[0, len)` without repeating the edge sample.
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Extends the bottom and right borders by reflection.
pub(crate) fn reflect_pad<T: Float>(x: &Tensor<T>, bottom: usize, right: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::dim("reflect_pad", "cannot pad an empty image"));
    }
    let (ho, wo) = (h + bottom, w + right);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in x.data().chunks(h * w) {
        for y in 0..ho {
            let sy = reflect_index(y as isize, h);
            for xx in 0..wo {
                out.push(plane[sy * w + reflect_index(xx as isize, w)]);
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub(crate) fn reflect_pad_grad<T: Float>(g: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, c, ho, wo) = g.dims4().expect("4-D gradient");
    let mut out = vec![T::zero(); n * c * h * w];
    for (dst, src) in out.chunks_mut(h * w).zip(g.data().chunks(ho * wo)) {
        for y in 0..ho {
            let sy = reflect_index(y as isize, h);
            for xx in 0..wo {
                dst[sy * w + reflect_index(xx as isize, w)] += src[y * wo + xx];
            }
        }
    }
    Tensor::new(&[n, c, h, w], out).expect("pad grad shape")
}

/// Top-left `h x w` window.
pub(crate) fn crop<T: Float>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c, hi, wi) = x.dims4()?;
    if h > hi || w > wi {
        return Err(Error::dim("crop", format!("cannot crop {hi}x{wi} to {h}x{w}")));
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in x.data().chunks(hi * wi) {
        for y in 0..h {
            out.extend_from_slice(&plane[y * wi..y * wi + w]);
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

pub(crate) fn crop_grad<T: Float>(g: &Tensor<T>, hi: usize, wi: usize) -> Tensor<T> {
    let (n, c, h, w) = g.dims4().expect("4-D gradient");
    let mut out = vec![T::zero(); n * c * hi * wi];
    for (dst, src) in out.chunks_mut(hi * wi).zip(g.data().chunks(h * w)) {
        for y in 0..h {
            dst[y * wi..y * wi + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
    Tensor::new(&[n, c, hi, wi], out).expect("crop grad shape")
}
