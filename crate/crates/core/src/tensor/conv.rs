//! Single-sample 2-D convolution kernels (im2col + GEMM, direct loops for
//! depth-wise). Batch-level parallelism lives in `kernels`.

use super::Float;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        op: &'static str,
        (cin, h, w): (usize, usize, usize),
        (cout, cin_per_group, k): (usize, usize, usize),
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Config(format!(
                "{op}: groups={groups} must divide Cin={cin} and Cout={cout}"
            )));
        }
        if cin_per_group != cin / groups {
            return Err(Error::dim(
                op,
                format!(
                    "weight expects {cin_per_group} input channels per group, input has {cin} channels over {groups} groups"
                ),
            ));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("{op}: kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::Config(format!("{op}: stride must be positive")));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim(
                op,
                format!("{h}x{w} input with pad {pad} is smaller than kernel {k}"),
            ));
        }
        Ok(ConvGeom {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            groups,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.cout * self.ho * self.wo
    }

    pub fn weight_len(&self) -> usize {
        self.cout * (self.cin / self.groups) * self.k * self.k
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.cin && self.groups == self.cout
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output indices `ox` whose input column `ox*stride + kx - pad` is in range.
    fn valid_range(&self, kx: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > kx {
            (self.pad - kx).div_ceil(s)
        } else {
            0
        };
        let hi_num = extent - 1 + self.pad;
        let hi = if hi_num >= kx {
            ((hi_num - kx) / s + 1).min(out_extent)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn im2col<T: Float>(g: &ConvGeom, channels: usize, x: &[T], cols: &mut [T]) {
    let plane = g.ho * g.wo;
    let (k, s, pad) = (g.k, g.stride, g.pad);
    for c in 0..channels {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * plane..][..plane];
                row.iter_mut().for_each(|v| *v = T::zero());
                let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - pad;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    let src = &xc[iy * g.w..(iy + 1) * g.w];
                    if s == 1 {
                        let ix0 = ox0 + kx - pad;
                        dst[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            dst[ox] = src[ox * s + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(g: &ConvGeom, channels: usize, cols: &[T], dx: &mut [T]) {
    let plane = g.ho * g.wo;
    let (k, s, pad) = (g.k, g.stride, g.pad);
    for c in 0..channels {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * plane..][..plane];
                let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - pad;
                    let src = &row[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut dxc[iy * g.w..(iy + 1) * g.w];
                    for ox in ox0..ox1 {
                        dst[ox * s + kx - pad] += src[ox];
                    }
                }
            }
        }
    }
}

/// `out = conv(x, w) + bias` for one sample. `out` is overwritten.
pub(crate) fn forward_sample<T: Float>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let plane = g.ho * g.wo;
    if g.is_depthwise() {
        depthwise_forward(g, x, w, out);
    } else {
        let cg = g.cin / g.groups;
        let og = g.cout / g.groups;
        let kk = cg * g.k * g.k;
        let mut cols = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); kk * plane]
        };
        for gi in 0..g.groups {
            let xg = &x[gi * cg * g.h * g.w..(gi + 1) * cg * g.h * g.w];
            let wg = &w[gi * og * kk..(gi + 1) * og * kk];
            let og_out = &mut out[gi * og * plane..(gi + 1) * og * plane];
            let rhs = if g.is_pointwise() {
                xg
            } else {
                im2col(g, cg, xg, &mut cols);
                &cols
            };
            T::gemm(og, kk, plane, wg, false, rhs, false, og_out, false);
        }
    }
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            out[o * plane..(o + 1) * plane]
                .iter_mut()
                .for_each(|v| *v += bv);
        }
    }
}

fn depthwise_forward<T: Float>(g: &ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
    let (k, s, pad) = (g.k, g.stride, g.pad);
    let plane = g.ho * g.wo;
    out.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let oc = &mut out[c * plane..(c + 1) * plane];
        for ky in 0..k {
            let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..k {
                let wv = w[(c * k + ky) * k + kx];
                let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - pad;
                    let src = &xc[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut oc[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox0..ox1 {
                        dst[ox] += wv * src[ox * s + kx - pad];
                    }
                }
            }
        }
    }
}

/// Gradients for one sample. `dx` is overwritten; `dw` is accumulated into.
pub(crate) fn backward_sample<T: Float>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    if g.is_depthwise() {
        depthwise_backward(g, x, w, gy, dx, dw);
        return;
    }
    let plane = g.ho * g.wo;
    let cg = g.cin / g.groups;
    let og = g.cout / g.groups;
    let kk = cg * g.k * g.k;
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise || dw.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); kk * plane]
    };
    let mut dcols = if pointwise || dx.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); kk * plane]
    };
    let mut dx = dx;
    if let Some(d) = dx.as_deref_mut() {
        d.iter_mut().for_each(|v| *v = T::zero());
    }
    let mut dw = dw;
    for gi in 0..g.groups {
        let xg = &x[gi * cg * g.h * g.w..(gi + 1) * cg * g.h * g.w];
        let wg = &w[gi * og * kk..(gi + 1) * og * kk];
        let gyg = &gy[gi * og * plane..(gi + 1) * og * plane];
        if let Some(dw) = dw.as_deref_mut() {
            let dwg = &mut dw[gi * og * kk..(gi + 1) * og * kk];
            let rhs = if pointwise {
                xg
            } else {
                im2col(g, cg, xg, &mut cols);
                &cols
            };
            T::gemm(og, plane, kk, gyg, false, rhs, true, dwg, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxg = &mut dx[gi * cg * g.h * g.w..(gi + 1) * cg * g.h * g.w];
            if pointwise {
                T::gemm(kk, og, plane, wg, true, gyg, false, dxg, false);
            } else {
                T::gemm(kk, og, plane, wg, true, gyg, false, &mut dcols, false);
                col2im(g, cg, &dcols, dxg);
            }
        }
    }
}

fn depthwise_backward<T: Float>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (k, s, pad) = (g.k, g.stride, g.pad);
    let plane = g.ho * g.wo;
    if let Some(d) = dx.as_deref_mut() {
        d.iter_mut().for_each(|v| *v = T::zero());
    }
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let gc = &gy[c * plane..(c + 1) * plane];
        for ky in 0..k {
            let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..k {
                let widx = (c * k + ky) * k + kx;
                let wv = w[widx];
                let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
                let mut acc = T::zero();
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - pad;
                    let grow = &gc[oy * g.wo..(oy + 1) * g.wo];
                    let xrow = &xc[iy * g.w..(iy + 1) * g.w];
                    for ox in ox0..ox1 {
                        acc += grow[ox] * xrow[ox * s + kx - pad];
                    }
                    if let Some(d) = dx.as_deref_mut() {
                        let drow = &mut d[c * g.h * g.w + iy * g.w..][..g.w];
                        for ox in ox0..ox1 {
                            drow[ox * s + kx - pad] += wv * grow[ox];
                        }
                    }
                }
                if let Some(d) = dw.as_deref_mut() {
                    d[widx] += acc;
                }
            }
        }
    }
}
