//! PSNR and SSIM on `[0, 1]` images, in RGB or on the BT.601 luma channel.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Channels a metric is computed on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    #[default]
    Rgb,
    /// BT.601 studio-swing luma.
    Y,
}

impl std::str::FromStr for ChannelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(ChannelMode::Rgb),
            "y" => Ok(ChannelMode::Y),
            other => Err(Error::Config(format!("unknown channel mode {other:?}"))),
        }
    }
}

fn same_shape<T: Float>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.numel() == 0 {
        return Err(Error::dim(op, "empty image"));
    }
    Ok(())
}

pub fn mse<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("mse", a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.f64() - y.f64();
            d * d
        })
        .sum();
    Ok(s / a.numel() as f64)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP_DB))
}

/// `Y = (65.481 R + 128.553 G + 24.966 B + 16) / 255`, `[N,3,H,W] -> [N,1,H,W]`.
pub fn rgb_to_y<T: Float>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = img.dims4()?;
    if c != 3 {
        return Err(Error::dim("rgb_to_y", format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let d = img.data();
    let mut out = Vec::with_capacity(n * plane);
    for s in 0..n {
        let base = s * 3 * plane;
        for i in 0..plane {
            let r = d[base + i].f64();
            let g = d[base + plane + i].f64();
            let b = d[base + 2 * plane + i].f64();
            out.push(T::c((65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0));
        }
    }
    Tensor::new(&[n, 1, h, w], out)
}

fn in_mode<T: Float>(img: &Tensor<T>, mode: ChannelMode) -> Result<Tensor<T>> {
    match mode {
        ChannelMode::Rgb => Ok(img.clone()),
        ChannelMode::Y => rgb_to_y(img),
    }
}

pub fn psnr_in<T: Float>(a: &Tensor<T>, b: &Tensor<T>, mode: ChannelMode) -> Result<f64> {
    psnr(&in_mode(a, mode)?, &in_mode(b, mode)?)
}

pub fn ssim_in<T: Float>(a: &Tensor<T>, b: &Tensor<T>, mode: ChannelMode) -> Result<f64> {
    ssim(&in_mode(a, mode)?, &in_mode(b, mode)?)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable valid-region filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x0 in 0..wo {
            rows[y * wo + x0] = (0..k).map(|i| g[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y0 in 0..ho {
        for x0 in 0..wo {
            out[y0 * wo + x0] = (0..k).map(|i| g[i] * rows[(y0 + i) * wo + x0]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> f64 {
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, g);
    let mu_b = filter_valid(b, h, w, g);
    let e_aa = filter_valid(&aa, h, w, g);
    let e_bb = filter_valid(&bb, h, w, g);
    let e_ab = filter_valid(&ab, h, w, g);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), `K1 = 0.01`,
/// `K2 = 0.03`, dynamic range 1, over the valid region, averaged over every
/// channel of every sample.
pub fn ssim<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (n, c, h, w) = a.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(
            "ssim",
            format!("{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let g = gaussian_window();
    let plane = h * w;
    let to64 = |t: &Tensor<T>, p: usize| -> Vec<f64> { t.data()[p * plane..(p + 1) * plane].iter().map(|v| v.f64()).collect() };
    let total: f64 = (0..n * c)
        .map(|p| ssim_plane(&to64(a, p), &to64(b, p), h, w, &g))
        .sum();
    Ok(total / (n * c) as f64)
}

/// Metrics of one restored image.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub path: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-image metrics and their means.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: ChannelMode,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn new(mode: ChannelMode) -> Self {
        EvalReport { mode, rows: Vec::new() }
    }

    /// Scores `restored` against `reference` and appends a row.
    pub fn push<T: Float>(&mut self, path: impl Into<String>, restored: &Tensor<T>, reference: &Tensor<T>) -> Result<&EvalRow> {
        let row = EvalRow {
            path: path.into(),
            psnr_db: psnr_in(restored, reference, self.mode)?,
            ssim: ssim_in(restored, reference, self.mode)?,
        };
        self.rows.push(row);
        Ok(self.rows.last().expect("just pushed"))
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr_db))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ssim))
    }

    /// `path,psnr_db,ssim`, one row per image.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("path,psnr_db,ssim\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6},{:.6}", csv_field(&r.path), r.psnr_db, r.ssim);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::<f64>::full(&[1, 3, 4, 4], 0.2);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let b = Tensor::<f64>::full(&[1, 3, 4, 4], 0.3);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &Tensor::zeros(&[1, 3, 4, 5])).is_err());
    }

    #[test]
    fn window_is_normalized_and_symmetric() {
        let g = gaussian_window();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(g[i], g[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::<f64>::zeros(&[1, 1, 10, 20]);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn report_means_and_csv() {
        let mut r = EvalReport::new(ChannelMode::Rgb);
        r.rows.push(EvalRow { path: "a.png".into(), psnr_db: 30.0, ssim: 0.9 });
        r.rows.push(EvalRow { path: "b,c.png".into(), psnr_db: 20.0, ssim: 0.7 });
        assert_eq!(r.mean_psnr(), 25.0);
        assert!((r.mean_ssim() - 0.8).abs() < 1e-12);
        let csv = r.to_csv();
        assert!(csv.starts_with("path,psnr_db,ssim\n"));
        assert!(csv.contains("\"b,c.png\",20.000000,0.700000"));
    }
}
