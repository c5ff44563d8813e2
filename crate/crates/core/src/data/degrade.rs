//! Synthetic degradations of clean `[0, 1]` images.

use rand::rngs::Xoshiro256PlusPlus;
use rand::{RngExt, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Depth map used by the haze model, with values in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthMode {
    /// Zero at the bottom row, one at the top row.
    #[default]
    LinearGradient,
    /// Zero at the centre, one at the corners.
    Radial,
}

/// A degradation and its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Degradation {
    /// Additive i.i.d. Gaussian noise; `sigma` on the 0–255 scale.
    GaussianNoise { sigma: f64 },
    /// Bright oriented streaks with a Gaussian cross-profile.
    RainStreaks {
        count: usize,
        /// Streak length in pixels.
        length: f64,
        /// Direction from vertical, degrees.
        angle_deg: f64,
        /// Peak brightness added by a streak, `[0, 1]`.
        intensity: f64,
    },
    /// `I = J t + A (1 - t)`, `t = exp(-beta d)`.
    Haze {
        beta: f64,
        airlight: f64,
        #[serde(default)]
        depth: DepthMode,
    },
    /// `gain * x^gamma`.
    LowLight { gamma: f64, gain: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeSpec {
    #[serde(flatten)]
    pub kind: Degradation,
    #[serde(default)]
    pub seed: u64,
}

impl DegradeSpec {
    pub fn noise(sigma: f64, seed: u64) -> Self {
        DegradeSpec {
            kind: Degradation::GaussianNoise { sigma },
            seed,
        }
    }

    /// Moderate rain for desk-scale patches.
    pub fn rain(seed: u64) -> Self {
        DegradeSpec {
            kind: Degradation::RainStreaks {
                count: 12,
                length: 12.0,
                angle_deg: 15.0,
                intensity: 0.5,
            },
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        DegradeSpec {
            kind: self.kind.clone(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self.kind {
            Degradation::GaussianNoise { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                bad(format!("noise sigma must be a finite value >= 0, got {sigma}"))
            }
            Degradation::RainStreaks { length, intensity, .. }
                if !(length > 0.0 && length.is_finite()) || !(0.0..=1.0).contains(&intensity) =>
            {
                bad(format!(
                    "rain needs length > 0 and intensity in [0, 1], got {length} and {intensity}"
                ))
            }
            Degradation::Haze { beta, airlight, .. } if !(beta >= 0.0 && beta.is_finite()) || !(airlight > 0.0 && airlight <= 1.0) => {
                bad(format!("haze needs beta >= 0 and airlight in (0, 1], got {beta} and {airlight}"))
            }
            Degradation::LowLight { gamma, gain } if !(gamma > 0.0 && gamma.is_finite()) || !(gain > 0.0 && gain.is_finite()) => {
                bad(format!("low light needs gamma > 0 and gain > 0, got {gamma} and {gain}"))
            }
            _ => Ok(()),
        }
    }
}

/// Applies `spec` to every sample of an `[N, 3, H, W]` image. The output is
/// clamped to `[0, 1]` and depends only on the input and the spec.
pub fn degrade<T: Float>(clean: &Tensor<T>, spec: &DegradeSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    let (n, c, h, w) = clean.dims4()?;
    if c != 3 {
        return Err(Error::dim("degrade", format!("expected 3 channels, got {c}")));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
    let mut out: Vec<f64> = clean.data().iter().map(|v| v.f64()).collect();
    let sample_len = 3 * h * w;
    for s in 0..n {
        let img = &mut out[s * sample_len..(s + 1) * sample_len];
        match spec.kind {
            Degradation::GaussianNoise { sigma } => {
                let std = sigma / 255.0;
                for v in img.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += std * z;
                }
            }
            Degradation::RainStreaks {
                count,
                length,
                angle_deg,
                intensity,
            } => {
                let layer = rain_layer(h, w, count, length, angle_deg, intensity, &mut rng);
                for ch in img.chunks_mut(h * w) {
                    for (v, r) in ch.iter_mut().zip(&layer) {
                        *v += r;
                    }
                }
            }
            Degradation::Haze { beta, airlight, depth } => {
                let d = depth_map(h, w, depth);
                for ch in img.chunks_mut(h * w) {
                    for (v, &di) in ch.iter_mut().zip(&d) {
                        let t = (-beta * di).exp();
                        *v = *v * t + airlight * (1.0 - t);
                    }
                }
            }
            Degradation::LowLight { gamma, gain } => {
                for v in img.iter_mut() {
                    *v = gain * v.max(0.0).powf(gamma);
                }
            }
        }
    }
    Tensor::new(clean.shape(), out.into_iter().map(|v| T::c(v.clamp(0.0, 1.0))).collect())
}

/// Sum of `count` streaks on an `h x w` plane. Each streak gets a random
/// centre, a random length in `[0.5, 1] * length`, a direction jittered by
/// up to 5 degrees and a brightness in `[0.5, 1] * intensity`.
fn rain_layer(
    h: usize,
    w: usize,
    count: usize,
    length: f64,
    angle_deg: f64,
    intensity: f64,
    rng: &mut Xoshiro256PlusPlus,
) -> Vec<f64> {
    const WIDTH: f64 = 0.6;
    let mut layer = vec![0.0; h * w];
    for _ in 0..count {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let len = length * rng.random_range(0.5..=1.0);
        let theta = (angle_deg + rng.random_range(-5.0..=5.0)).to_radians();
        let amp = intensity * rng.random_range(0.5..=1.0);
        let (dy, dx) = (theta.cos(), theta.sin());
        let (y0, x0) = (cy - dy * len / 2.0, cx - dx * len / 2.0);
        let reach = len / 2.0 + 3.0 * WIDTH;
        let ylo = (cy - reach).floor().max(0.0) as usize;
        let yhi = ((cy + reach).ceil() as usize).min(h.saturating_sub(1));
        let xlo = (cx - reach).floor().max(0.0) as usize;
        let xhi = ((cx + reach).ceil() as usize).min(w.saturating_sub(1));
        for y in ylo..=yhi {
            for x in xlo..=xhi {
                let (py, px) = (y as f64 - y0, x as f64 - x0);
                let along = (py * dy + px * dx).clamp(0.0, len);
                let (ey, ex) = (py - along * dy, px - along * dx);
                let d2 = ey * ey + ex * ex;
                layer[y * w + x] += amp * (-d2 / (2.0 * WIDTH * WIDTH)).exp();
            }
        }
    }
    layer
}

fn depth_map(h: usize, w: usize, mode: DepthMode) -> Vec<f64> {
    let mut d = vec![0.0; h * w];
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let rmax = (cy * cy + cx * cx).sqrt().max(1e-12);
    for y in 0..h {
        for x in 0..w {
            d[y * w + x] = match mode {
                DepthMode::LinearGradient => {
                    if h > 1 {
                        1.0 - y as f64 / (h - 1) as f64
                    } else {
                        0.0
                    }
                }
                DepthMode::Radial => {
                    let (ry, rx) = (y as f64 - cy, x as f64 - cx);
                    (ry * ry + rx * rx).sqrt() / rmax
                }
            };
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        assert!(DegradeSpec::noise(-1.0, 0).validate().is_err());
        let haze = |airlight| DegradeSpec {
            kind: Degradation::Haze {
                beta: 1.0,
                airlight,
                depth: DepthMode::Radial,
            },
            seed: 0,
        };
        assert!(haze(0.0).validate().is_err());
        assert!(haze(1.2).validate().is_err());
        assert!(haze(1.0).validate().is_ok());
    }

    #[test]
    fn depth_maps_span_unit_range() {
        for mode in [DepthMode::LinearGradient, DepthMode::Radial] {
            let d = depth_map(9, 7, mode);
            let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(lo.abs() < 1e-12 && (hi - 1.0).abs() < 1e-12, "{mode:?} {lo} {hi}");
        }
    }

    #[test]
    fn spec_serializes_flat() {
        let s = serde_json::to_string(&DegradeSpec::noise(25.0, 3)).unwrap();
        assert_eq!(s, r#"{"kind":"gaussian_noise","sigma":25.0,"seed":3}"#);
    }
}
