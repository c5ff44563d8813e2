use rand::rngs::Xoshiro256PlusPlus;
use rand::{RngExt, SeedableRng};

use crate::error::Result;
use crate::tensor::{Float, Tensor};

use super::degrade::{degrade, DegradeSpec};
use super::patches::extract_patches;

/// A procedural clean scene `[1, 3, h, w]` in `[0, 1]`: a colour gradient,
/// a few flat rectangles and discs, and a low-amplitude sinusoidal texture.
pub fn synthetic_scene<T: Float>(h: usize, w: usize, seed: u64) -> Tensor<T> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let corner: [[f64; 3]; 2] = [
        [rng.random(), rng.random(), rng.random()],
        [rng.random(), rng.random(), rng.random()],
    ];
    let mut img = vec![0.0f64; 3 * h * w];
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let t = (y + x) as f64 / (h + w).max(2) as f64;
            for c in 0..3 {
                img[c * plane + y * w + x] = 0.2 + 0.6 * (corner[0][c] * (1.0 - t) + corner[1][c] * t);
            }
        }
    }
    let shapes = 3 + rng.random_range(0..4);
    for _ in 0..shapes {
        let color: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let ry = rng.random_range(0.1..0.35) * h as f64;
        let rx = rng.random_range(0.1..0.35) * w as f64;
        let disc = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = if disc { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if inside {
                    for c in 0..3 {
                        img[c * plane + y * w + x] = color[c];
                    }
                }
            }
        }
    }
    let (fy, fx) = (rng.random_range(0.1..0.6), rng.random_range(0.1..0.6));
    for y in 0..h {
        for x in 0..w {
            let tex = 0.05 * ((fy * y as f64).sin() * (fx * x as f64).cos());
            for c in 0..3 {
                let v = &mut img[c * plane + y * w + x];
                *v = (*v + tex).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[1, 3, h, w], img.into_iter().map(T::c).collect()).expect("sizes agree")
}

/// Matched degraded / clean images.
#[derive(Clone, Debug, Default)]
pub struct PairSet<T> {
    pub degraded: Vec<Tensor<T>>,
    pub clean: Vec<Tensor<T>>,
}

impl<T: Float> PairSet<T> {
    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    pub fn push(&mut self, degraded: Tensor<T>, clean: Tensor<T>) {
        self.degraded.push(degraded);
        self.clean.push(clean);
    }
}

/// `count` clean `size x size` patches cut from synthetic scenes (one scene
/// per four patches) and degraded with `spec`, reseeded per patch.
pub fn synthetic_pairs<T: Float>(count: usize, size: usize, spec: &DegradeSpec, seed: u64) -> Result<PairSet<T>> {
    let scene_side = (size * 4).max(64);
    let mut set = PairSet::default();
    let mut i = 0;
    while set.len() < count {
        let scene_seed = seed.wrapping_mul(0x9E37_79B9).wrapping_add(i);
        let scene = synthetic_scene::<T>(scene_side, scene_side, scene_seed);
        let take = (count - set.len()).min(4);
        for p in extract_patches(&scene, size, take, scene_seed ^ 0xA5A5)? {
            let k = set.len() as u64;
            let degraded = degrade(&p.tensor, &spec.with_seed(spec.seed.wrapping_add(k)))?;
            set.push(degraded, p.tensor);
        }
        i += 1;
    }
    Ok(set)
}
