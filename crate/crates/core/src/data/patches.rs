use rand::rngs::Xoshiro256PlusPlus;
use rand::{RngExt, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// A square crop and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch<T> {
    pub tensor: Tensor<T>,
    pub top: usize,
    pub left: usize,
}

/// The `size x size` window of every sample at `(top, left)`.
pub fn crop_at<T: Float>(img: &Tensor<T>, top: usize, left: usize, size: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = img.dims4()?;
    if top + size > h || left + size > w {
        return Err(Error::dim(
            "crop_at",
            format!("{size}x{size} window at ({top}, {left}) exceeds {h}x{w}"),
        ));
    }
    let d = img.data();
    let mut out = Vec::with_capacity(n * c * size * size);
    for p in 0..n * c {
        for y in top..top + size {
            let row = p * h * w + y * w;
            out.extend_from_slice(&d[row + left..row + left + size]);
        }
    }
    Tensor::new(&[n, c, size, size], out)
}

/// `count` crops at uniformly random positions.
pub fn extract_patches<T: Float>(img: &Tensor<T>, size: usize, count: usize, seed: u64) -> Result<Vec<Patch<T>>> {
    let (_, _, h, w) = img.dims4()?;
    if size == 0 || size > h.min(w) {
        return Err(Error::dim(
            "extract_patches",
            format!("patch size {size} does not fit a {h}x{w} image"),
        ));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let top = rng.random_range(0..=h - size);
            let left = rng.random_range(0..=w - size);
            Ok(Patch {
                tensor: crop_at(img, top, left, size)?,
                top,
                left,
            })
        })
        .collect()
}

/// One of the four axis flips.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flip {
    None,
    H,
    V,
    HV,
}

impl Flip {
    pub const ALL: [Flip; 4] = [Flip::None, Flip::H, Flip::V, Flip::HV];

    /// Uniform choice from a seed.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        Self::ALL[rng.random_range(0..4)]
    }

    pub fn apply<T: Float>(self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = img.dims4()?;
        let (fh, fv) = match self {
            Flip::None => return Ok(img.clone()),
            Flip::H => (true, false),
            Flip::V => (false, true),
            Flip::HV => (true, true),
        };
        let d = img.data();
        let mut out = Vec::with_capacity(d.len());
        for p in 0..n * c {
            for y in 0..h {
                let sy = if fv { h - 1 - y } else { y };
                let row = p * h * w + sy * w;
                if fh {
                    out.extend(d[row..row + w].iter().rev());
                } else {
                    out.extend_from_slice(&d[row..row + w]);
                }
            }
        }
        Tensor::new(img.shape(), out)
    }
}

/// Applies one seeded flip to both images of a training pair.
pub fn flip_augment<T: Float>(pair: (&Tensor<T>, &Tensor<T>), seed: u64) -> Result<(Tensor<T>, Tensor<T>)> {
    let (a, b) = pair;
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "flip_augment",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let f = Flip::from_seed(seed);
    Ok((f.apply(a)?, f.apply(b)?))
}
