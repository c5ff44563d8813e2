//! Central-difference validation of backward rules.

use rand::rngs::Xoshiro256PlusPlus;
use rand::{RngExt, SeedableRng};

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over probed coordinates of
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// Number of coordinates probed.
    pub checked: usize,
    /// `(leaf, flat index, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares reverse-mode gradients of a scalar objective against central
/// differences with step `h`.
///
/// `f` receives a tape and one tracked leaf per entry of `leaves`, and must
/// return a one-element loss. Up to `samples` coordinates are drawn uniformly
/// (without replacement) over all leaves; if there are fewer, all are probed.
pub fn grad_check<F>(
    leaves: &mut [Tensor<f64>],
    mut f: F,
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var<f64>> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(leaves.iter())
        .map(|(v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(grads);
    drop(tape);

    let mut coords: Vec<(usize, usize)> = leaves
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    if coords.len() > samples {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        for i in 0..samples {
            let j = rng.random_range(i..coords.len());
            coords.swap(i, j);
        }
        coords.truncate(samples);
    }

    let mut eval = |leaves: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var<f64>> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
        let v = f(&mut tape, &vars)?.value().data()[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { op: "grad_check probe" })
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for &(i, j) in &coords {
        let orig = leaves[i].data()[j];
        leaves[i].data_mut()[j] = orig + h;
        let plus = eval(leaves);
        leaves[i].data_mut()[j] = orig - h;
        let minus = eval(leaves);
        leaves[i].data_mut()[j] = orig;
        let numeric = (plus? - minus?) / (2.0 * h);
        let a = analytic[i].data()[j];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((i, j, a, numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let mut leaves = vec![Tensor::new(&[4], vec![0.3, -1.0, 2.0, 5.0]).unwrap()];
        let mut tape = Tape::new();
        let x = tape.leaf(leaves[0].clone());
        let s = tape.sum(&x).unwrap();
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1.0; 4]);
        let r = grad_check(&mut leaves, |t, v| t.sum(&v[0]), 1e-4, 20, 0).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn square_sum_gradient_is_twice_x() {
        let mut leaves = vec![Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap()];
        let mut tape = Tape::new();
        let x = tape.leaf(leaves[0].clone());
        let sq = tape.mul(&x, &x).unwrap();
        let s = tape.sum(&sq).unwrap();
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
        let r = grad_check(
            &mut leaves,
            |t, v| {
                let sq = t.mul(&v[0], &v[0])?;
                t.sum(&sq)
            },
            1e-4,
            20,
            0,
        )
        .unwrap();
        // central differences are exact for quadratics up to rounding
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        let mut leaves = vec![Tensor::new(&[1], vec![1e-5]).unwrap()];
        let r = grad_check(&mut leaves, |t, v| t.ln(&v[0]).and_then(|l| t.sum(&l)), 1e-4, 1, 0);
        assert!(r.is_err());
    }
}
