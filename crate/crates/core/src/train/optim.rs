use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Float, Tensor};

/// AdamW hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.02,
            eps: 1e-8,
        }
    }
}

/// Moment buffers, one pair per parameter, and the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T> {
    pub hyper: AdamW,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> OptState<T> {
    pub fn new(params: &ParamStore<T>, hyper: AdamW) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        OptState {
            hyper,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn check_matches(&self, params: &ParamStore<T>) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer has {} buffers for {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        for ((id, name, p), (m, v)) in params.iter().zip(self.m.iter().zip(&self.v)) {
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::Config(format!(
                    "optimizer buffers for {name} (#{}) do not match shape {:?}",
                    id.index(),
                    p.shape()
                )));
            }
        }
        Ok(())
    }
}

/// One AdamW update with decoupled weight decay:
///
/// ```text
/// m = b1 m + (1 - b1) g          v = b2 v + (1 - b2) g^2
/// p = p - lr wd p - lr m_hat / (sqrt(v_hat) + eps)
/// ```
///
/// Parameters without a gradient are left alone. If any gradient holds a
/// non-finite value nothing is modified and an error names the parameter.
pub fn adamw_step<T: Float>(
    params: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut OptState<T>,
    lr: f64,
) -> Result<()> {
    state.check_matches(params)?;
    if grads.len() != params.len() {
        return Err(Error::Config(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for ((_, name, p), g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::dim("adamw_step", format!("gradient of {name} has shape {:?}", g.shape())));
            }
            if !g.is_finite() {
                return Err(Error::Config(format!("non-finite gradient for {name}, step rejected")));
            }
        }
    }
    let h = state.hyper;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let Some(g) = &grads[i] else { continue };
        let p = params.get_mut(id).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j].f64();
            let mj = h.beta1 * m[j].f64() + (1.0 - h.beta1) * gj;
            let vj = h.beta2 * v[j].f64() + (1.0 - h.beta2) * gj * gj;
            m[j] = T::c(mj);
            v[j] = T::c(vj);
            let pj = p[j].f64();
            let update = (mj / bc1) / ((vj / bc2).sqrt() + h.eps);
            p[j] = T::c(pj - lr * h.weight_decay * pj - lr * update);
        }
    }
    Ok(())
}

/// Cosine annealing from `lr_init` to `lr_min` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr_init: f64,
    pub lr_min: f64,
    pub total_steps: u64,
}

impl Schedule {
    pub const LR_INIT: f64 = 2e-4;
    pub const LR_MIN: f64 = 1e-6;

    pub fn new(total_steps: u64) -> Self {
        Schedule {
            lr_init: Self::LR_INIT,
            lr_min: Self::LR_MIN,
            total_steps,
        }
    }
}

/// `lr_min + (lr_init - lr_min) (1 + cos(pi step / total)) / 2`. Steps past
/// the end are clamped to `lr_min`.
pub fn cosine_lr(step: u64, sch: &Schedule) -> f64 {
    if step > sch.total_steps {
        log::warn!(
            "learning-rate step {step} is past the schedule end {}, using lr_min",
            sch.total_steps
        );
        return sch.lr_min;
    }
    if sch.total_steps == 0 {
        return sch.lr_init;
    }
    let frac = step as f64 / sch.total_steps as f64;
    sch.lr_min + 0.5 * (sch.lr_init - sch.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(p: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.push("p", Tensor::scalar(p)).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0);
        let mut st = OptState::new(&s, AdamW { weight_decay: 0.0, ..AdamW::default() });
        adamw_step(&mut s, &[Some(Tensor::scalar(1.0))], &mut st, 0.1).unwrap();
        let p = s.iter().next().unwrap().2.data()[0];
        assert!((p - 0.9).abs() < 1e-7, "{p}");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn non_finite_gradient_rejects_step() {
        let mut s = scalar_store(1.0);
        let mut st = OptState::new(&s, AdamW::default());
        let before = st.clone();
        let r = adamw_step(&mut s, &[Some(Tensor::scalar(f64::NAN))], &mut st, 0.1);
        assert!(r.unwrap_err().to_string().contains("p"));
        assert_eq!(st, before);
        assert_eq!(s.iter().next().unwrap().2.data()[0], 1.0);
    }

    #[test]
    fn missing_gradient_leaves_parameter() {
        let mut s = scalar_store(2.0);
        let mut st = OptState::new(&s, AdamW::default());
        adamw_step(&mut s, &[None], &mut st, 0.1).unwrap();
        assert_eq!(s.iter().next().unwrap().2.data()[0], 2.0);
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::new(100);
        assert_eq!(cosine_lr(0, &s), 2e-4);
        assert!((cosine_lr(100, &s) - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(50, &s) - 1.005e-4).abs() < 1e-15);
        assert_eq!(cosine_lr(101, &s), 1e-6);
    }
}
