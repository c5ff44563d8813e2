use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Var};

/// Floor added to the MSE so identical images give a finite loss.
pub const PSNR_LOSS_EPS: f64 = 1e-8;

/// Negative PSNR, `10 log10(MSE + eps)`. Equals -80 for identical inputs.
pub fn psnr_loss<T: Float>(tape: &mut Tape<T>, pred: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(
            "psnr_loss",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(&d, &d)?;
    let mse = tape.mean(&sq)?;
    let shifted = tape.add_const(&mse, T::c(PSNR_LOSS_EPS))?;
    let l = tape.ln(&shifted)?;
    tape.scale(&l, T::c(10.0 / std::f64::consts::LN_10))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn floor_and_closed_form() {
        let mut tape = Tape::<f64>::inference();
        let a = Var::constant(Tensor::full(&[1, 3, 2, 2], 0.4));
        let l = psnr_loss(&mut tape, &a, &a).unwrap();
        assert!((l.value().data()[0] + 80.0).abs() < 1e-9);
        let b = Var::constant(Tensor::full(&[1, 3, 2, 2], 0.5));
        let l = psnr_loss(&mut tape, &a, &b).unwrap();
        assert!((l.value().data()[0] + 20.0).abs() < 1e-5);
    }
}
