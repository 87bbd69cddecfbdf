//! Training objective `L1 + lambda * L_fft`.
//!
//! Both terms are mean-reduced. The frequency term is the mean complex
//! modulus of the difference of per-channel unnormalized 2D DFTs.

use crate::autograd::Var;
use crate::error::Result;
use crate::real::Real;
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA_FFT: f64 = 0.1;

/// Differentiable total loss on graph values.
pub fn total_loss_var<T: Real>(x_hat: &Var<T>, x: &Var<T>, lambda: f64) -> Result<Var<T>> {
    let l1 = x_hat.l1_loss(x)?;
    if lambda == 0.0 {
        return Ok(l1);
    }
    l1.add(&x_hat.fft_l1_loss(x)?.scale(T::lit(lambda)))
}

fn pair<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(Var<f64>, Var<f64>)> {
    a.check_same_shape(b)?;
    Ok((Var::constant(a.cast()), Var::constant(b.cast())))
}

/// Mean absolute difference, accumulated in `f64`.
pub fn l1_loss<T: Real>(x_hat: &Tensor<T>, x: &Tensor<T>) -> Result<f64> {
    let (a, b) = pair(x_hat, x)?;
    Ok(a.l1_loss(&b)?.item())
}

/// Mean modulus of `DFT(x_hat) - DFT(x)` over all `C*H*W` coefficients.
pub fn fft_loss<T: Real>(x_hat: &Tensor<T>, x: &Tensor<T>) -> Result<f64> {
    let (a, b) = pair(x_hat, x)?;
    Ok(a.fft_l1_loss(&b)?.item())
}

pub fn total_loss<T: Real>(x_hat: &Tensor<T>, x: &Tensor<T>, lambda: f64) -> Result<f64> {
    Ok(l1_loss(x_hat, x)? + lambda * fft_loss(x_hat, x)?)
}
