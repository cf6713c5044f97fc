//! Reconstruction losses on normalized images. Sums are accumulated in
//! 64-bit in row-major order regardless of the tensor element type, so
//! the value is deterministic and does not drift with image size.

use super::tensor::{Real, Tensor};
use super::AutodiffError;

/// Default weight of the l-infinity term in the joint loss.
pub const DEFAULT_LAMBDA: f64 = 0.2;

/// Smallest log argument the l-infinity loss accepts.
pub const LOG_GUARD: f64 = 1e-6;

/// Loss value with its gradient w.r.t. the prediction.
#[derive(Clone, Debug)]
pub struct Loss<T = f32> {
    pub value: f64,
    pub grad: Tensor<T>,
}

fn pixel_count<T: Real>(x_hat: &Tensor<T>, x: &Tensor<T>) -> Result<f64, AutodiffError> {
    x_hat.check_same_shape(x)?;
    if x_hat.is_empty() {
        return Err(AutodiffError::ShapeMismatch("empty loss input".into()));
    }
    Ok(x_hat.len() as f64)
}

fn elementwise<T: Real>(
    x_hat: &Tensor<T>,
    x: &Tensor<T>,
    mut f: impl FnMut(f64) -> Result<(f64, f64), AutodiffError>,
) -> Result<Loss<T>, AutodiffError> {
    let count = pixel_count(x_hat, x)?;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(x_hat.len());
    for (&a, &b) in x_hat.data().iter().zip(x.data()) {
        let (value, slope) = f(a.as_f64() - b.as_f64())?;
        sum += value;
        grad.push(T::from_f64(slope / count));
    }
    Ok(Loss {
        value: sum / count,
        grad: Tensor::from_vec(x_hat.shape(), grad)?,
    })
}

/// Mean squared error.
pub fn mse_loss<T: Real>(x_hat: &Tensor<T>, x: &Tensor<T>) -> Result<Loss<T>, AutodiffError> {
    elementwise(x_hat, x, |d| Ok((d * d, 2.0 * d)))
}

/// Squared error with a dead zone of half-width `tau`:
/// mean of `max(d^2 - tau^2, 0)`.
pub fn truncated_l2_loss<T: Real>(
    x_hat: &Tensor<T>,
    x: &Tensor<T>,
    tau: f64,
) -> Result<Loss<T>, AutodiffError> {
    let tau_sq = tau * tau;
    elementwise(x_hat, x, |d| {
        let excess = d * d - tau_sq;
        Ok(if excess > 0.0 { (excess, 2.0 * d) } else { (0.0, 0.0) })
    })
}

/// l-infinity constrained loss: mean of `-log(1 - max(|d| - tau, 0))`.
/// Zero inside the tolerance tube and steep outside it.
pub fn linf_loss<T: Real>(
    x_hat: &Tensor<T>,
    x: &Tensor<T>,
    tau: f64,
) -> Result<Loss<T>, AutodiffError> {
    elementwise(x_hat, x, |d| {
        let excess = d.abs() - tau;
        if excess <= 0.0 {
            return Ok((0.0, 0.0));
        }
        let arg = 1.0 - excess;
        if arg <= LOG_GUARD {
            return Err(AutodiffError::LogDomain(arg));
        }
        Ok((-arg.ln(), d.signum() / arg))
    })
}

/// `mse + lambda * linf`.
pub fn joint_loss<T: Real>(
    x_hat: &Tensor<T>,
    x: &Tensor<T>,
    tau: f64,
    lambda: f64,
) -> Result<Loss<T>, AutodiffError> {
    let l2 = mse_loss(x_hat, x)?;
    let linf = linf_loss(x_hat, x, tau)?;
    let grad = l2
        .grad
        .data()
        .iter()
        .zip(linf.grad.data())
        .map(|(&a, &b)| T::from_f64(a.as_f64() + lambda * b.as_f64()))
        .collect();
    Ok(Loss {
        value: l2.value + lambda * linf.value,
        grad: Tensor::from_vec(x_hat.shape(), grad)?,
    })
}
