//! WGAN-GP and cycle-consistency loss terms.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `eps * real + (1 - eps) * fake` with one `eps` per sample.
pub fn interpolate_samples<T: Scalar>(real: &Var<T>, fake: &Var<T>, eps: &Tensor<T>) -> Result<Var<T>> {
    let shape = real.shape();
    if shape != fake.shape() {
        return Err(Error::shape("interpolate_samples", &shape, &fake.shape()));
    }
    if eps.rank() != 1 || eps.len() != shape[0] {
        return Err(Error::shape("interpolate_samples", &shape[..1], eps.shape()));
    }
    if eps.data().iter().any(|e| !(T::zero()..=T::one()).contains(e)) {
        return Err(Error::invalid("interpolate_samples", "eps must lie in [0, 1]"));
    }
    let per = real.value().len() / shape[0];
    let a = Tensor::from_fn(&shape, |i| eps.data()[i / per]);
    let b = a.map(|e| T::one() - e);
    real.mul_const(&a)?.add(&fake.mul_const(&b)?)
}

/// Mean over the batch of `(||grad_x D(x)||_2 - 1)^2`, differentiable with
/// respect to the critic parameters. An `x_hat` that does not require
/// gradients is re-entered as a fresh variable.
pub fn gradient_penalty<T, F>(critic: F, x_hat: &Var<T>) -> Result<Var<T>>
where
    T: Scalar,
    F: FnOnce(&Var<T>) -> Result<Var<T>>,
{
    let x = if x_hat.requires_grad() {
        x_hat.clone()
    } else {
        x_hat.detach_as_variable()
    };
    let scores = critic(&x)?;
    let grad = x.tape().input_gradient(&scores, &x)?;
    Ok(grad.l2_norm_per_sample()?.add_scalar(-1.0).square().mean())
}

/// Minimized by the critic.
#[derive(Debug, Clone)]
pub struct CriticLoss<T: Scalar> {
    /// `mean D(fake) - mean D(real) + lambda * penalty`
    pub loss: Var<T>,
    pub penalty: Var<T>,
    pub mean_real: f64,
    pub mean_fake: f64,
}

pub fn critic_loss<T, F>(critic: F, real: &Var<T>, fake: &Var<T>, lambda: f64, eps: &Tensor<T>) -> Result<CriticLoss<T>>
where
    T: Scalar,
    F: Fn(&Var<T>) -> Result<Var<T>>,
{
    if lambda < 0.0 {
        return Err(Error::invalid("critic_loss", "lambda must be non-negative"));
    }
    let d_real = critic(real)?.mean();
    let d_fake = critic(fake)?.mean();
    let x_hat = interpolate_samples(real, fake, eps)?;
    let penalty = gradient_penalty(&critic, &x_hat)?;
    let loss = d_fake.sub(&d_real)?.add(&penalty.scale(lambda))?;
    Ok(CriticLoss {
        mean_real: d_real.value().item().as_f64(),
        mean_fake: d_fake.value().item().as_f64(),
        loss,
        penalty,
    })
}

/// `-mean D(fake)`.
pub fn generator_adv_loss<T, F>(critic: F, fake: &Var<T>) -> Result<Var<T>>
where
    T: Scalar,
    F: FnOnce(&Var<T>) -> Result<Var<T>>,
{
    Ok(critic(fake)?.mean().neg())
}

/// Batch mean of per-sample L2 norms of `x - x_rec`.
pub fn cycle_loss<T: Scalar>(x: &Var<T>, x_rec: &Var<T>) -> Result<Var<T>> {
    Ok(x.sub(x_rec)?.l2_norm_per_sample()?.mean())
}
