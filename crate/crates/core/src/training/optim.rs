//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// Moment buffers in census order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Scalar> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || {
            params
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One update. Non-finite gradients reject the step before anything changes.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid(
            "adam_step",
            format!("{} parameters, {} gradients, {} moment buffers", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (e, g) in params.entries().iter().zip(grads) {
        if e.value.shape() != g.shape() {
            return Err(Error::shape("adam_step", e.value.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite {
                what: format!("adam_step: gradient of {}", e.name),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
    let c1 = T::from_f64_lossy(1.0 / (1.0 - cfg.beta1.powi(t)));
    let c2 = T::from_f64_lossy(1.0 / (1.0 - cfg.beta2.powi(t)));
    let lr = T::from_f64_lossy(cfg.lr);
    let eps = T::from_f64_lossy(cfg.eps);
    let one = T::one();
    for (i, p) in params.tensors_mut().enumerate() {
        let (m, v, g) = (state.m[i].data_mut(), state.v[i].data_mut(), grads[i].data());
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            m[k] = b1 * m[k] + (one - b1) * g[k];
            v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
            let m_hat = m[k] * c1;
            let v_hat = v[k] * c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.add("w", Tensor::full(&[2], value));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(0.3);
        let mut s = OptimizerState::new(&p);
        adam_step(&mut p, &[Tensor::zeros(&[2])], &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p.entries()[0].value.data(), &[0.3, 0.3]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = single(0.0);
        let mut s = OptimizerState::new(&p);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &[Tensor::ones(&[2])], &mut s, &cfg).unwrap();
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
        let expected = -0.1 / (1.0 + 1e-8);
        assert!(p.entries()[0].value.data().iter().all(|&w| (w - expected).abs() < 1e-15));
    }

    #[test]
    fn identical_histories_identical_updates() {
        let mut p = ParamSet::<f64>::new();
        p.add("a", Tensor::full(&[3], 0.5));
        p.add("b", Tensor::full(&[3], 0.5));
        let mut s = OptimizerState::new(&p);
        for k in 0..5 {
            let g = Tensor::full(&[3], 0.1 * k as f64 - 0.2);
            adam_step(&mut p, &[g.clone(), g], &mut s, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p.entries()[0].value, p.entries()[1].value);
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut p = single(1.0);
        let mut s = OptimizerState::new(&p);
        let g = Tensor::from_f64_slice(&[2], &[0.0, f64::NAN]).unwrap();
        let err = adam_step(&mut p, &[g], &mut s, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("gradient of w"));
        assert_eq!(s.step, 0);
        assert_eq!(p.entries()[0].value.data(), &[1.0, 1.0]);
    }
}
