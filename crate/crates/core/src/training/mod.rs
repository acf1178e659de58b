//! Losses, masking, optimizers and the alternating critic/generator loop.

pub mod losses;
pub mod mask;
pub mod optim;
pub mod step;

pub use losses::{critic_loss, cycle_loss, generator_adv_loss, gradient_penalty, interpolate_samples, CriticLoss};
pub use mask::{
    apply_mask, apply_mask_invocations, make_mask, reset_apply_mask_invocations, Circle, MaskSchedule, MaskShape,
    MaskSpec,
};
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use step::{train_step, Metrics, ModelState, SceneSample, TrainBatch, TrainingSet};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Gradient-penalty coefficient.
    pub lambda: f64,
    pub n_critic: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub iterations: usize,
    pub mask_shape: MaskShape,
    pub mask_floor: f64,
    /// `None` ramps over the first half of `iterations`.
    pub mask_ramp: Option<usize>,
    /// Also mask the real images shown to the critics.
    pub mask_real: bool,
    /// Per-scale weights, smallest scale first.
    pub scale_weights: Vec<f64>,
    pub cycle_weight: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            n_critic: 5,
            adam: AdamConfig::default(),
            batch_size: 8,
            iterations: 5000,
            mask_shape: MaskShape::Circular,
            mask_floor: 0.1,
            mask_ramp: None,
            mask_real: true,
            scale_weights: vec![1.0, 1.0, 1.0],
            cycle_weight: 1.0,
            seed: 0,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, scales: usize) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda >= 0.0) {
            return fail("lambda must be non-negative");
        }
        if self.n_critic == 0 || self.batch_size == 0 {
            return fail("n_critic and batch_size must be at least 1");
        }
        if !(self.adam.lr > 0.0) {
            return fail("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.mask_floor) {
            return fail("mask_floor must lie in [0, 1]");
        }
        if self.scale_weights.len() != scales {
            return Err(Error::Config(format!(
                "{} scale weights for {scales} scales",
                self.scale_weights.len()
            )));
        }
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be at least 1");
        }
        Ok(())
    }

    pub fn mask_schedule(&self) -> MaskSchedule {
        MaskSchedule {
            shape: self.mask_shape,
            floor: self.mask_floor,
            ramp_iterations: self.mask_ramp.unwrap_or(self.iterations / 2),
        }
    }
}
