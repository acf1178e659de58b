//! Plain-text `key = value` run configuration.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::models::{CriticConfig, GeneratorConfig};
use crate::training::{MaskShape, TrainConfig};

/// Everything needed to rebuild a training run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub critic: CriticConfig,
    pub train: TrainConfig,
}

/// Component switched off by `--ablate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    None,
    Dra,
    Multiscale,
    Mask,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "dra" => Ok(Ablation::Dra),
            "multiscale" => Ok(Ablation::Multiscale),
            "mask" => Ok(Ablation::Mask),
            other => Err(Error::Config(format!("unknown ablation {other:?} (dra, multiscale, mask, none)"))),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    pub fn ablate(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::None => {}
            Ablation::Dra => self.generator.dra_enabled = false,
            Ablation::Multiscale => self.generator.multiscale_enabled = false,
            Ablation::Mask => self.train.mask_shape = MaskShape::None,
        }
    }

    /// Sets one field by name. `scale_weights` takes a comma list and
    /// `mask_ramp` accepts `auto`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (g, c, t) = (&mut self.generator, &mut self.critic, &mut self.train);
        match key {
            "resolution" => g.resolution = parse(key, value)?,
            "base_width" => g.base_width = parse(key, value)?,
            "scales" => g.scales = parse(key, value)?,
            "dra_enabled" => g.dra_enabled = parse(key, value)?,
            "attention_enabled" => g.attention_enabled = parse(key, value)?,
            "multiscale_enabled" => g.multiscale_enabled = parse(key, value)?,
            "pictogram_concat_enabled" => g.pictogram_concat_enabled = parse(key, value)?,
            "critic_width" => c.width = parse(key, value)?,
            "critic_conditional" => c.conditional = parse(key, value)?,
            "lambda" => t.lambda = parse(key, value)?,
            "n_critic" => t.n_critic = parse(key, value)?,
            "lr" => t.adam.lr = parse(key, value)?,
            "beta1" => t.adam.beta1 = parse(key, value)?,
            "beta2" => t.adam.beta2 = parse(key, value)?,
            "adam_eps" => t.adam.eps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "iterations" => t.iterations = parse(key, value)?,
            "mask_shape" => t.mask_shape = value.parse()?,
            "mask_floor" => t.mask_floor = parse(key, value)?,
            "mask_ramp" => t.mask_ramp = if value == "auto" { None } else { Some(parse(key, value)?) },
            "mask_real" => t.mask_real = parse(key, value)?,
            "scale_weights" => {
                t.scale_weights = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "cycle_weight" => t.cycle_weight = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", k + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", k + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let (g, c, t) = (&self.generator, &self.critic, &self.train);
        let weights: Vec<String> = t.scale_weights.iter().map(f64::to_string).collect();
        let ramp = t.mask_ramp.map_or("auto".to_string(), |r| r.to_string());
        let mut s = String::new();
        let pairs: [(&str, String); 25] = [
            ("resolution", g.resolution.to_string()),
            ("base_width", g.base_width.to_string()),
            ("scales", g.scales.to_string()),
            ("dra_enabled", g.dra_enabled.to_string()),
            ("attention_enabled", g.attention_enabled.to_string()),
            ("multiscale_enabled", g.multiscale_enabled.to_string()),
            ("pictogram_concat_enabled", g.pictogram_concat_enabled.to_string()),
            ("critic_width", c.width.to_string()),
            ("critic_conditional", c.conditional.to_string()),
            ("lambda", t.lambda.to_string()),
            ("n_critic", t.n_critic.to_string()),
            ("lr", t.adam.lr.to_string()),
            ("beta1", t.adam.beta1.to_string()),
            ("beta2", t.adam.beta2.to_string()),
            ("adam_eps", t.adam.eps.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("iterations", t.iterations.to_string()),
            ("mask_shape", t.mask_shape.to_string()),
            ("mask_floor", t.mask_floor.to_string()),
            ("mask_ramp", ramp),
            ("mask_real", t.mask_real.to_string()),
            ("scale_weights", weights.join(",")),
            ("cycle_weight", t.cycle_weight.to_string()),
            ("seed", t.seed.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
        ];
        for (k, v) in pairs {
            writeln!(s, "{k} = {v}").expect("write to string");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate(self.generator.scales)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.generator.base_width = 12;
        c.train.mask_ramp = Some(250);
        c.train.scale_weights = vec![0.5, 1.0, 2.0];
        c.ablate(Ablation::Mask);
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn ablations_toggle_one_field() {
        let base = RunConfig::default();
        let ablated = |a: Ablation| {
            let mut c = base.clone();
            c.ablate(a);
            c
        };
        assert!(!ablated(Ablation::Dra).generator.dra_enabled);
        assert!(!ablated(Ablation::Multiscale).generator.multiscale_enabled);
        assert_eq!(ablated(Ablation::Mask).train.mask_shape, MaskShape::None);
        assert_eq!(ablated(Ablation::None), base);
        assert!("bogus".parse::<Ablation>().is_err());
    }

    #[test]
    fn errors_name_the_line() {
        let err = RunConfig::from_text("# comment\nbase_width = 8\nlambda = ten\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert!(RunConfig::from_text("nonsense = 1").is_err());
        assert!(RunConfig::from_text("no equals sign").is_err());
    }
}
