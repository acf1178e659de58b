//! Encoder-decoder generator with per-scale auxiliary heads, and the
//! scale-specific critics.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    attach_pictogram, dense_fuse, residual_attention, residual_unit_forward, Activation, Bound,
    CensusEntry, Conv2d, DraModule, Linear, ParamSet, ResidualUnit,
};
use crate::rng::Rng;
use crate::tensor::Scalar;

const CRITIC_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub base_width: usize,
    pub scales: usize,
    pub dra_enabled: bool,
    /// Only meaningful with `dra_enabled`; the gate has no parameters.
    pub attention_enabled: bool,
    /// Training-side switch: the generator always builds every head.
    pub multiscale_enabled: bool,
    /// Decoder-side pictogram attachment. The input-side concatenation is
    /// always present.
    pub pictogram_concat_enabled: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            resolution: 80,
            base_width: 32,
            scales: 3,
            dra_enabled: true,
            attention_enabled: true,
            multiscale_enabled: true,
            pictogram_concat_enabled: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.base_width == 0 {
            return Err(Error::Config("scales and base_width must be positive".into()));
        }
        let div = 1usize << (self.scales - 1);
        if self.resolution % div != 0 || self.resolution / div < 4 {
            return Err(Error::Config(format!(
                "resolution {} must be divisible by {div} with a smallest scale of at least 4",
                self.resolution
            )));
        }
        Ok(())
    }

    /// Output resolutions, smallest first.
    pub fn scale_sizes(&self) -> Vec<usize> {
        (0..self.scales)
            .rev()
            .map(|level| self.resolution >> level)
            .collect()
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

#[derive(Debug, Clone)]
struct EncoderLevel {
    down: Conv2d,
    unit: ResidualUnit,
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    level: usize,
    up: Option<Conv2d>,
    unit: ResidualUnit,
    dra: Option<DraModule>,
    head: Conv2d,
}

#[derive(Debug, Clone)]
pub struct Generator<T: Scalar> {
    config: GeneratorConfig,
    pub params: ParamSet<T>,
    encoder: Vec<EncoderLevel>,
    decoder: Vec<DecoderLevel>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(config: GeneratorConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let relu = Activation::Relu;
        let mut encoder = Vec::with_capacity(config.scales);
        for level in 0..config.scales {
            let name = format!("gen.enc{level}");
            let (cin, stride) = if level == 0 { (6, 1) } else { (config.width(level - 1), 2) };
            let cout = config.width(level);
            let down = Conv2d::new(&mut params, rng, &format!("{name}.down"), cin, cout, 3, stride, 1.0);
            let unit = ResidualUnit::new(&mut params, rng, &format!("{name}.res"), cout, relu);
            encoder.push(EncoderLevel { down, unit });
        }

        let extra = if config.pictogram_concat_enabled { 3 } else { 0 };
        let mut decoder = Vec::with_capacity(config.scales);
        for level in (0..config.scales).rev() {
            let name = format!("gen.dec{level}");
            let c = config.width(level);
            let up = (level + 1 < config.scales).then(|| {
                let cin = config.width(level + 1) + extra;
                Conv2d::new(&mut params, rng, &format!("{name}.up"), cin, c, 3, 1, 1.0)
            });
            let unit = ResidualUnit::new(&mut params, rng, &format!("{name}.res"), c, relu);
            let dra = config
                .dra_enabled
                .then(|| DraModule::new(&mut params, rng, &format!("{name}.dra"), c, c));
            // zero heads: an untrained generator emits flat grey instead of
            // leaking the attached pictogram through a random projection
            let head = Conv2d::new(&mut params, rng, &format!("{name}.head"), c + extra, 3, 3, 1, 0.0);
            decoder.push(DecoderLevel {
                level,
                up,
                unit,
                dra,
                head,
            });
        }
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn census(&self) -> Vec<CensusEntry> {
        self.params.census()
    }

    pub fn bind(&self, tape: &Tape<T>) -> Bound<T> {
        self.params.bind(tape)
    }

    /// Redraws the output heads He-normal. Heads start at zero, which hides
    /// everything upstream of them from range and gradient checks.
    pub fn randomize_heads(&mut self, rng: &mut Rng) {
        for dec in &self.decoder {
            let w = self.params.get_mut(dec.head.weight);
            let fan_in = (w.len() / w.shape()[0]) as f64;
            *w = rng.normal_tensor(w.shape(), (2.0 / fan_in).sqrt());
        }
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }

    fn check_input(&self, what: &'static str, v: &Var<T>) -> Result<()> {
        let s = v.shape();
        let r = self.config.resolution;
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            let n = s.first().copied().unwrap_or(1);
            return Err(Error::shape(what, &[n, 3, r, r], &s));
        }
        Ok(())
    }
}

/// Runs the generator on image `x` conditioned on pictogram `p`. Returns one
/// image per scale, smallest first; the last is the full-resolution output.
pub fn generator_forward<T: Scalar>(
    x: &Var<T>,
    p: &Var<T>,
    g: &Generator<T>,
    bound: &Bound<T>,
) -> Result<Vec<Var<T>>> {
    g.check_input("generator_forward", x)?;
    g.check_input("generator_forward", p)?;
    if x.shape()[0] != p.shape()[0] {
        return Err(Error::shape("generator_forward", &x.shape(), &p.shape()));
    }
    let cfg = &g.config;
    let mut skips = Vec::with_capacity(cfg.scales);
    let mut h = x.concat_channels(p)?;
    for enc in &g.encoder {
        h = enc.down.forward(bound, &h)?.relu();
        h = residual_unit_forward(&h, &enc.unit, bound)?;
        skips.push(h.clone());
    }

    let mut outputs = Vec::with_capacity(cfg.scales);
    for dec in &g.decoder {
        if let Some(up) = &dec.up {
            let size = cfg.resolution >> dec.level;
            h = up.forward(bound, &h.resize_bilinear(size, size)?)?.relu();
        }
        h = residual_unit_forward(&h, &dec.unit, bound)?;
        if let Some(dra) = &dec.dra {
            let f_e = &skips[dec.level];
            h = dense_fuse(&h, f_e, dra, bound)?;
            if cfg.attention_enabled {
                h = residual_attention(&h, f_e)?;
            }
        }
        if cfg.pictogram_concat_enabled {
            h = attach_pictogram(&h, p)?;
        }
        outputs.push(dec.head.forward(bound, &h)?.tanh());
    }
    Ok(outputs)
}

/// `G(G(x | p_b) | p_a)` with one parameter binding serving both passes.
/// Returns the inner pass outputs and the full-resolution reconstruction.
pub fn cycle_map_with_forward<T: Scalar>(
    x: &Var<T>,
    p_a: &Var<T>,
    p_b: &Var<T>,
    g: &Generator<T>,
    bound: &Bound<T>,
) -> Result<(Vec<Var<T>>, Var<T>)> {
    let forward = generator_forward(x, p_b, g, bound)?;
    let inner = forward.last().expect("at least one scale");
    let rec = generator_forward(inner, p_a, g, bound)?;
    Ok((forward, rec.last().expect("at least one scale").clone()))
}

pub fn cycle_map<T: Scalar>(
    x: &Var<T>,
    p_a: &Var<T>,
    p_b: &Var<T>,
    g: &Generator<T>,
    bound: &Bound<T>,
) -> Result<Var<T>> {
    Ok(cycle_map_with_forward(x, p_a, p_b, g, bound)?.1)
}

pub fn parameter_census<T: Scalar>(params: &ParamSet<T>) -> Vec<CensusEntry> {
    params.census()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticConfig {
    pub width: usize,
    /// Concatenate the resized target pictogram to the critic input.
    pub conditional: bool,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            width: 32,
            conditional: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Critic<T: Scalar> {
    resolution: usize,
    conditional: bool,
    pub params: ParamSet<T>,
    stem: Conv2d,
    units: Vec<ResidualUnit>,
    head: Linear,
}

impl<T: Scalar> Critic<T> {
    pub fn new(
        resolution: usize,
        residual_units: usize,
        config: &CriticConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        if resolution < 2 || resolution % 2 != 0 || config.width == 0 {
            return Err(Error::Config(format!("invalid critic resolution {resolution}")));
        }
        let name = format!("critic{resolution}");
        let mut params = ParamSet::new();
        let cin = if config.conditional { 6 } else { 3 };
        let w = config.width;
        let stem = Conv2d::new(&mut params, rng, &format!("{name}.stem"), cin, w, 3, 2, 1.0);
        let units = (0..residual_units)
            .map(|i| {
                let act = Activation::LeakyRelu(CRITIC_SLOPE);
                ResidualUnit::new(&mut params, rng, &format!("{name}.res{i}"), w, act)
            })
            .collect();
        let half = resolution / 2;
        let head = Linear::new(&mut params, rng, &format!("{name}.head"), w * half * half, 1);
        Ok(Self {
            resolution,
            conditional: config.conditional,
            params,
            stem,
            units,
            head,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn residual_units(&self) -> usize {
        self.units.len()
    }

    pub fn is_conditional(&self) -> bool {
        self.conditional
    }

    pub fn bind(&self, tape: &Tape<T>) -> Bound<T> {
        self.params.bind(tape)
    }

    /// Scores `y` (`[N,3,S,S]`), returning `[N,1]`. A conditional critic
    /// requires the pictogram `cond` at any resolution.
    pub fn forward(&self, bound: &Bound<T>, y: &Var<T>, cond: Option<&Var<T>>) -> Result<Var<T>> {
        let s = y.shape();
        let r = self.resolution;
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            let n = s.first().copied().unwrap_or(1);
            return Err(Error::shape("critic_forward", &[n, 3, r, r], &s));
        }
        let input = match (self.conditional, cond) {
            (true, Some(p)) => y.concat_channels(&p.resize_bilinear(r, r)?)?,
            (false, None) => y.clone(),
            (true, None) => {
                return Err(Error::invalid("critic_forward", "conditional critic needs a pictogram"))
            }
            (false, Some(_)) => {
                return Err(Error::invalid("critic_forward", "critic is not conditional"))
            }
        };
        let mut h = self.stem.forward(bound, &input)?.leaky_relu(CRITIC_SLOPE);
        for unit in &self.units {
            h = residual_unit_forward(&h, unit, bound)?;
        }
        self.head.forward(bound, &h.flatten()?)
    }

    pub fn cast<U: Scalar>(&self) -> Critic<U> {
        Critic {
            resolution: self.resolution,
            conditional: self.conditional,
            params: self.params.cast(),
            stem: self.stem.clone(),
            units: self.units.clone(),
            head: self.head.clone(),
        }
    }
}

/// One critic per generator output scale, smallest first. The critic at the
/// k-th smallest scale has k+1 residual units.
#[derive(Debug, Clone)]
pub struct CriticStack<T: Scalar> {
    pub critics: Vec<Critic<T>>,
}

impl<T: Scalar> CriticStack<T> {
    pub fn new(gen: &GeneratorConfig, config: &CriticConfig, rng: &mut Rng) -> Result<Self> {
        gen.validate()?;
        let critics = gen
            .scale_sizes()
            .into_iter()
            .enumerate()
            .map(|(k, size)| Critic::new(size, k + 1, config, rng))
            .collect::<Result<_>>()?;
        Ok(Self { critics })
    }

    pub fn scale_index(&self, scale: usize) -> Result<usize> {
        self.critics
            .iter()
            .position(|c| c.resolution == scale)
            .ok_or_else(|| Error::invalid("critic_forward", format!("no critic for scale {scale}")))
    }

    pub fn get(&self, scale: usize) -> Result<&Critic<T>> {
        Ok(&self.critics[self.scale_index(scale)?])
    }

    pub fn cast<U: Scalar>(&self) -> CriticStack<U> {
        CriticStack {
            critics: self.critics.iter().map(Critic::cast).collect(),
        }
    }
}

/// Scores `y` with the critic for `scale`; `bound` must come from that critic.
pub fn critic_forward<T: Scalar>(
    y: &Var<T>,
    cond: Option<&Var<T>>,
    stack: &CriticStack<T>,
    scale: usize,
    bound: &Bound<T>,
) -> Result<Var<T>> {
    stack.get(scale)?.forward(bound, y, cond)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn small_config() -> GeneratorConfig {
        GeneratorConfig {
            resolution: 16,
            base_width: 4,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn rejects_indivisible_resolution() {
        let cfg = GeneratorConfig {
            resolution: 18,
            ..small_config()
        };
        assert!(Generator::<f64>::new(cfg, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn forward_shapes_and_range() {
        let mut g = Generator::<f32>::new(small_config(), &mut Rng::new(1)).unwrap();
        let mut rng = Rng::new(2);
        g.randomize_heads(&mut rng);
        let tape = Tape::new();
        let b = g.bind(&tape);
        let x = tape.constant(rng.uniform_tensor(&[2, 3, 16, 16], -1.0, 1.0));
        let p = tape.constant(rng.uniform_tensor(&[2, 3, 16, 16], -1.0, 1.0));
        let out = generator_forward(&x, &p, &g, &b).unwrap();
        let shapes: Vec<_> = out.iter().map(|o| o.shape()).collect();
        assert_eq!(shapes, vec![vec![2, 3, 4, 4], vec![2, 3, 8, 8], vec![2, 3, 16, 16]]);
        assert!(out.iter().all(|o| o.value().data().iter().all(|v| (-1.0..=1.0).contains(v))));

        let bad = tape.constant(Tensor::zeros(&[2, 3, 8, 8]));
        assert!(generator_forward(&bad, &p, &g, &b).is_err());
    }

    #[test]
    fn toggles_keep_output_shapes() {
        for (dra, picto) in [(false, true), (true, false), (false, false)] {
            let cfg = GeneratorConfig {
                dra_enabled: dra,
                pictogram_concat_enabled: picto,
                multiscale_enabled: false,
                ..small_config()
            };
            let g = Generator::<f32>::new(cfg, &mut Rng::new(1)).unwrap();
            let tape = Tape::new();
            let b = g.bind(&tape);
            let x = tape.constant(Tensor::zeros(&[1, 3, 16, 16]));
            let out = generator_forward(&x, &x, &g, &b).unwrap();
            assert_eq!(out.last().unwrap().shape(), vec![1, 3, 16, 16]);
            assert_eq!(out.len(), 3);
        }
    }

    #[test]
    fn critic_rejects_wrong_scale_and_condition() {
        let stack = CriticStack::<f32>::new(&small_config(), &CriticConfig::default(), &mut Rng::new(3)).unwrap();
        let tape = Tape::new();
        let c = stack.get(8).unwrap();
        let b = c.bind(&tape);
        let y = tape.constant(Tensor::zeros(&[2, 3, 8, 8]));
        let p = tape.constant(Tensor::zeros(&[2, 3, 16, 16]));
        assert_eq!(critic_forward(&y, Some(&p), &stack, 8, &b).unwrap().shape(), vec![2, 1]);
        assert!(critic_forward(&y, None, &stack, 8, &b).is_err());
        assert!(critic_forward(&y, Some(&p), &stack, 16, &b).is_err());
        assert!(stack.get(12).is_err());
    }
}
