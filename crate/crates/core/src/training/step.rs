//! Batch sampling and one training iteration.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::losses::{critic_loss, cycle_loss, generator_adv_loss};
use super::mask::{apply_mask, make_mask, Circle, MaskSchedule, MaskShape};
use super::optim::{adam_step, OptimizerState};
use super::TrainConfig;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{cycle_map_with_forward, generator_forward, CriticConfig, CriticStack, Generator, GeneratorConfig};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// One real scene at training resolution.
#[derive(Debug, Clone)]
pub struct SceneSample<T: Scalar> {
    pub image: Tensor<T>,
    pub class_id: u32,
    pub category: usize,
    pub circle: Circle,
}

/// In-memory scenes plus one pictogram per class, all at one resolution.
#[derive(Debug, Clone)]
pub struct TrainingSet<T: Scalar> {
    resolution: usize,
    samples: Vec<SceneSample<T>>,
    pictograms: BTreeMap<u32, Tensor<T>>,
    by_class: BTreeMap<u32, Vec<usize>>,
    classes_by_category: BTreeMap<usize, Vec<u32>>,
}

impl<T: Scalar> TrainingSet<T> {
    pub fn new(resolution: usize, samples: Vec<SceneSample<T>>, pictograms: BTreeMap<u32, Tensor<T>>) -> Result<Self> {
        let expect = [3, resolution, resolution];
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let mut classes_by_category: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if s.image.shape() != expect {
                return Err(Error::shape("TrainingSet", &expect, s.image.shape()));
            }
            let p = pictograms
                .get(&s.class_id)
                .ok_or_else(|| Error::invalid("TrainingSet", format!("no pictogram for class {}", s.class_id)))?;
            if p.shape() != expect {
                return Err(Error::shape("TrainingSet", &expect, p.shape()));
            }
            by_class.entry(s.class_id).or_default().push(i);
            let classes = classes_by_category.entry(s.category).or_default();
            if !classes.contains(&s.class_id) {
                classes.push(s.class_id);
            }
        }
        if samples.is_empty() {
            return Err(Error::invalid("TrainingSet", "no samples"));
        }
        for (cat, classes) in &mut classes_by_category {
            classes.sort_unstable();
            if classes.len() < 2 {
                return Err(Error::invalid(
                    "TrainingSet",
                    format!("category {cat} needs at least two classes for transfer"),
                ));
            }
        }
        Ok(Self {
            resolution,
            samples,
            pictograms,
            by_class,
            classes_by_category,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn samples(&self) -> &[SceneSample<T>] {
        &self.samples
    }

    pub fn pictograms(&self) -> &BTreeMap<u32, Tensor<T>> {
        &self.pictograms
    }

    pub fn pictogram(&self, class_id: u32) -> Option<&Tensor<T>> {
        self.pictograms.get(&class_id)
    }

    /// Classes sharing `class_id`'s category, in ascending order.
    pub fn category_classes(&self, category: usize) -> &[u32] {
        self.classes_by_category.get(&category).map_or(&[], Vec::as_slice)
    }

    /// Draws `n` source scenes, a different target class from the same
    /// category for each, and a real scene of every target class.
    pub fn sample_batch(&self, n: usize, rng: &mut Rng) -> TrainBatch<T> {
        let mut x = Vec::with_capacity(n);
        let mut p_a = Vec::with_capacity(n);
        let mut p_b = Vec::with_capacity(n);
        let mut real = Vec::with_capacity(n);
        let mut x_circles = Vec::with_capacity(n);
        let mut real_circles = Vec::with_capacity(n);
        for _ in 0..n {
            let src = &self.samples[rng.below(self.samples.len())];
            let others: Vec<u32> = self.classes_by_category[&src.category]
                .iter()
                .copied()
                .filter(|&c| c != src.class_id)
                .collect();
            let b = others[rng.below(others.len())];
            let pool = &self.by_class[&b];
            let tgt = &self.samples[pool[rng.below(pool.len())]];
            x.push(src.image.clone());
            p_a.push(self.pictograms[&src.class_id].clone());
            p_b.push(self.pictograms[&b].clone());
            real.push(tgt.image.clone());
            x_circles.push(src.circle);
            real_circles.push(tgt.circle);
        }
        let stack = |v: Vec<Tensor<T>>| Tensor::stack(&v).expect("uniform shapes");
        TrainBatch {
            x: stack(x),
            p_a: stack(p_a),
            p_b: stack(p_b),
            real: stack(real),
            x_circles,
            real_circles,
        }
    }
}

/// Source scenes `x` of class a with pictograms `p_a`, target pictograms
/// `p_b`, and real scenes of the target classes.
#[derive(Debug, Clone)]
pub struct TrainBatch<T: Scalar> {
    pub x: Tensor<T>,
    pub p_a: Tensor<T>,
    pub p_b: Tensor<T>,
    pub real: Tensor<T>,
    pub x_circles: Vec<Circle>,
    pub real_circles: Vec<Circle>,
}

/// Generator, critics and their optimizer states.
#[derive(Debug, Clone)]
pub struct ModelState<T: Scalar> {
    pub generator: Generator<T>,
    pub critics: CriticStack<T>,
    pub generator_opt: OptimizerState<T>,
    pub critic_opts: Vec<OptimizerState<T>>,
}

impl<T: Scalar> ModelState<T> {
    pub fn new(gen: GeneratorConfig, critic: &CriticConfig, rng: &mut Rng) -> Result<Self> {
        let generator = Generator::new(gen, rng)?;
        let critics = CriticStack::new(generator.config(), critic, rng)?;
        Ok(Self {
            generator_opt: OptimizerState::new(&generator.params),
            critic_opts: critics.critics.iter().map(|c| OptimizerState::new(&c.params)).collect(),
            generator,
            critics,
        })
    }
}

/// Per-iteration record. Per-scale slots are ordered 20, 40, 80; with fewer
/// scales the largest always occupies the last slot and unused or inactive
/// slots hold 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub iteration: usize,
    pub d_loss: [f64; 3],
    pub gp: [f64; 3],
    pub g_adv: f64,
    pub g_cyc: f64,
    pub w_estimate: f64,
}

impl Metrics {
    pub const FIELDS: [&'static str; 10] = [
        "iteration",
        "d_loss_20",
        "d_loss_40",
        "d_loss_80",
        "gp_20",
        "gp_40",
        "gp_80",
        "g_adv",
        "g_cyc",
        "w_estimate",
    ];

    pub fn values(&self) -> [f64; 9] {
        let [d0, d1, d2] = self.d_loss;
        let [g0, g1, g2] = self.gp;
        [d0, d1, d2, g0, g1, g2, self.g_adv, self.g_cyc, self.w_estimate]
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    /// `iteration d_loss_20 ... w_estimate`, space separated.
    pub fn log_line(&self) -> String {
        let mut s = self.iteration.to_string();
        for v in self.values() {
            write!(s, " {v}").unwrap();
        }
        s
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != Self::FIELDS.len() {
            return Err(Error::invalid("Metrics::parse_line", format!("expected 10 fields, got {}", parts.len())));
        }
        let iteration = parts[0]
            .parse()
            .map_err(|_| Error::invalid("Metrics::parse_line", format!("bad iteration {:?}", parts[0])))?;
        let mut v = [0.0; 9];
        for (slot, text) in v.iter_mut().zip(&parts[1..]) {
            *slot = text
                .parse()
                .map_err(|_| Error::invalid("Metrics::parse_line", format!("bad number {text:?}")))?;
        }
        Ok(Self {
            iteration,
            d_loss: [v[0], v[1], v[2]],
            gp: [v[3], v[4], v[5]],
            g_adv: v[6],
            g_cyc: v[7],
            w_estimate: v[8],
        })
    }
}

fn batch_masks<T: Scalar>(
    schedule: &MaskSchedule,
    circles: &[Circle],
    iteration: usize,
    from: usize,
    size: usize,
) -> Result<Tensor<T>> {
    let masks = circles
        .iter()
        .map(|c| {
            let m = make_mask::<T>(&schedule.spec(c.rescaled(from, size)), iteration, size, size)?;
            m.reshape(&[1, size, size])
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&masks)
}

fn resized<T: Scalar>(tape: &Tape<T>, t: &Tensor<T>, size: usize) -> Result<Var<T>> {
    tape.constant(t.clone()).resize_bilinear(size, size)
}

fn fingerprint<T: Scalar>(params: &crate::nn::ParamSet<T>) -> u64 {
    use std::hash::{DefaultHasher, Hash, Hasher};
    let mut h = DefaultHasher::new();
    for e in params.entries() {
        for v in e.value.data() {
            v.as_f64().to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// `n_critic` critic updates followed by one generator update. Each update
/// draws its own batch from `data`; `rng` also supplies the interpolation
/// weights.
pub fn train_step<T: Scalar>(
    models: &mut ModelState<T>,
    data: &TrainingSet<T>,
    config: &TrainConfig,
    iteration: usize,
    rng: &mut Rng,
) -> Result<Metrics> {
    let gcfg = models.generator.config().clone();
    config.validate(gcfg.scales)?;
    let res = gcfg.resolution;
    if data.resolution() != res {
        return Err(Error::invalid(
            "train_step",
            format!("data at {}px, generator at {res}px", data.resolution()),
        ));
    }
    let sizes = gcfg.scale_sizes();
    let last = sizes.len() - 1;
    let active: Vec<usize> = if gcfg.multiscale_enabled { (0..sizes.len()).collect() } else { vec![last] };
    let slot = |k: usize| 3 + k - sizes.len();
    let schedule = config.mask_schedule();
    let masking = schedule.shape != MaskShape::None;
    let n = config.batch_size;

    let mut metrics = Metrics {
        iteration,
        d_loss: [0.0; 3],
        gp: [0.0; 3],
        g_adv: 0.0,
        g_cyc: 0.0,
        w_estimate: 0.0,
    };

    let gen_hash = cfg!(debug_assertions).then(|| fingerprint(&models.generator.params));
    for _ in 0..config.n_critic {
        let batch = data.sample_batch(n, rng);
        let fakes: Vec<Tensor<T>> = {
            let tape = Tape::new();
            let gb = models.generator.params.bind_frozen(&tape);
            let x = tape.constant(batch.x.clone());
            let p = tape.constant(batch.p_b.clone());
            generator_forward(&x, &p, &models.generator, &gb)?
                .iter()
                .map(|v| (*v.value()).clone())
                .collect()
        };
        for &k in &active {
            let size = sizes[k];
            let eps = rng.uniform_tensor::<T>(&[n], 0.0, 1.0);
            let tape = Tape::new();
            let critic = &models.critics.critics[k];
            let cb = critic.bind(&tape);
            let mut real = resized(&tape, &batch.real, size)?;
            let mut fake = tape.constant(fakes[k].clone());
            if masking {
                fake = apply_mask(&fake, &batch_masks(&schedule, &batch.x_circles, iteration, res, size)?)?;
                if config.mask_real {
                    real = apply_mask(&real, &batch_masks(&schedule, &batch.real_circles, iteration, res, size)?)?;
                }
            }
            let cond = tape.constant(batch.p_b.clone());
            let loss = critic_loss(|v| critic.forward(&cb, v, Some(&cond)), &real, &fake, config.lambda, &eps)?;
            let value = loss.loss.value().item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("critic loss at scale {size}, iteration {iteration}"),
                });
            }
            let grads = cb.gradients(&tape.backward(&loss.loss)?);
            let critic = &mut models.critics.critics[k];
            adam_step(&mut critic.params, &grads, &mut models.critic_opts[k], &config.adam)?;
            metrics.d_loss[slot(k)] = value;
            metrics.gp[slot(k)] = loss.penalty.value().item().as_f64();
        }
    }
    if let Some(h) = gen_hash {
        debug_assert_eq!(h, fingerprint(&models.generator.params), "critic step touched the generator");
    }

    let critic_hashes: Option<Vec<u64>> =
        cfg!(debug_assertions).then(|| models.critics.critics.iter().map(|c| fingerprint(&c.params)).collect());
    let batch = data.sample_batch(n, rng);
    let tape = Tape::new();
    let gb = models.generator.bind(&tape);
    let x = tape.constant(batch.x.clone());
    let p_a = tape.constant(batch.p_a.clone());
    let p_b = tape.constant(batch.p_b.clone());
    let (forward, rec) = cycle_map_with_forward(&x, &p_a, &p_b, &models.generator, &gb)?;
    let mut total: Option<Var<T>> = None;
    let mut accumulate = |term: Var<T>| -> Result<()> {
        total = Some(match total.take() {
            Some(t) => t.add(&term)?,
            None => term,
        });
        Ok(())
    };
    for &k in &active {
        let size = sizes[k];
        let w = config.scale_weights[k];
        let critic = &models.critics.critics[k];
        let cb = critic.params.bind_frozen(&tape);
        let mut fake = forward[k].clone();
        if masking {
            fake = apply_mask(&fake, &batch_masks(&schedule, &batch.x_circles, iteration, res, size)?)?;
        }
        let adv = generator_adv_loss(|v| critic.forward(&cb, v, Some(&p_b)), &fake)?;
        let (xs, rs) = if size == res {
            (x.clone(), rec.clone())
        } else {
            (x.resize_bilinear(size, size)?, rec.resize_bilinear(size, size)?)
        };
        let cyc = cycle_loss(&xs, &rs)?;
        metrics.g_adv += w * adv.value().item().as_f64();
        metrics.g_cyc += w * cyc.value().item().as_f64();
        accumulate(adv.scale(w))?;
        accumulate(cyc.scale(w * config.cycle_weight))?;
    }
    let total = total.expect("at least one active scale");
    if !total.value().item().as_f64().is_finite() {
        return Err(Error::NonFinite {
            what: format!("generator loss at iteration {iteration}"),
        });
    }
    let grads = gb.gradients(&tape.backward(&total)?);
    adam_step(&mut models.generator.params, &grads, &mut models.generator_opt, &config.adam)?;
    if let Some(hs) = critic_hashes {
        for (h, c) in hs.iter().zip(&models.critics.critics) {
            debug_assert_eq!(*h, fingerprint(&c.params), "generator step touched a critic");
        }
    }

    metrics.w_estimate = -metrics.d_loss.iter().sum::<f64>();
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn random_set(res: usize, classes: u32, per_class: usize, seed: u64) -> TrainingSet<f32> {
        let mut rng = Rng::new(seed);
        let mut samples = Vec::new();
        let mut pictograms = BTreeMap::new();
        for c in 0..classes {
            pictograms.insert(c, rng.uniform_tensor(&[3, res, res], -1.0, 1.0));
            for _ in 0..per_class {
                samples.push(SceneSample {
                    image: rng.uniform_tensor(&[3, res, res], -1.0, 1.0),
                    class_id: c,
                    category: 0,
                    circle: Circle {
                        cx: res as f64 / 2.0,
                        cy: res as f64 / 2.0,
                        r: res as f64 / 4.0,
                    },
                });
            }
        }
        TrainingSet::new(res, samples, pictograms).unwrap()
    }

    fn tiny() -> (GeneratorConfig, CriticConfig, TrainConfig) {
        let g = GeneratorConfig {
            resolution: 16,
            base_width: 4,
            ..GeneratorConfig::default()
        };
        let c = CriticConfig {
            width: 4,
            conditional: true,
        };
        let t = TrainConfig {
            batch_size: 2,
            n_critic: 2,
            iterations: 10,
            ..TrainConfig::default()
        };
        (g, c, t)
    }

    fn run(iters: usize) -> Vec<Metrics> {
        let (g, c, t) = tiny();
        let data = random_set(16, 3, 2, 9);
        let mut rng = Rng::new(1);
        let mut models = ModelState::<f32>::new(g, &c, &mut rng).unwrap();
        (0..iters)
            .map(|i| train_step(&mut models, &data, &t, i, &mut rng).unwrap())
            .collect()
    }

    #[test]
    fn steps_are_finite_and_deterministic() {
        let a = run(4);
        assert!(a.iter().all(|m| m.all_finite() && m.gp.iter().all(|&g| g >= 0.0)));
        assert_eq!(a, run(4));
    }

    #[test]
    fn metrics_line_round_trips() {
        let m = run(1)[0];
        let line = m.log_line();
        assert_eq!(line.split(' ').count(), Metrics::FIELDS.len());
        assert_eq!(Metrics::parse_line(&line).unwrap(), m);
        assert!(Metrics::parse_line("1 2 3").is_err());
    }

    #[test]
    fn single_scale_training_leaves_small_slots_empty() {
        let (mut g, c, t) = tiny();
        g.multiscale_enabled = false;
        let data = random_set(16, 2, 2, 3);
        let mut rng = Rng::new(2);
        let mut models = ModelState::<f32>::new(g, &c, &mut rng).unwrap();
        let before = models.critics.critics[0].params.clone();
        let m = train_step(&mut models, &data, &t, 0, &mut rng).unwrap();
        assert_eq!(m.d_loss[..2], [0.0, 0.0]);
        assert_ne!(m.d_loss[2], 0.0);
        assert_eq!(models.critics.critics[0].params, before);
    }
}
