//! Background preservation, class-transfer accuracy and contact sheets.

use std::collections::BTreeMap;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::models::{generator_forward, Generator};
use crate::nn::{Bound, Conv2d, Linear, ParamSet};
use crate::rng::Rng;
use crate::synthdata::GLYPH_COUNT;
use crate::tensor::{Scalar, Tensor};
use crate::training::{adam_step, AdamConfig, Circle, OptimizerState, SceneSample};

/// Held-out accuracy below which transfer scores are refused.
pub const CLASSIFIER_FLOOR: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    /// Zero error outside the circle.
    Identical,
    Db(f64),
}

impl std::fmt::Display for Psnr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Psnr::Identical => f.write_str("identical"),
            Psnr::Db(v) => write!(f, "{v:.2} dB"),
        }
    }
}

/// PSNR with peak 2 over pixels strictly outside `circle`, all channels.
pub fn background_psnr<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, circle: Circle) -> Result<Psnr> {
    if x.shape() != y.shape() {
        return Err(Error::shape("background_psnr", x.shape(), y.shape()));
    }
    let &[c, h, w] = x.shape() else {
        return Err(Error::invalid("background_psnr", format!("expected [C, H, W], got {:?}", x.shape())));
    };
    let Circle { cx, cy, r } = circle;
    if !(0.0..=(w as f64 - 1.0)).contains(&cx) || !(0.0..=(h as f64 - 1.0)).contains(&cy) || !(r > 0.0) {
        return Err(Error::invalid("background_psnr", format!("circle {circle:?} outside the {w}x{h} frame")));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..h {
        for j in 0..w {
            if (j as f64 - cx).powi(2) + (i as f64 - cy).powi(2) <= r * r {
                continue;
            }
            for ch in 0..c {
                let k = (ch * h + i) * w + j;
                sum += (x.data()[k].as_f64() - y.data()[k].as_f64()).powi(2);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::invalid("background_psnr", "circle covers the whole frame"));
    }
    let mse = sum / count as f64;
    Ok(if mse == 0.0 {
        Psnr::Identical
    } else {
        Psnr::Db(10.0 * (4.0 / mse).log10())
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Two 3x3 convolutions with ReLU, each followed by 2x2 average pooling, and
/// a fully-connected layer over the flattened features.
#[derive(Debug, Clone)]
pub struct ReferenceClassifier {
    resolution: usize,
    classes: Vec<u32>,
    params: ParamSet<f32>,
    conv1: Conv2d,
    conv2: Conv2d,
    fc: Linear,
    held_out_accuracy: f64,
}

/// Labelled image `[3, R, R]`.
pub type Labelled = (Tensor<f32>, u32);

fn stack_images(items: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let owned: Vec<Tensor<f32>> = items.iter().map(|t| (*t).clone()).collect();
    Tensor::stack(&owned)
}

impl ReferenceClassifier {
    /// Trains on `train` and scores `held_out`. Both must be non-empty and
    /// share one resolution.
    pub fn train(train: &[Labelled], held_out: &[Labelled], config: &ClassifierConfig) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| Error::invalid("ReferenceClassifier", "empty training set"))?;
        if held_out.is_empty() {
            return Err(Error::invalid("ReferenceClassifier", "empty held-out set"));
        }
        let res = first.0.shape()[1];
        if res % 4 != 0 {
            return Err(Error::invalid("ReferenceClassifier", format!("resolution {res} not divisible by 4")));
        }
        for (img, _) in train.iter().chain(held_out) {
            if img.shape() != [3, res, res] {
                return Err(Error::shape("ReferenceClassifier", &[3, res, res], img.shape()));
            }
        }
        let mut classes: Vec<u32> = train.iter().map(|(_, c)| *c).collect();
        classes.sort_unstable();
        classes.dedup();
        let mut rng = Rng::with_stream(config.seed, 7);
        let mut params = ParamSet::new();
        let conv1 = Conv2d::new(&mut params, &mut rng, "cls.conv1", 3, 16, 3, 1, 1.0);
        let conv2 = Conv2d::new(&mut params, &mut rng, "cls.conv2", 16, 32, 3, 1, 1.0);
        let fc = Linear::new(&mut params, &mut rng, "cls.fc", 32 * (res / 4) * (res / 4), classes.len());
        let mut model = Self {
            resolution: res,
            classes,
            params,
            conv1,
            conv2,
            fc,
            held_out_accuracy: 0.0,
        };
        let adam = AdamConfig {
            lr: config.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut opt = OptimizerState::new(&model.params);
        let mut order: Vec<usize> = (0..train.len()).collect();
        for _ in 0..config.epochs {
            for i in (1..order.len()).rev() {
                order.swap(i, rng.below(i + 1));
            }
            for chunk in order.chunks(config.batch_size.max(1)) {
                let images: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &train[i].0).collect();
                let labels: Vec<usize> = chunk.iter().map(|&i| model.label_index(train[i].1)).collect();
                let tape = Tape::new();
                let bound = model.params.bind(&tape);
                let x = tape.constant(stack_images(&images)?);
                let loss = model.forward(&bound, &x)?.softmax_cross_entropy(&labels)?;
                let grads = bound.gradients(&tape.backward(&loss)?);
                adam_step(&mut model.params, &grads, &mut opt, &adam)?;
            }
        }
        model.held_out_accuracy = model.accuracy(held_out)?;
        Ok(model)
    }

    fn label_index(&self, class: u32) -> usize {
        self.classes.binary_search(&class).expect("class seen in training")
    }

    fn forward(&self, b: &Bound<f32>, x: &crate::autodiff::Var<f32>) -> Result<crate::autodiff::Var<f32>> {
        let h = self.conv1.forward(b, x)?.relu().avg_pool2()?;
        let h = self.conv2.forward(b, &h)?.relu().avg_pool2()?.flatten()?;
        self.fc.forward(b, &h)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn held_out_accuracy(&self) -> f64 {
        self.held_out_accuracy
    }

    /// Predicted class ids for a `[N, 3, R, R]` batch.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Vec<u32>> {
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let logits = self.forward(&bound, &tape.constant(images.clone()))?.value();
        let k = self.classes.len();
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                self.classes[best]
            })
            .collect())
    }

    pub fn accuracy(&self, samples: &[Labelled]) -> Result<f64> {
        let mut correct = 0usize;
        for chunk in samples.chunks(64) {
            let images: Vec<&Tensor<f32>> = chunk.iter().map(|(t, _)| t).collect();
            let pred = self.predict(&stack_images(&images)?)?;
            correct += pred.iter().zip(chunk).filter(|(p, (_, c))| *p == c).count();
        }
        Ok(correct as f64 / samples.len().max(1) as f64)
    }

    /// Refuses use below [`CLASSIFIER_FLOOR`].
    pub fn ensure_usable(&self) -> Result<()> {
        if self.held_out_accuracy < CLASSIFIER_FLOOR {
            return Err(Error::Eval(format!(
                "reference classifier held-out accuracy {:.3} is below the {CLASSIFIER_FLOOR} floor",
                self.held_out_accuracy
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassAccuracy {
    pub correct: usize,
    pub total: usize,
}

impl ClassAccuracy {
    pub fn fraction(&self) -> f64 {
        self.correct as f64 / self.total.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub transfer_accuracy: f64,
    /// Keyed by target class.
    pub per_class: BTreeMap<u32, ClassAccuracy>,
    /// Mean background PSNR over samples that differ outside the circle;
    /// `None` when every sample is identical there.
    pub psnr_db: Option<f64>,
    pub identical_backgrounds: usize,
}

impl EvalReport {
    /// Scores `(target, predicted)` pairs together with per-sample PSNRs.
    pub fn from_predictions(pairs: &[(u32, u32)], psnrs: &[Psnr]) -> Self {
        let mut per_class: BTreeMap<u32, ClassAccuracy> = BTreeMap::new();
        for &(target, pred) in pairs {
            let e = per_class.entry(target).or_default();
            e.total += 1;
            e.correct += usize::from(target == pred);
        }
        let correct: usize = per_class.values().map(|c| c.correct).sum();
        let db: Vec<f64> = psnrs
            .iter()
            .filter_map(|p| match p {
                Psnr::Db(v) => Some(*v),
                Psnr::Identical => None,
            })
            .collect();
        Self {
            samples: pairs.len(),
            transfer_accuracy: correct as f64 / pairs.len().max(1) as f64,
            per_class,
            psnr_db: (!db.is_empty()).then(|| db.iter().sum::<f64>() / db.len() as f64),
            identical_backgrounds: psnrs.len() - db.len(),
        }
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "samples {}\ntransfer_accuracy {:.4}\nbackground_psnr {}\n",
            self.samples,
            self.transfer_accuracy,
            match self.psnr_db {
                Some(v) => format!("{v:.2} dB ({} identical)", self.identical_backgrounds),
                None => "identical".to_string(),
            }
        );
        for (class, acc) in &self.per_class {
            s.push_str(&format!("class {class} {:.4} ({}/{})\n", acc.fraction(), acc.correct, acc.total));
        }
        s
    }
}

/// A different class of the same category, uniformly among `classes`.
pub fn pick_target(source: u32, classes: &[u32], rng: &mut Rng) -> Result<u32> {
    let options: Vec<u32> = classes
        .iter()
        .copied()
        .filter(|&c| c != source && c / GLYPH_COUNT == source / GLYPH_COUNT)
        .collect();
    if options.is_empty() {
        return Err(Error::Eval(format!("no other class shares class {source}'s category")));
    }
    Ok(options[rng.below(options.len())])
}

/// Largest-scale generator output for one `[3,R,R]` scene and pictogram. No
/// mask is involved.
pub fn generate_one(generator: &Generator<f32>, x: &Tensor<f32>, pictogram: &Tensor<f32>) -> Result<Tensor<f32>> {
    let batch = generate_batch(generator, &[x], &[pictogram])?;
    Ok(batch.unstack(0))
}

/// Largest-scale outputs for paired scenes and pictograms, `[N,3,R,R]`.
pub fn generate_batch(generator: &Generator<f32>, xs: &[&Tensor<f32>], ps: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let tape = Tape::new();
    let bound = generator.params.bind_frozen(&tape);
    let x = tape.constant(stack_images(xs)?);
    let p = tape.constant(stack_images(ps)?);
    let outs = generator_forward(&x, &p, generator, &bound)?;
    let y = outs.last().expect("at least one scale").value();
    Ok((*y).clone())
}

/// For every held-out scene of class a, translates to a random target class
/// b of the same category and checks the classifier reads b. Sample `i`
/// draws its target from stream `i` of `seed`.
pub fn evaluate_transfer(
    generator: &Generator<f32>,
    held_out: &[SceneSample<f32>],
    pictograms: &BTreeMap<u32, Tensor<f32>>,
    classifier: &ReferenceClassifier,
    seed: u64,
) -> Result<EvalReport> {
    classifier.ensure_usable()?;
    if held_out.is_empty() {
        return Err(Error::Eval("no held-out scenes".into()));
    }
    let res = generator.config().resolution;
    if classifier.resolution() != res {
        return Err(Error::Eval(format!(
            "classifier at {}px, generator at {res}px",
            classifier.resolution()
        )));
    }
    let targets = held_out
        .iter()
        .enumerate()
        .map(|(i, s)| pick_target(s.class_id, classifier.classes(), &mut Rng::with_stream(seed, i as u64)))
        .collect::<Result<Vec<u32>>>()?;
    let mut pairs = Vec::with_capacity(held_out.len());
    let mut psnrs = Vec::with_capacity(held_out.len());
    for (chunk, tchunk) in held_out.chunks(16).zip(targets.chunks(16)) {
        let xs: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
        let ps = tchunk
            .iter()
            .map(|b| pictograms.get(b).ok_or_else(|| Error::Eval(format!("no pictogram for class {b}"))))
            .collect::<Result<Vec<_>>>()?;
        let ys = generate_batch(generator, &xs, &ps)?;
        let pred = classifier.predict(&ys)?;
        for (k, s) in chunk.iter().enumerate() {
            pairs.push((tchunk[k], pred[k]));
            psnrs.push(background_psnr(&s.image, &ys.unstack(k), s.circle)?);
        }
    }
    Ok(EvalReport::from_predictions(&pairs, &psnrs))
}

/// Two-sided 95% normal-approximation interval of a binomial proportion.
pub fn binomial_interval(p: f64, n: usize) -> (f64, f64) {
    let half = 1.96 * (p * (1.0 - p) / n as f64).sqrt();
    (p - half, p + half)
}

/// Contact sheet of `(input, pictogram, output)` triplets, `rows` by `cols`
/// triplets, each tile `[3, R, R]`. Result is `[3, rows*R, cols*3*R]`.
pub fn contact_sheet<T: Scalar>(triplets: &[[Tensor<T>; 3]], rows: usize, cols: usize) -> Result<Tensor<T>> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("contact_sheet", "rows and cols must be positive"));
    }
    if triplets.len() < rows * cols {
        return Err(Error::invalid(
            "contact_sheet",
            format!("{} triplets for a {rows}x{cols} grid", triplets.len()),
        ));
    }
    let tile = triplets[0][0].shape().to_vec();
    let &[3, th, tw] = tile.as_slice() else {
        return Err(Error::invalid("contact_sheet", format!("tiles must be [3, H, W], got {tile:?}")));
    };
    let (h, w) = (rows * th, cols * 3 * tw);
    let mut out = Tensor::zeros(&[3, h, w]);
    for (idx, triplet) in triplets.iter().take(rows * cols).enumerate() {
        let (row, col) = (idx / cols, idx % cols);
        for (k, img) in triplet.iter().enumerate() {
            if img.shape() != tile.as_slice() {
                return Err(Error::shape("contact_sheet", &tile, img.shape()));
            }
            let (y0, x0) = (row * th, (col * 3 + k) * tw);
            for c in 0..3 {
                for i in 0..th {
                    let src = &img.data()[(c * th + i) * tw..][..tw];
                    let start = (c * h + y0 + i) * w + x0;
                    out.data_mut()[start..start + tw].copy_from_slice(src);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle() -> Circle {
        Circle {
            cx: 10.0,
            cy: 9.0,
            r: 5.0,
        }
    }

    #[test]
    fn psnr_examples() {
        let x = Rng::new(1).uniform_tensor::<f64>(&[3, 20, 20], -0.5, 0.5);
        assert_eq!(background_psnr(&x, &x, circle()).unwrap(), Psnr::Identical);
        let shifted = x.map(|v| v + 0.2);
        match background_psnr(&x, &shifted, circle()).unwrap() {
            Psnr::Db(db) => assert!((db - 20.0).abs() < 1e-9, "{db}"),
            other => panic!("{other:?}"),
        }
        let mut inside = x.clone();
        for c in 0..3 {
            inside.data_mut()[(c * 20 + 9) * 20 + 10] = 0.9;
        }
        assert_eq!(background_psnr(&x, &inside, circle()).unwrap(), Psnr::Identical);
        let huge = Circle { r: 100.0, ..circle() };
        assert!(background_psnr(&x, &x, huge).is_err());
    }

    #[test]
    fn per_class_accuracies_weight_to_overall() {
        let pairs = [(1, 1), (1, 2), (2, 2), (2, 2), (2, 3), (3, 3)];
        let r = EvalReport::from_predictions(&pairs, &[]);
        let weighted: f64 = r
            .per_class
            .values()
            .map(|c| c.fraction() * c.total as f64)
            .sum::<f64>()
            / r.samples as f64;
        assert!((weighted - r.transfer_accuracy).abs() < 1e-12);
        assert!((r.transfer_accuracy - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn contact_sheet_layout() {
        let tile = |v: f32| Tensor::full(&[3, 4, 4], v);
        let triplets: Vec<[Tensor<f32>; 3]> = (0..4).map(|i| [tile(i as f32), tile(10.0), tile(-1.0)]).collect();
        let sheet = contact_sheet(&triplets, 2, 2).unwrap();
        assert_eq!(sheet.shape(), &[3, 8, 24]);
        // row 1, col 1 input tile starts at x = 12
        assert_eq!(sheet.data()[5 * 24 + 12], 3.0);
        assert!(contact_sheet(&triplets, 3, 2).is_err());
    }

    #[test]
    fn targets_stay_in_category() {
        let classes = [8, 9, 10, 11, 16, 17];
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let b = pick_target(9, &classes, &mut rng).unwrap();
            assert!(b != 9 && (8..12).contains(&b));
        }
        assert!(pick_target(8, &[8, 16], &mut rng).is_err());
    }
}
