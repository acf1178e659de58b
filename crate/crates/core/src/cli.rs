//! Command implementations behind the `dragan` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::{Ablation, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{
    contact_sheet, evaluate_transfer, generate_batch, generate_one, pick_target, ClassifierConfig, Labelled,
    ReferenceClassifier,
};
use crate::gradcheck::{self, Scope};
use crate::kernels::resize_bilinear_forward;
use crate::rng::Rng;
use crate::session::{ensure_writable_dir, run_training, Session, LATEST_CHECKPOINT};
use crate::synthdata::{
    generate_dataset, load_image, load_training_set, pictogram_at, save_image, Category, DatasetConfig,
    DatasetManifest, ToySignSpec,
};
use crate::tensor::Tensor;
use crate::training::TrainingSet;

#[derive(Debug, Parser)]
#[command(name = "dragan", version, about = "Conditional GAN for traffic-sign pictogram transfer")]
pub struct Cli {
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic sign dataset and its manifest.
    GenData(GenDataArgs),
    /// Train (or resume) a model on a dataset manifest.
    Train(TrainArgs),
    /// Transfer one scene to a new pictogram.
    Generate(GenerateArgs),
    /// Write an (input, pictogram, output) contact sheet.
    Grid(GridArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Background PSNR and class-transfer accuracy of a checkpoint.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Classes per category.
    #[arg(long, default_value_t = 4)]
    pub classes: u32,
    /// Scenes per class.
    #[arg(long, default_value_t = 10)]
    pub scenes: usize,
    /// Comma-separated subset of white_triangle, white_circle, blue_rectangle.
    #[arg(long, value_delimiter = ',')]
    pub categories: Vec<String>,
    /// Out-of-plane tilt up to 50 degrees instead of 20.
    #[arg(long)]
    pub high_skew: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "none")]
    pub ablate: Ablation,
    /// Resume from a checkpoint; without a path, from `<out>/latest.ckpt`.
    #[arg(long, num_args = 0..=1)]
    pub resume: Option<Option<PathBuf>>,
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Suppress per-iteration progress output.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Input scene, 8-bit RGB PNG at the model resolution.
    #[arg(long)]
    pub image: PathBuf,
    /// Target pictogram: a PNG path or a class id to render.
    #[arg(long)]
    pub pictogram: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub rows: usize,
    #[arg(long, default_value_t = 4)]
    pub cols: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// ops, blocks, gp, generator or all.
    #[arg(long, default_value = "all")]
    pub scope: String,
    #[arg(long, default_value = "f64")]
    pub dtype: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub classifier_epochs: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        // the global pool can only be built once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::Grid(a) => cmd_grid(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Eval(a) => cmd_eval(&a).map(|report| print!("{report}")),
    }
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<DatasetManifest> {
    let categories = if args.categories.is_empty() {
        Category::ALL.to_vec()
    } else {
        args.categories
            .iter()
            .map(|n| Category::from_name(n).ok_or_else(|| Error::Config(format!("unknown category {n:?}"))))
            .collect::<Result<_>>()?
    };
    ensure_writable_dir(&args.out)?;
    let config = DatasetConfig {
        categories,
        classes_per_category: args.classes,
        scenes_per_class: args.scenes,
        seed: args.seed,
        high_skew: args.high_skew,
    };
    let manifest = generate_dataset(&config, &args.out)?;
    println!("wrote {} scenes to {}", manifest.records.len(), args.out.display());
    Ok(manifest)
}

/// Training scenes of a manifest at `resolution`; the held-out split is
/// never trained on.
fn training_split(manifest: &DatasetManifest, resolution: usize) -> Result<TrainingSet<f32>> {
    let (train, _) = manifest.split();
    load_training_set(manifest, &train, resolution)
}

fn build_config(base: RunConfig, args: &TrainArgs) -> Result<RunConfig> {
    let mut config = base;
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        config.apply_text(&text)?;
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        config.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(iters) = args.iters {
        config.train.iterations = iters;
    }
    config.ablate(args.ablate);
    config.validate()?;
    Ok(config)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.data)?;
    let mut session = match &args.resume {
        Some(path) => {
            let path = path.clone().unwrap_or_else(|| args.out.join(LATEST_CHECKPOINT));
            let ck = Checkpoint::load(&path)?;
            let config = build_config(ck.config.clone(), args)?;
            ck.ensure_compatible(&config)?;
            let mut session = Session::from_checkpoint(ck);
            session.config = config;
            session
        }
        None => {
            let mut config = build_config(RunConfig::default(), args)?;
            // pin the ramp so a later resume with another target keeps it
            config.train.mask_ramp.get_or_insert(config.train.iterations / 2);
            Session::new(config)?
        }
    };
    let data = training_split(&manifest, session.config.generator.resolution)?;
    let until = session.config.train.iterations;
    let quiet = args.quiet;
    run_training(&mut session, &data, &args.out, until, |m| {
        if !quiet && (m.iteration + 1) % 10 == 0 {
            eprintln!("{}", m.log_line());
        }
    })?;
    println!("trained to iteration {} in {}", session.iteration, args.out.display());
    Ok(())
}

fn load_pictogram(spec: &str, resolution: usize) -> Result<Tensor<f32>> {
    match spec.parse::<u32>() {
        Ok(class) => pictogram_at(&ToySignSpec::from_class_id(class)?, resolution),
        Err(_) => load_image(Path::new(spec)),
    }
}

/// Runs the generator on one scene; no mask is applied anywhere on this path.
pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.ckpt)?;
    let res = ck.config.generator.resolution;
    let x: Tensor<f32> = load_image(&args.image)?;
    let p = load_pictogram(&args.pictogram, res)?;
    for (what, t) in [("image", &x), ("pictogram", &p)] {
        if t.shape() != [3, res, res] {
            return Err(Error::invalid(
                "generate",
                format!("{what} is {:?}, the model expects {res}x{res}", &t.shape()[1..]),
            ));
        }
    }
    let y = generate_one(&ck.models.generator, &x, &p)?;
    save_image(&y, &args.out)
}

pub fn cmd_grid(args: &GridArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.ckpt)?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    let res = ck.config.generator.resolution;
    let need = args.rows * args.cols;
    if manifest.records.is_empty() || manifest.records.len() < need {
        return Err(Error::Eval(format!(
            "{} scenes in the manifest, the grid needs {need}",
            manifest.records.len()
        )));
    }
    let classes = manifest.classes();
    let mut rng = Rng::new(args.seed);
    let mut order: Vec<usize> = (0..manifest.records.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.below(i + 1));
    }
    let picked: Vec<_> = order[..need].iter().map(|&i| &manifest.records[i]).collect();
    let images = picked
        .iter()
        .map(|r| {
            let img: Tensor<f32> = load_image(&manifest.image_path(r))?;
            let (h, w) = (img.shape()[1], img.shape()[2]);
            Tensor::new(&[3, res, res], resize_bilinear_forward(img.data(), 3, (h, w), (res, res)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut pictos = Vec::with_capacity(need);
    for (k, r) in picked.iter().enumerate() {
        let b = pick_target(r.class_id, &classes, &mut Rng::with_stream(args.seed, k as u64))
            .unwrap_or(r.class_id);
        pictos.push(pictogram_at::<f32>(&ToySignSpec::from_class_id(b)?, res)?);
    }
    let xs: Vec<&Tensor<f32>> = images.iter().collect();
    let ps: Vec<&Tensor<f32>> = pictos.iter().collect();
    let ys = generate_batch(&ck.models.generator, &xs, &ps)?;
    let triplets: Vec<[Tensor<f32>; 3]> = (0..need)
        .map(|k| [images[k].clone(), pictos[k].clone(), ys.unstack(k)])
        .collect();
    let sheet = contact_sheet(&triplets, args.rows, args.cols)?;
    save_image(&sheet, &args.out)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    if args.dtype != "f64" {
        return Err(Error::Config(format!("gradcheck runs in f64 only, got {:?}", args.dtype)));
    }
    let scopes = if args.scope == "all" {
        Scope::ALL.to_vec()
    } else {
        vec![args.scope.parse::<Scope>()?]
    };
    let mut failed = Vec::new();
    for scope in scopes {
        for r in gradcheck::run(scope)? {
            let status = if r.passed() { "ok" } else { "FAIL" };
            println!("{status:4} {:<32} max rel err {:.3e} (tol {:.0e})", r.name, r.max_rel_err, r.tolerance);
            if !r.passed() {
                failed.push(r.name);
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Eval(format!("gradient check failed for {}", failed.join(", "))))
    }
}

/// Trains the reference classifier on the manifest's training split, then
/// scores the checkpoint on the held-out split.
pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let ck = Checkpoint::load(&args.ckpt)?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    let res = ck.config.generator.resolution;
    let (train, held) = manifest.split();
    let train_set = load_training_set::<f32>(&manifest, &train, res)?;
    let held_set = load_training_set::<f32>(&manifest, &held, res)?;
    let labelled = |s: &TrainingSet<f32>| -> Vec<Labelled> {
        s.samples().iter().map(|s| (s.image.clone(), s.class_id)).collect()
    };
    let classifier = ReferenceClassifier::train(
        &labelled(&train_set),
        &labelled(&held_set),
        &ClassifierConfig {
            epochs: args.classifier_epochs,
            seed: args.seed,
            ..ClassifierConfig::default()
        },
    )?;
    let pictos: BTreeMap<u32, Tensor<f32>> = held_set.pictograms().clone();
    let report = evaluate_transfer(&ck.models.generator, held_set.samples(), &pictos, &classifier, args.seed)?;
    Ok(format!(
        "classifier_held_out_accuracy {:.4}\n{}",
        classifier.held_out_accuracy(),
        report.render()
    ))
}
