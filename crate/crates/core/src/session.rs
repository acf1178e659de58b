//! Resumable training runs: metrics log plus periodic checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::training::{train_step, Metrics, ModelState, TrainingSet};

pub const METRICS_LOG: &str = "metrics.log";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";

pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt_{iteration:06}.ckpt")
}

/// Model state, the training stream and the number of completed iterations.
#[derive(Debug, Clone)]
pub struct Session {
    pub config: RunConfig,
    pub models: ModelState<f32>,
    pub iteration: usize,
    pub rng: Rng,
}

impl Session {
    /// Fresh models drawn from stream 1 of the seed; training draws from
    /// stream 0.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let models = ModelState::new(config.generator.clone(), &config.critic, &mut Rng::with_stream(seed, 1))?;
        Ok(Self {
            config,
            models,
            iteration: 0,
            rng: Rng::new(seed),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        Self {
            config: ck.config,
            models: ck.models,
            iteration: ck.iteration as usize,
            rng: Rng::from_state(ck.rng),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            models: self.models.clone(),
            iteration: self.iteration as u64,
            rng: self.rng.state(),
        }
    }

    pub fn step(&mut self, data: &TrainingSet<f32>) -> Result<Metrics> {
        let m = train_step(&mut self.models, data, &self.config.train, self.iteration, &mut self.rng)?;
        self.iteration += 1;
        Ok(m)
    }
}

/// Keeps only the first `iterations` records of an existing metrics log, so a
/// resumed run neither repeats nor skips an index.
pub fn truncate_metrics_log(path: &Path, iterations: usize) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound && iterations == 0 => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let kept: Vec<&str> = text.lines().take(iterations).collect();
    for (i, line) in kept.iter().enumerate() {
        let m = Metrics::parse_line(line)?;
        if m.iteration != i {
            return Err(Error::invalid(
                "truncate_metrics_log",
                format!("{}: line {} records iteration {}", path.display(), i + 1, m.iteration),
            ));
        }
    }
    if kept.len() < iterations {
        return Err(Error::invalid(
            "truncate_metrics_log",
            format!("{} has {} records, checkpoint is at {iterations}", path.display(), kept.len()),
        ));
    }
    let mut body = kept.join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Trains until `session.iteration == until`, appending one metrics line per
/// iteration to `out_dir/metrics.log` and checkpointing every
/// `checkpoint_every` iterations and at the end. `observe` sees every record.
pub fn run_training(
    session: &mut Session,
    data: &TrainingSet<f32>,
    out_dir: &Path,
    until: usize,
    mut observe: impl FnMut(&Metrics),
) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(METRICS_LOG);
    truncate_metrics_log(&log_path, session.iteration)?;
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let every = session.config.train.checkpoint_every;
    let mut last_good = Some(out_dir.join(checkpoint_name(session.iteration as u64))).filter(|p| p.exists());
    while session.iteration < until {
        let metrics = match session.step(data) {
            Ok(m) => m,
            Err(e) => {
                let reference = last_good
                    .as_ref()
                    .map_or("no checkpoint written yet".to_string(), |p| format!("last good checkpoint {}", p.display()));
                return Err(Error::invalid("run_training", format!("{e} ({reference})")));
            }
        };
        writeln!(log, "{}", metrics.log_line()).map_err(|e| Error::io(&log_path, e))?;
        observe(&metrics);
        if session.iteration % every == 0 || session.iteration == until {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            last_good = Some(save_checkpoints(session, out_dir)?);
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))
}

fn save_checkpoints(session: &Session, out_dir: &Path) -> Result<PathBuf> {
    let ck = session.checkpoint();
    let path = out_dir.join(checkpoint_name(ck.iteration));
    ck.save(&path)?;
    let latest = out_dir.join(LATEST_CHECKPOINT);
    ck.save(&latest)?;
    Ok(path)
}

/// Reads a metrics log written by [`run_training`].
pub fn read_metrics_log(path: &Path) -> Result<Vec<Metrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().map(Metrics::parse_line).collect()
}

/// Creates `path` and fails if it cannot be written, before any work starts.
pub fn ensure_writable_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let probe = path.join(".write_probe");
    File::create(&probe).map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}
