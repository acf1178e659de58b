//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DRAG" | version u32 | config_len u32 | config text
//! iteration u64 | rng seed u64 | rng stream u64 | rng word_pos u128
//! set_count u32, then per set: entry_count u32, then per entry:
//!     name_len u32 | name | rank u32 | dims u32 * rank
//! per set: parameter buffers as f32, in census order
//! per set: adam step u64 | first moments | second moments
//! ```
//!
//! Set 0 is the generator; sets 1.. are the critics, smallest scale first.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{CensusEntry, ParamSet};
use crate::rng::{Rng, RngState};
use crate::tensor::Tensor;
use crate::training::{ModelState, OptimizerState};

pub const MAGIC: &[u8; 4] = b"DRAG";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub models: ModelState<f32>,
    /// Completed iterations.
    pub iteration: u64,
    pub rng: RngState,
}

fn sets(models: &ModelState<f32>) -> Vec<(&ParamSet<f32>, &OptimizerState<f32>)> {
    std::iter::once((&models.generator.params, &models.generator_opt))
        .chain(models.critics.critics.iter().map(|c| &c.params).zip(&models.critic_opts))
        .collect()
}

/// Census of every parameter set, generator first.
pub fn model_census(models: &ModelState<f32>) -> Vec<Vec<CensusEntry>> {
    sets(models).iter().map(|(p, _)| p.census()).collect()
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Checkpoint {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            self.fail(format!(
                "truncated: expected {n} more bytes, file is {} bytes long",
                self.bytes.len()
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let raw = self.take(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape, data)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let text = self.config.to_text();
        put_u32(&mut out, text.len() as u32);
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let sets = sets(&self.models);
        put_u32(&mut out, sets.len() as u32);
        for (params, _) in &sets {
            put_u32(&mut out, params.len() as u32);
            for (name, shape) in params.census() {
                put_u32(&mut out, name.len() as u32);
                out.extend_from_slice(name.as_bytes());
                put_u32(&mut out, shape.len() as u32);
                for d in shape {
                    put_u32(&mut out, d as u32);
                }
            }
        }
        for (params, _) in &sets {
            for e in params.entries() {
                put_tensor(&mut out, &e.value);
            }
        }
        for (_, opt) in &sets {
            out.extend_from_slice(&opt.step.to_le_bytes());
            for t in opt.m.iter().chain(&opt.v) {
                put_tensor(&mut out, t);
            }
        }
        out
    }

    /// Parses a checkpoint, rebuilding the models from the embedded config.
    /// The stored census must match that config exactly.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| r.fail("file too short for the magic bytes"))? != MAGIC {
            return Err(Error::Checkpoint {
                offset: 0,
                msg: "bad magic bytes, not a checkpoint".into(),
            });
        }
        let version_at = r.pos;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint {
                offset: version_at,
                msg: format!("unsupported format version {version}, expected {VERSION}"),
            });
        }
        let len = r.u32()? as usize;
        let text_at = r.pos;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| r.fail("config text is not UTF-8"))?;
        let config = RunConfig::from_text(text).map_err(|e| Error::Checkpoint {
            offset: text_at,
            msg: e.to_string(),
        })?;
        config.validate().map_err(|e| Error::Checkpoint {
            offset: text_at,
            msg: e.to_string(),
        })?;
        let iteration = r.u64()?;
        let rng = RngState {
            seed: r.u64()?,
            stream: r.u64()?,
            word_pos: r.u128()?,
        };

        let census_at = r.pos;
        let set_count = r.u32()? as usize;
        let mut stored: Vec<Vec<CensusEntry>> = Vec::new();
        for _ in 0..set_count {
            let n = r.u32()? as usize;
            let mut entries = Vec::new();
            for _ in 0..n {
                let name_len = r.u32()? as usize;
                let name = String::from_utf8(r.take(name_len)?.to_vec())
                    .map_err(|_| r.fail("parameter name is not UTF-8"))?;
                let rank = r.u32()? as usize;
                let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                entries.push((name, shape));
            }
            stored.push(entries);
        }
        let mut models = ModelState::<f32>::new(config.generator.clone(), &config.critic, &mut Rng::new(0))
            .map_err(|e| Error::Checkpoint {
                offset: text_at,
                msg: e.to_string(),
            })?;
        let expected = model_census(&models);
        if stored != expected {
            return Err(Error::Checkpoint {
                offset: census_at,
                msg: census_diff(&expected, &stored),
            });
        }
        let floats: usize = expected.iter().flatten().map(|(_, s)| s.iter().product::<usize>()).sum();
        let total = r.pos + 3 * 4 * floats + 8 * expected.len();
        if bytes.len() != total {
            return Err(Error::Checkpoint {
                offset: bytes.len().min(total),
                msg: format!("expected {total} bytes in total, file is {} bytes long", bytes.len()),
            });
        }

        let read_set = |r: &mut Reader, census: &[CensusEntry]| -> Result<Vec<Tensor<f32>>> {
            census.iter().map(|(_, s)| r.tensor(s)).collect()
        };
        let mut values = Vec::new();
        for census in &expected {
            values.push(read_set(&mut r, census)?);
        }
        let mut opts = Vec::new();
        for census in &expected {
            let step = r.u64()?;
            let m = read_set(&mut r, census)?;
            let v = read_set(&mut r, census)?;
            opts.push(OptimizerState { m, v, step });
        }
        let mut values = values.into_iter();
        let mut opts = opts.into_iter();
        models.generator.params.load_values(values.next().expect("generator set"))?;
        models.generator_opt = opts.next().expect("generator set");
        for (k, critic) in models.critics.critics.iter_mut().enumerate() {
            critic.params.load_values(values.next().expect("critic set"))?;
            models.critic_opts[k] = opts.next().expect("critic set");
        }
        Ok(Self {
            config,
            models,
            iteration,
            rng,
        })
    }

    /// Writes to a sibling temporary file first, so a crash never leaves a
    /// half-written checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rejects a checkpoint whose parameter census differs from the model
    /// `config` would build.
    pub fn ensure_compatible(&self, config: &RunConfig) -> Result<()> {
        let fresh = ModelState::<f32>::new(config.generator.clone(), &config.critic, &mut Rng::new(0))?;
        let want = model_census(&fresh);
        let have = model_census(&self.models);
        if want != have {
            return Err(Error::Config(format!("checkpoint census mismatch: {}", census_diff(&want, &have))));
        }
        Ok(())
    }
}

fn census_diff(expected: &[Vec<CensusEntry>], stored: &[Vec<CensusEntry>]) -> String {
    if expected.len() != stored.len() {
        return format!("parameter census has {} sets, config implies {}", stored.len(), expected.len());
    }
    for (e, s) in expected.iter().flatten().zip(stored.iter().flatten()) {
        if e != s {
            return format!("parameter census mismatch: stored {} {:?}, config implies {} {:?}", s.0, s.1, e.0, e.1);
        }
    }
    let (ne, ns) = (expected.iter().flatten().count(), stored.iter().flatten().count());
    format!("parameter census mismatch: stored {ns} entries, config implies {ne}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::GeneratorConfig;

    fn small_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.generator = GeneratorConfig {
            resolution: 16,
            base_width: 4,
            scales: 2,
            ..GeneratorConfig::default()
        };
        c.critic.width = 4;
        c.train.scale_weights = vec![1.0, 1.0];
        c
    }

    fn checkpoint() -> Checkpoint {
        let config = small_config();
        let mut rng = Rng::new(5);
        let mut models = ModelState::new(config.generator.clone(), &config.critic, &mut rng).unwrap();
        models.generator_opt.step = 3;
        models.critic_opts[1].m[0] = rng.normal_tensor(models.critic_opts[1].m[0].shape(), 1.0);
        rng.normal();
        Checkpoint {
            config,
            models,
            iteration: 42,
            rng: rng.state(),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = checkpoint();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.iteration, 42);
        assert_eq!(back.rng, ck.rng);
        assert_eq!(back.models.critic_opts[1], ck.models.critic_opts[1]);
        assert_eq!(back.config, ck.config);
    }

    #[test]
    fn truncation_reports_lengths() {
        let bytes = checkpoint().to_bytes();
        let cut = &bytes[..bytes.len() - 10];
        let err = Checkpoint::from_bytes(cut).unwrap_err().to_string();
        assert!(err.contains(&bytes.len().to_string()) && err.contains(&cut.len().to_string()), "{err}");
        let err = Checkpoint::from_bytes(&bytes[..20]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { .. }), "{err}");
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = checkpoint().to_bytes();
        bytes[4] = 9;
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Checkpoint { offset, msg }) => {
                assert_eq!(offset, 4);
                assert!(msg.contains("version 9"));
            }
            other => panic!("{other:?}"),
        }
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint { offset: 0, .. })));
    }

    #[test]
    fn census_mismatch_is_rejected() {
        let ck = checkpoint();
        let mut other = ck.config.clone();
        other.generator.dra_enabled = false;
        assert!(ck.ensure_compatible(&other).is_err());
        assert!(ck.ensure_compatible(&ck.config).is_ok());

        // a config text claiming a different width no longer matches the census
        let text = ck.config.to_text();
        let bytes = ck.to_bytes();
        let patched_text = text.replace("base_width = 4", "base_width = 5");
        let mut patched = bytes[..12].to_vec();
        patched[8..12].copy_from_slice(&(patched_text.len() as u32).to_le_bytes());
        patched.extend_from_slice(patched_text.as_bytes());
        patched.extend_from_slice(&bytes[12 + text.len()..]);
        let err = Checkpoint::from_bytes(&patched).unwrap_err().to_string();
        assert!(err.contains("census"), "{err}");
    }
}
