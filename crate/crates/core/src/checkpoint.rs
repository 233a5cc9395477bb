//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//! magic `OPO1` | version u32 | sha256 of the config text [32] |
//! config length u64 | config TOML | iteration u64 | optimizer step u64 |
//! rng count u32 | per rng: seed [32], stream u64, word position u128 |
//! tensor count u64 | per tensor: name length u32, name, rank u32,
//! dims u64 x rank, f64 data | total file length u64.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamSet;
use crate::tensor::Tensor;
use crate::train::{Adam, RngState, Trainer};

pub const MAGIC: &[u8; 4] = b"OPO1";
pub const VERSION: u32 = 1;

const FIRST: &str = "adam.first.";
const SECOND: &str = "adam.second.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub iteration: u64,
    pub optimizer_step: u64,
    pub rngs: Vec<RngState>,
    /// Parameters followed by optimizer moments.
    pub tensors: Vec<(String, Tensor)>,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        let mut tensors: Vec<(String, Tensor)> = t.model.params.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        for (name, m, v) in t.optimizer.moments() {
            tensors.push((format!("{FIRST}{name}"), Tensor::vector(m.to_vec())));
            tensors.push((format!("{SECOND}{name}"), Tensor::vector(v.to_vec())));
        }
        Checkpoint {
            config: t.model.config.clone(),
            iteration: t.iteration as u64,
            optimizer_step: t.optimizer.step,
            rngs: t.rng_states(),
            tensors,
        }
    }

    /// Checkpoint of an untrained model.
    pub fn from_model(model: Model) -> Self {
        Self::from_trainer(&Trainer::new(model))
    }

    pub fn model(&self) -> Result<Model> {
        let mut params = ParamSet::new();
        for (name, t) in &self.tensors {
            if !name.starts_with("adam.") {
                params.insert(name.clone(), t.clone());
            }
        }
        let fresh = Model::init(&self.config)?;
        if fresh.params.len() != params.len() {
            return Err(err(format!(
                "config expects {} parameter tensors, file has {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for (name, t) in fresh.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => return Err(err(format!("{name}: shape {:?}, config expects {:?}", p.shape(), t.shape()))),
                None => return Err(err(format!("missing parameter {name}"))),
            }
        }
        Ok(Model {
            config: self.config.clone(),
            params,
        })
    }

    pub fn trainer(&self) -> Result<Trainer> {
        let model = self.model()?;
        let c = &self.config;
        let mut opt = Adam::new(c.learning_rate, c.beta1, c.beta2, c.adam_eps);
        opt.step = self.optimizer_step;
        for (name, t) in &self.tensors {
            if let Some(p) = name.strip_prefix(FIRST) {
                let second = self
                    .tensors
                    .iter()
                    .find(|(n, _)| n.strip_prefix(SECOND) == Some(p))
                    .ok_or_else(|| err(format!("second moment of {p} missing")))?;
                opt.set_moments(p, t.data().to_vec(), second.1.data().to_vec());
            }
        }
        let rngs: [RngState; 2] = self
            .rngs
            .clone()
            .try_into()
            .map_err(|_| err(format!("expected 2 rng states, found {}", self.rngs.len())))?;
        Ok(Trainer::resume(model, opt, self.iteration as usize, rngs))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let text = self.config.to_toml();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&Sha256::digest(text.as_bytes()));
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.optimizer_step.to_le_bytes());
        out.extend_from_slice(&(self.rngs.len() as u32).to_le_bytes());
        for r in &self.rngs {
            out.extend_from_slice(&r.seed);
            out.extend_from_slice(&r.stream.to_le_bytes());
            out.extend_from_slice(&r.word_pos.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let total = out.len() as u64 + 8;
        out.extend_from_slice(&total.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 4 + 4 {
            return Err(err(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(err("bad magic, not an OPO1 checkpoint"));
        }
        let trailer = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
        if trailer != bytes.len() as u64 {
            return Err(err(format!(
                "length field says {trailer} bytes but file has {}; truncated or padded",
                bytes.len()
            )));
        }
        let mut r = Reader {
            buf: &bytes[4..bytes.len() - 8],
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(err(format!("unsupported format version {version} (expected {VERSION})")));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let len = r.len()?;
        let text = r.take(len)?;
        if Sha256::digest(text)[..] != digest {
            return Err(err("config digest mismatch"));
        }
        let text = std::str::from_utf8(text).map_err(|_| err("config is not UTF-8"))?;
        let config = TrainConfig::from_toml(text, "checkpoint")?;
        let iteration = r.u64()?;
        let optimizer_step = r.u64()?;
        let n_rng = r.u32()? as usize;
        let mut rngs = Vec::with_capacity(n_rng.min(16));
        for _ in 0..n_rng {
            let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
            rngs.push(RngState { seed, stream, word_pos });
        }
        let n = r.len()?;
        let mut tensors = Vec::new();
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| err("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| err("tensor too large"))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| err("tensor too large"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if !r.buf.is_empty() {
            return Err(err(format!("{} unexpected trailing bytes", r.buf.len())));
        }
        Ok(Checkpoint {
            config,
            iteration,
            optimizer_step,
            rngs,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.buf.len() {
            return Err(err(format!("record needs {n} bytes, {} left", self.buf.len())));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| err("length does not fit in memory"))
    }
}
