//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SPKF" | version u32 | config length u32 | config UTF-8 (key=value lines)
//! | tensor count u32 | per tensor: name length u16, name UTF-8, rank u8,
//! dims u32 × rank, values f32 × product(dims)
//! ```

use std::path::Path;

use crate::config::ModelConfig;
use crate::error::CheckpointError;
use crate::io::atomic_write;
use crate::model::Spikformer;
use crate::tensor::{Real, Tensor};

pub const MAGIC: [u8; 4] = *b"SPKF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated { what })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn utf8(&mut self, n: usize, what: &'static str) -> Result<String, CheckpointError> {
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| CheckpointError::Format(format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        b.extend_from_slice(self.config.as_bytes());
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            b.extend_from_slice(&(name.len() as u16).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.push(t.rank() as u8);
            for &d in t.shape() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic { found: magic });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let len = r.u32("config length")? as usize;
        let config = r.utf8(len, "config")?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u16("tensor name length")? as usize;
            let name = r.utf8(n, "tensor name")?;
            let rank = r.take(1, "tensor rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("tensor dims")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CheckpointError::Format(format!("tensor {name} is too large")))?;
            let raw = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated { what: "tensor values" })?, "tensor values")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Format(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        atomic_write(path, &self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn model_config(&self) -> Result<ModelConfig, CheckpointError> {
        Ok(ModelConfig::parse(&self.config)?)
    }
}

impl<F: Real> Spikformer<F> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config().to_kv(),
            tensors: self
                .store()
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.cast()))
                .collect(),
        }
    }

    /// Builds a model from the checkpoint's own configuration and weights.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        let cfg = ck.model_config()?;
        let mut model = Spikformer::new(cfg, 0)?;
        model.load_tensors(ck)?;
        Ok(model)
    }

    /// Overwrites every parameter and running statistic from `ck`, which
    /// must hold exactly this model's tensors with matching shapes.
    pub fn load_tensors(&mut self, ck: &Checkpoint) -> Result<(), CheckpointError> {
        let expected = self.store().named_tensors();
        for (name, _) in &ck.tensors {
            if !expected.iter().any(|(n, _)| n == name) {
                return Err(CheckpointError::Unexpected { name: name.clone() });
            }
        }
        let mut found = Vec::with_capacity(expected.len());
        for (name, want) in &expected {
            let (_, t) = ck
                .tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| CheckpointError::Missing { name: name.clone() })?;
            if t.shape() != want.shape() {
                return Err(CheckpointError::Shape {
                    name: name.clone(),
                    expected: want.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            found.push(t.cast::<F>());
        }
        let store = self.store_mut();
        let np = store.params.len();
        for (p, t) in store.params.iter_mut().zip(&found[..np]) {
            p.value = t.clone();
        }
        for (b, stats) in store.bn.iter_mut().zip(found[np..].chunks(3)) {
            b.stats.mean = stats[0].data().to_vec();
            b.stats.var = stats[1].data().to_vec();
            let updates = stats[2].data()[0].as_f64();
            if !(updates >= 0.0 && updates.fract() == 0.0) {
                return Err(CheckpointError::Format(format!("{}.updates is {updates}", b.name)));
            }
            b.stats.updates = updates as u64;
        }
        Ok(())
    }
}
