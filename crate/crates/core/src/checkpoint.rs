//! Versioned binary checkpoints.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, `u64`-prefixed TOML
//! config, `u64` tensor count, then per tensor a `u32`-prefixed UTF-8 name,
//! `u32` rank, `u64` dims and the `f64` payload.

use std::path::Path;

use crate::config::ExperimentConfig;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objective::LossBreakdown;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FUTUREG\0";
pub const VERSION: u32 = 1;
const NORM: &str = "meta.norm";
const TRAINING: &str = "meta.training";

/// Training metadata stored alongside the weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub final_loss: Option<LossBreakdown>,
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ExperimentConfig,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: &TrainingMeta) -> Result<Self> {
        let mut tensors: Vec<(String, Tensor)> = model
            .store
            .ids()
            .map(|id| (model.store.name(id).to_string(), model.store.get(id).clone()))
            .collect();
        tensors.push((NORM.into(), Tensor::new(vec![2], vec![model.norm.mean, model.norm.std])?));
        let (r, c, a) = meta
            .final_loss
            .map_or((0.0, 0.0, 0.0), |l| (l.l_rec, l.l_cls, l.alpha));
        tensors.push((TRAINING.into(), Tensor::new(vec![4], vec![meta.epochs as f64, r, c, a])?));
        Ok(Checkpoint {
            version: VERSION,
            config: model.config.clone(),
            tensors,
        })
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name}")))
    }

    /// Rebuilds the model; the prototype bank comes back frozen.
    pub fn into_model(&self) -> Result<(Model, TrainingMeta)> {
        let mut model = Model::new(&self.config)?;
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.name(id).to_string();
            let t = self.tensor(&name)?.clone();
            model.store.set(id, t)?;
        }
        let expected = model.store.len() + 2;
        if self.tensors.len() != expected {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model needs {expected}",
                self.tensors.len()
            )));
        }
        model.bank.freeze(&mut model.store);
        let norm = self.tensor(NORM)?.data();
        model.norm = NormStats {
            mean: norm[0],
            std: norm[1],
        };
        let t = self.tensor(TRAINING)?.data();
        let epochs = t[0] as usize;
        let final_loss = if epochs > 0 {
            Some(LossBreakdown::new(t[1], t[2], t[3])?)
        } else {
            None
        };
        Ok((model, TrainingMeta { epochs, final_loss }))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(self.version.to_le_bytes());
        let cfg = self.config.to_toml()?;
        out.extend((cfg.len() as u64).to_le_bytes());
        out.extend(cfg.as_bytes());
        out.extend((self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 8,
                reason: format!("unsupported version {version}"),
            });
        }
        let len = r.u64()? as usize;
        let at = r.pos;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Format {
            offset: at,
            reason: e.to_string(),
        })?;
        let config = ExperimentConfig::from_toml(text)?;
        let count = r.u64()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Format {
                    offset: at,
                    reason: e.to_string(),
                })?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let at = r.pos;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(Error::Format {
                offset: at,
                reason: "tensor size overflows".into(),
            })?;
            let payload = r.take(n.checked_mul(8).unwrap_or(usize::MAX))?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format {
                offset: at,
                reason: e.to_string(),
            })?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos,
                reason: "trailing bytes".into(),
            });
        }
        Ok(Checkpoint {
            version,
            config,
            tensors,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Format {
            offset: self.pos,
            reason: format!("need {n} bytes, {} remain", self.bytes.len() - self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save(model: &Model, meta: &TrainingMeta, path: &Path) -> Result<()> {
    std::fs::write(path, Checkpoint::from_model(model, meta)?.to_bytes()?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, TrainingMeta)> {
    Checkpoint::from_bytes(&std::fs::read(path)?)?.into_model()
}
