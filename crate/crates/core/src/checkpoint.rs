//! Versioned binary snapshots of parameters, optimizer state and config.
//!
//! Layout: `P2SCCKPT`, u32 version, u64 metadata length, JSON metadata,
//! then every tensor as little-endian f64 in store order, then (if present)
//! Adam first and second moments for each trainable tensor.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"P2SCCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerMeta {
    t: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

/// All randomness is derived from the seed and the epoch counter, so these
/// two values are the complete RNG state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    version: u32,
    config: ModelConfig,
    epoch: u64,
    step: u64,
    rng: RngState,
    tensors: Vec<TensorMeta>,
    optimizer: Option<OptimizerMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub params: ParamStore,
    pub epoch: u64,
    pub step: u64,
    pub rng: RngState,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, epoch: u64, step: u64, optimizer: Option<&Adam>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            params: model.params.clone(),
            epoch,
            step,
            rng: RngState { seed: model.config.seed, epoch },
            optimizer: optimizer.cloned(),
        }
    }

    /// Rebuilds the model and loads the stored values into it.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.clone())?;
        model.params.load_values(&self.params)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            version: self.version,
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: self.rng.clone(),
            tensors: self
                .params
                .entries()
                .iter()
                .map(|e| TensorMeta { name: e.name.clone(), shape: e.tensor.shape().to_vec(), trainable: e.trainable })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|a| OptimizerMeta { t: a.t, beta1: a.beta1, beta2: a.beta2, epsilon: a.epsilon }),
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(json.len() + 20 + self.params.entries().iter().map(|e| e.tensor.len() * 8).sum::<usize>());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let put = |out: &mut Vec<u8>, xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for e in self.params.entries() {
            put(&mut out, e.tensor.data());
        }
        if let Some(adam) = &self.optimizer {
            for (i, e) in self.params.entries().iter().enumerate() {
                if e.trainable {
                    put(&mut out, &adam.m[i]);
                    put(&mut out, &adam.v[i]);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Format(format!("truncated checkpoint while reading {what}")))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(4, "version")?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(take(8, "metadata length")?.try_into().expect("8 bytes"));
        let len = usize::try_from(len).map_err(|_| Error::Format("metadata length overflows".into()))?;
        let meta: Meta = serde_json::from_slice(take(len, "metadata")?).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        meta.config.validate()?;
        let mut read_f64s = |n: usize, what: &str| -> Result<Vec<f64>> {
            let raw = take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor size overflows".into()))?, what)?;
            Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
        };
        let mut params = ParamStore::new();
        for t in &meta.tensors {
            let data = read_f64s(t.shape.iter().product(), &t.name)?;
            let tensor = Tensor::new(t.shape.clone(), data)?;
            if t.trainable {
                params.add(t.name.clone(), tensor);
            } else {
                params.add_buffer(t.name.clone(), tensor);
            }
        }
        let optimizer = match &meta.optimizer {
            Some(o) => {
                let mut m = Vec::with_capacity(meta.tensors.len());
                let mut v = Vec::with_capacity(meta.tensors.len());
                for t in &meta.tensors {
                    if t.trainable {
                        let n = t.shape.iter().product();
                        m.push(read_f64s(n, "optimizer moment")?);
                        v.push(read_f64s(n, "optimizer moment")?);
                    } else {
                        m.push(Vec::new());
                        v.push(Vec::new());
                    }
                }
                Some(Adam { beta1: o.beta1, beta2: o.beta2, epsilon: o.epsilon, t: o.t, m, v })
            }
            None => None,
        };
        if pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint data", bytes.len() - pos)));
        }
        Ok(Self { version, config: meta.config, params, epoch: meta.epoch, step: meta.step, rng: meta.rng, optimizer })
    }

    /// Writes through a temporary file so a crash never leaves a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
