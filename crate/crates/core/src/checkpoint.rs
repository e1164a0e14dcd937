//! Versioned, checksummed checkpoint container.
//!
//! Layout: 8-byte magic, format version (u32 LE), body length (u64 LE), body,
//! SHA-256 of the body. The body is a length-prefixed JSON header followed by
//! little-endian f64 sections in header order: parameters, Adam first
//! moments, Adam second moments and, when present, the best parameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::Config;
use crate::model::{Model, ModelDims};
use crate::tensor::Tensor;
use crate::training::{Adam, TrainerState};

pub const MAGIC: &[u8; 8] = b"RGLCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format version {found} is not supported (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corruption(String),
    #[error("checkpoint does not match: {0}")]
    Incompatible(String),
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlockMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: Config,
    dims: ModelDims,
    blocks: Vec<BlockMeta>,
    adam_steps: Vec<u64>,
    state: TrainerState,
    has_best: bool,
}

/// Everything needed to rebuild a model and resume training.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Config,
    pub model: Model,
    pub adam: Adam,
    pub state: TrainerState,
    /// Parameters of the best validation epoch so far.
    pub best: Option<Vec<Tensor>>,
}

fn put_tensors(out: &mut Vec<u8>, ts: &[Tensor]) {
    for t in ts {
        for v in t.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Corruption(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn tensors(&mut self, blocks: &[BlockMeta], what: &str) -> Result<Vec<Tensor>, CheckpointError> {
        blocks
            .iter()
            .map(|b| {
                let raw = self.take(b.rows * b.cols * 8, what)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect();
                Ok(Tensor::from_vec(b.rows, b.cols, data))
            })
            .collect()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let store = &self.model.store;
        let blocks: Vec<BlockMeta> = store
            .ids()
            .map(|id| {
                let (rows, cols) = store.get(id).shape();
                BlockMeta {
                    name: store.name(id).to_string(),
                    rows,
                    cols,
                }
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            dims: self.model.dims,
            blocks,
            adam_steps: self.adam.steps.clone(),
            state: self.state.clone(),
            has_best: self.best.is_some(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut body = Vec::new();
        body.extend_from_slice(&(json.len() as u64).to_le_bytes());
        body.extend_from_slice(&json);
        let params: Vec<Tensor> = store.ids().map(|id| store.get(id).clone()).collect();
        put_tensors(&mut body, &params);
        put_tensors(&mut body, &self.adam.m);
        put_tensors(&mut body, &self.adam.v);
        if let Some(best) = &self.best {
            put_tensors(&mut body, best);
        }
        let mut out = Vec::with_capacity(body.len() + 52);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        out.extend_from_slice(&Sha256::digest(&body));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::Corruption("missing checkpoint header".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let body_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        if bytes.len() != 20 + body_len + 32 {
            return Err(CheckpointError::Corruption(format!(
                "expected {} bytes, found {}",
                20 + body_len + 32,
                bytes.len()
            )));
        }
        let body = &bytes[20..20 + body_len];
        if Sha256::digest(body).as_slice() != &bytes[20 + body_len..] {
            return Err(CheckpointError::Corruption("checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 0 };
        let hlen = u64::from_le_bytes(r.take(8, "header length")?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(r.take(hlen, "header")?)
            .map_err(|e| CheckpointError::Corruption(format!("bad header: {e}")))?;
        let params = r.tensors(&header.blocks, "parameters")?;
        let m = r.tensors(&header.blocks, "first moments")?;
        let v = r.tensors(&header.blocks, "second moments")?;
        let best = if header.has_best {
            Some(r.tensors(&header.blocks, "best parameters")?)
        } else {
            None
        };
        if r.pos != body.len() {
            return Err(CheckpointError::Corruption("trailing bytes".into()));
        }

        let mut model = Model::build(header.dims, header.config.seed);
        if model.store.len() != header.blocks.len() {
            return Err(CheckpointError::Incompatible(format!(
                "{} blocks stored, model has {}",
                header.blocks.len(),
                model.store.len()
            )));
        }
        for (b, t) in header.blocks.iter().zip(params) {
            let id = model
                .store
                .id(&b.name)
                .ok_or_else(|| CheckpointError::Incompatible(format!("unknown block {}", b.name)))?;
            if model.store.get(id).shape() != t.shape() {
                return Err(CheckpointError::Incompatible(format!("shape of {} differs", b.name)));
            }
            model.store.set(id, t);
        }
        if header.adam_steps.len() != header.blocks.len() {
            return Err(CheckpointError::Corruption("optimizer state size mismatch".into()));
        }
        let adam = Adam {
            hyper: crate::training::AdamHyper::from(&header.config.train),
            steps: header.adam_steps,
            m,
            v,
        };
        Ok(Self {
            config: header.config,
            model,
            adam,
            state: header.state,
            best,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// The model with its best-validation parameters, when recorded.
    pub fn best_model(&self) -> Model {
        let mut m = self.model.clone();
        if let Some(best) = &self.best {
            for (id, t) in m.store.ids().collect::<Vec<_>>().into_iter().zip(best) {
                m.store.set(id, t.clone());
            }
        }
        m
    }

    /// Rejects a checkpoint produced under a different configuration.
    pub fn check_config(&self, config: &Config) -> Result<(), CheckpointError> {
        if &self.config != config {
            return Err(CheckpointError::Incompatible(
                "configuration differs from the one the checkpoint was trained with".into(),
            ));
        }
        Ok(())
    }
}
