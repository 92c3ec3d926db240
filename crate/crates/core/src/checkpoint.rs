//! Single-file container for a model, its optimizer state and progress.
//!
//! Layout (little-endian): magic `CLKP`, u32 version, u8 stage (0 before
//! any training), u64 global step, u64 optimizer step, u32 + JSON metadata
//! (model config, vocabulary, training-config echo), u32 record count, then
//! per record a u32-prefixed UTF-8 name and one tensor in the tensor format.
//! Records are the parameters in store order followed by `adam.m.<name>`
//! and `adam.v.<name>` for each parameter.

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::head::Stage;
use crate::model::{Model, ModelConfig};
use crate::optim::AdamState;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Cursor, Read};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CLKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: ModelConfig,
    vocab: Vec<String>,
    train: Option<serde_json::Value>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: AdamState,
    /// Stage that produced this checkpoint; `None` for a fresh model.
    pub stage: Option<Stage>,
    /// Updates applied across all stages.
    pub step: u64,
    /// Echo of the training config that produced it.
    pub train: Option<serde_json::Value>,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: "<bytes>".into(),
        reason: reason.into(),
    }
}

fn read_exact<const N: usize>(r: &mut Cursor<&[u8]>) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| bad("truncated header"))?;
    Ok(buf)
}

fn read_block(r: &mut Cursor<&[u8]>, what: &str) -> Result<Vec<u8>> {
    let len = u32::from_le_bytes(read_exact(r)?) as usize;
    let remaining = r.get_ref().len() - r.position() as usize;
    if len > remaining {
        return Err(bad(format!("truncated {what}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| bad(format!("truncated {what}")))?;
    Ok(buf)
}

impl Checkpoint {
    pub fn fresh(model: Model) -> Self {
        let optimizer = AdamState::new(&model.store);
        Self {
            model,
            optimizer,
            stage: None,
            step: 0,
            train: None,
        }
    }

    fn records(&self) -> Vec<(String, &Tensor)> {
        let store = &self.model.store;
        let mut out: Vec<(String, &Tensor)> = store.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
        for (prefix, moments) in [("adam.m.", &self.optimizer.m), ("adam.v.", &self.optimizer.v)] {
            for ((_, n, _), t) in store.iter().zip(moments) {
                out.push((format!("{prefix}{n}"), t));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            model: self.model.config.clone(),
            vocab: self.model.vocab.words().to_vec(),
            train: self.train.clone(),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.stage.map_or(0, Stage::number));
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.optimizer.t.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let records = self.records();
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            t.write_to(&mut out).expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        if &read_exact::<4>(&mut r)? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(read_exact(&mut r)?);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let [stage] = read_exact::<1>(&mut r)?;
        let stage = match stage {
            0 => None,
            n => Some(Stage::try_from(n).map_err(bad)?),
        };
        let step = u64::from_le_bytes(read_exact(&mut r)?);
        let opt_t = u64::from_le_bytes(read_exact(&mut r)?);
        let json = read_block(&mut r, "metadata")?;
        let meta: Meta = serde_json::from_slice(&json).map_err(|e| bad(format!("metadata: {e}")))?;
        let vocab = Vocab::from_tokens(meta.vocab)?;
        let mut model = Model::new(meta.model.encoder.clone(), meta.model.head.clone(), vocab)?;
        if model.config != meta.model {
            return Err(bad("metadata vocab size disagrees with the stored vocabulary"));
        }
        let mut optimizer = AdamState::new(&model.store);
        optimizer.t = opt_t;

        let count = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let n = model.store.len();
        if count != 3 * n {
            return Err(bad(format!("expected {} tensor records, found {count}", 3 * n)));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for k in 0..count {
            let name = String::from_utf8(read_block(&mut r, "record name")?)
                .map_err(|_| bad("record name is not UTF-8"))?;
            let t = Tensor::read_from(&mut r).map_err(|e| bad(format!("record {name}: {e}")))?;
            let id = ids[k % n];
            let pname = model.store.name(id);
            let expected = match k / n {
                0 => pname.to_string(),
                1 => format!("adam.m.{pname}"),
                _ => format!("adam.v.{pname}"),
            };
            if name != expected {
                return Err(bad(format!("record {k} is {name:?}, expected {expected:?}")));
            }
            if t.shape() != model.store.get(id).shape() {
                return Err(bad(format!(
                    "record {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    model.store.get(id).shape()
                )));
            }
            match k / n {
                0 => model.store.set_values(id, &t)?,
                1 => optimizer.m[k % n] = t,
                _ => optimizer.v[k % n] = t,
            }
        }
        if (r.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes after the last record"));
        }
        Ok(Self {
            model,
            optimizer,
            stage,
            step,
            train: meta.train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint { reason, .. } => Error::Checkpoint {
                path: path.display().to_string(),
                reason,
            },
            other => other,
        })
    }
}
