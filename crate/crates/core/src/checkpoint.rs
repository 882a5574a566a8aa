//! Binary checkpoints: `TITK`, a format version, a JSON header holding the
//! config, mode, vocabularies and parameter layout, then raw little-endian f32s.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use titkit_tensor::Tensor;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Mode, Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"TITK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub mode: Mode,
    pub src_vocab: Option<Vec<String>>,
    pub tgt_vocab: Option<Vec<String>>,
    pub params: Vec<ParamEntry>,
}

/// A checkpoint read into memory.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Tensor<f32>>,
}

fn vocab_tokens(v: &Option<Vocabulary>) -> Option<Vec<String>> {
    v.as_ref().map(|v| v.tokens().to_vec())
}

fn vocab_from(tokens: &Option<Vec<String>>) -> Result<Option<Vocabulary>> {
    tokens.as_ref().map(|t| Vocabulary::from_tokens(t.clone())).transpose()
}

/// Serializes `model` to bytes.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config.clone(),
        mode: model.mode,
        src_vocab: vocab_tokens(&model.src_vocab),
        tgt_vocab: vocab_tokens(&model.tgt_vocab),
        params: model
            .store
            .iter()
            .map(|(_, name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.store.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in model.store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes atomically: a sibling temp file is renamed over `path`.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len());
    match end {
        Some(end) => {
            let s = &bytes[*at..end];
            *at = end;
            Ok(s)
        }
        None => Err(Error::Checkpoint("truncated file".into())),
    }
}

impl Checkpoint {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut at = 0;
        if take(bytes, &mut at, 4)? != MAGIC {
            return Err(Error::Checkpoint("not a titkit checkpoint".into()));
        }
        let version = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let len = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(take(bytes, &mut at, len)?)?;
        let mut tensors = Vec::with_capacity(header.params.len());
        for p in &header.params {
            let n: usize = p.shape.iter().product();
            let raw = take(bytes, &mut at, 4 * n)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(Tensor::new(p.shape.clone(), data));
        }
        if at != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn src_vocab(&self) -> Result<Option<Vocabulary>> {
        vocab_from(&self.header.src_vocab)
    }

    pub fn tgt_vocab(&self) -> Result<Option<Vocabulary>> {
        vocab_from(&self.header.tgt_vocab)
    }

    /// Rebuilds the model and installs every stored parameter.
    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::new(
            self.header.config.clone(),
            self.header.mode,
            self.src_vocab()?,
            self.tgt_vocab()?,
            0,
        )?;
        if model.store.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, the model layout has {}",
                self.tensors.len(),
                model.store.len()
            )));
        }
        for (entry, t) in self.header.params.iter().zip(self.tensors) {
            let pid = model
                .store
                .find(&entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", entry.name)))?;
            if model.store.get(pid).shape() != t.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {}", entry.name)));
            }
            model.store.set(pid, t);
        }
        Ok(model)
    }

    /// Copies parameters under the given component prefixes into `model`,
    /// matching by name and shape. Returns the number of tensors copied.
    pub fn load_components(&self, model: &mut Model, prefixes: &[&str]) -> Result<usize> {
        let mut copied = 0;
        for (entry, t) in self.header.params.iter().zip(&self.tensors) {
            if !prefixes.iter().any(|p| entry.name.starts_with(&format!("{p}."))) {
                continue;
            }
            if let Some(pid) = model.store.find(&entry.name) {
                if model.store.get(pid).shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("shape mismatch for {}", entry.name)));
                }
                model.store.set(pid, t.clone());
                copied += 1;
            }
        }
        Ok(copied)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    Checkpoint::read(path)?.into_model()
}
