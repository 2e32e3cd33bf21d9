//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `DKNMODEL`, a little-endian `u64` header length, a
//! JSON header (format version, config, config hash, tensor names and shapes,
//! vocabularies), then every tensor as little-endian `f64` in header order.

use super::{DknModel, Knowledge, TrainConfig};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::kcnn::KnowledgeTables;
use crate::kg::NameTable;
use crate::nn::{Init, Matrix};
use crate::util::{config_hash, write_atomic};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DKNMODEL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorSpec {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config_hash: String,
    seed: u64,
    config: TrainConfig,
    words: Vec<String>,
    entities: Option<Vec<String>>,
    tensors: Vec<TensorSpec>,
}

fn named_tensors(model: &DknModel) -> Vec<(String, &Matrix)> {
    let mut out: Vec<(String, &Matrix)> = model
        .kcnn
        .named_tensors()
        .into_iter()
        .map(|(n, m)| (format!("kcnn.{n}"), m))
        .collect();
    for (prefix, net) in [("attention", &model.attention.net), ("predictor", &model.predictor.net)] {
        for (i, (w, b)) in net.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), w));
            out.push((format!("{prefix}.{i}.bias"), b));
        }
    }
    if let Some(k) = &model.knowledge {
        out.push(("entities".into(), &k.tables.entities));
        out.push(("contexts".into(), &k.tables.contexts));
    }
    out
}

pub fn save_model(model: &DknModel, path: &Path) -> Result<()> {
    let tensors = named_tensors(model);
    let header = Header {
        format_version: FORMAT_VERSION,
        config_hash: config_hash(&model.config)?,
        seed: model.config.seed,
        config: model.config.clone(),
        words: model.words.words().to_vec(),
        entities: model
            .knowledge
            .as_ref()
            .map(|k| k.names.iter().map(|(n, _)| n.to_string()).collect()),
        tensors: tensors
            .iter()
            .map(|(name, m)| TensorSpec {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let floats: usize = tensors.iter().map(|(_, m)| m.len()).sum();
    let mut bytes = Vec::with_capacity(16 + json.len() + 8 * floats);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, m) in &tensors {
        for v in m.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("file truncated while reading {what}"))
        })?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }
}

/// Load a checkpoint. With `expected`, the stored configuration must hash
/// identically to it.
pub fn load_model(path: &Path, expected: Option<&TrainConfig>) -> Result<DknModel> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, at: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
    }
    let len = u64::from_le_bytes(r.take(8, "header length")?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(len, "header")?)
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let actual = config_hash(&header.config)?;
    if actual != header.config_hash {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: header records {} but its config hashes to {actual}",
            header.config_hash
        )));
    }
    if let Some(cfg) = expected {
        let want = config_hash(cfg)?;
        if want != actual {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {actual} (knowledge {}, mapping {}, user mode {}) vs expected {want} \
                 (knowledge {}, mapping {}, user mode {})",
                header.config.kcnn.knowledge,
                header.config.kcnn.mapping,
                header.config.user_mode,
                cfg.kcnn.knowledge,
                cfg.kcnn.mapping,
                cfg.user_mode
            )));
        }
    }

    let mut arrays = Vec::with_capacity(header.tensors.len());
    for spec in &header.tensors {
        let n = spec.rows * spec.cols;
        let raw = r.take(8 * n, &spec.name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push((spec.name.as_str(), Matrix::from_vec(spec.rows, spec.cols, data)?));
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after the last tensor", bytes.len() - r.at)));
    }

    let words = Vocab::from_words(header.words.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let knowledge = match &header.entities {
        Some(names) => {
            let find = |name: &str| {
                arrays
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, m)| m.clone())
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
            };
            let mut table = NameTable::default();
            for n in names {
                table.intern(n);
            }
            Some(Knowledge {
                names: table,
                tables: KnowledgeTables::new(find("entities")?, find("contexts")?)?,
            })
        }
        None => None,
    };
    let mut config = header.config.clone();
    config.init = Init::Zero;
    let mut model = DknModel::new(config, words, knowledge)?;
    model.config.init = header.config.init;

    let names: Vec<String> = named_tensors(&model).into_iter().map(|(n, _)| n).collect();
    if names.len() != arrays.len() || names.iter().zip(&arrays).any(|(a, (b, _))| a != b) {
        return Err(Error::Checkpoint("tensor list does not match the configured architecture".into()));
    }
    for (dst, (name, src)) in model.tensors_mut().into_iter().zip(arrays) {
        if dst.shape() != src.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, architecture expects {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        *dst = src;
    }
    Ok(model)
}
