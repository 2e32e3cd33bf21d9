use crate::Global;
use clap::Args;
use dkn_core::data::{load_logs, time_split, ClickLog, Manifest};
use dkn_core::kg::KnowledgeGraph;
use dkn_core::util::{config_hash, write_atomic};
use dkn_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};

/// Where click logs and the graph come from, and where to split them in time.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Corpus directory with logs.jsonl, triples.tsv and (optionally) manifest.json.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Click log (JSON lines); overrides the one in --data.
    #[arg(long)]
    pub logs: Option<PathBuf>,
    /// Triples TSV; overrides the one in --data.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// First test timestamp. Defaults to the manifest boundary; without either, nothing is held out.
    #[arg(long)]
    pub split_ts: Option<i64>,
    /// Drop triples whose confidence is below this value.
    #[arg(long)]
    pub min_confidence: Option<f64>,
}

pub struct Inputs {
    pub train: Vec<ClickLog>,
    pub test: Vec<ClickLog>,
    pub split_ts: Option<i64>,
    graph_path: Option<PathBuf>,
    min_confidence: Option<f64>,
}

impl DataArgs {
    pub fn resolve(&self) -> Result<Inputs> {
        let logs_path = match (&self.logs, &self.data) {
            (Some(p), _) => p.clone(),
            (None, Some(d)) => d.join("logs.jsonl"),
            (None, None) => return Err(Error::Config("pass --data DIR or --logs FILE".into())),
        };
        let logs = load_logs(&logs_path)?.logs;
        let split_ts = match (self.split_ts, &self.data) {
            (Some(ts), _) => Some(ts),
            (None, Some(d)) if d.join("manifest.json").exists() => {
                let m: Manifest = serde_json::from_slice(&std::fs::read(d.join("manifest.json"))?)?;
                Some(m.boundary_ts)
            }
            _ => None,
        };
        let (train, test) = match split_ts {
            Some(ts) => time_split(&logs, ts),
            None => (logs, Vec::new()),
        };
        let graph_path = self
            .graph
            .clone()
            .or_else(|| self.data.as_ref().map(|d| d.join("triples.tsv")));
        Ok(Inputs {
            train,
            test,
            split_ts,
            graph_path,
            min_confidence: self.min_confidence,
        })
    }

    pub fn describe(&self) -> Value {
        json!({
            "data": self.data,
            "logs": self.logs,
            "graph": self.graph,
            "split_ts": self.split_ts,
            "min_confidence": self.min_confidence,
        })
    }
}

impl Inputs {
    /// Load the graph; only called when some component actually reads knowledge.
    pub fn graph(&self) -> Result<KnowledgeGraph> {
        let path = self
            .graph_path
            .as_ref()
            .ok_or_else(|| Error::Config("this run needs a knowledge graph: pass --graph or --data".into()))?;
        KnowledgeGraph::load_tsv(path, self.min_confidence)
    }
}

/// Create the output directory and refuse to clobber any of `files` without `--force`.
pub fn prepare_out(global: &Global, files: &[&str]) -> Result<PathBuf> {
    let dir = global
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out DIR is required".into()))?;
    if !global.force {
        if let Some(f) = files.iter().find(|f| dir.join(f).exists()) {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to overwrite",
                dir.join(f).display()
            )));
        }
    }
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Settings from `--config`, or defaults. Also returns the raw JSON so callers
/// can tell which keys were given explicitly.
pub fn load_config<T: DeserializeOwned + Default>(global: &Global) -> Result<(T, Value)> {
    match &global.config {
        None => Ok((T::default(), Value::Null)),
        Some(path) => {
            let raw: Value = serde_json::from_slice(&std::fs::read(path)?)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let cfg = serde_json::from_value(raw.clone())
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            Ok((cfg, raw))
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// `config.json`: the fully resolved settings of a run and their hash.
pub fn write_resolved<T: Serialize>(dir: &Path, command: &str, config: &T, inputs: Value) -> Result<()> {
    write_json(
        &dir.join("config.json"),
        &json!({
            "command": command,
            "config_hash": config_hash(config)?,
            "config": config,
            "inputs": inputs,
        }),
    )
}
