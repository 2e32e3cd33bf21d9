//! End-to-end click model: title encoder, user aggregation and click predictor,
//! trained with Adam on the mean binary log loss.

mod checkpoint;

pub use checkpoint::{load_model, save_model, CHECKPOINT_MAGIC, FORMAT_VERSION};

use crate::attention::{
    attention_weights, predict_ctr, user_embedding, user_embedding_on_tape, AttentionParams, PredictorParams,
    UserMode, HISTORY_CAP,
};
use crate::data::{ClickLog, TitleRecord, Vocab};
use crate::error::{Error, Result};
use crate::eval;
use crate::kcnn::{EncodedTitle, KcnnConfig, KcnnParams, KnowledgeTables, PAD};
use crate::kg::{KnowledgeGraph, NameTable};
use crate::nn::{AdamConfig, AdamState, Init, Matrix, MlpVars, Tape, Var};
use crate::rng::SeedTree;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub kcnn: KcnnConfig,
    pub user_mode: UserMode,
    pub attention_hidden: usize,
    pub predictor_hidden: Vec<usize>,
    pub history_cap: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub init: Init,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kcnn: KcnnConfig::default(),
            user_mode: UserMode::Attention,
            attention_hidden: 100,
            predictor_hidden: vec![100, 50],
            history_cap: HISTORY_CAP,
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            init: Init::Random,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.kcnn.validate()?;
        if self.attention_hidden == 0 || self.predictor_hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if self.batch_size == 0 || self.history_cap == 0 {
            return Err(Error::Config("batch size and history cap must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Entity id space and frozen embedding tables handed to the click model.
#[derive(Debug, Clone)]
pub struct Knowledge {
    pub names: NameTable,
    pub tables: KnowledgeTables,
}

impl Knowledge {
    /// Entity table aligned to `graph`'s ids, with context rows averaged over one-hop neighbours.
    pub fn from_graph(graph: &KnowledgeGraph, entities: Matrix) -> Result<Self> {
        if entities.rows() != graph.entity_vocab_len() + 1 {
            return Err(Error::dim(
                "entity table",
                entities.shape(),
                (graph.entity_vocab_len() + 1, entities.cols()),
            ));
        }
        let contexts = graph.context_table(&entities)?;
        Ok(Self {
            names: graph.entity_names().clone(),
            tables: KnowledgeTables::new(entities, contexts)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DknModel {
    pub config: TrainConfig,
    pub words: Vocab,
    pub kcnn: KcnnParams,
    pub attention: AttentionParams,
    pub predictor: PredictorParams,
    /// Present only when the encoder reads knowledge.
    pub knowledge: Option<Knowledge>,
}

/// One impression with its history resolved to title indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Impression {
    pub user: String,
    /// Oldest first.
    pub history: Vec<usize>,
    pub candidate: usize,
    pub label: f64,
    pub ts: i64,
}

/// Impressions over a deduplicated title table.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub titles: Vec<EncodedTitle>,
    pub texts: Vec<String>,
    pub impressions: Vec<Impression>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: DknModel,
    pub trace: Vec<EpochMetrics>,
}

impl DknModel {
    pub fn new(config: TrainConfig, words: Vocab, knowledge: Option<Knowledge>) -> Result<Self> {
        config.validate()?;
        let knowledge = if config.kcnn.needs_tables() {
            let k = knowledge.ok_or_else(|| {
                Error::Config(format!(
                    "knowledge mode {} needs entity embeddings; run train-kge first",
                    config.kcnn.knowledge
                ))
            })?;
            if k.tables.dim() != config.kcnn.entity_dim {
                return Err(Error::Config(format!(
                    "entity embeddings have dimension {} but the encoder expects {}",
                    k.tables.dim(),
                    config.kcnn.entity_dim
                )));
            }
            if k.tables.entities.rows() != k.names.len() + 1 {
                return Err(Error::dim(
                    "entity tables vs names",
                    k.tables.entities.shape(),
                    (k.names.len() + 1, k.tables.dim()),
                ));
            }
            Some(k)
        } else {
            None
        };
        let seeds = SeedTree::new(config.seed).child("init");
        let init = config.init;
        let kcnn = KcnnParams::new(config.kcnn.clone(), words.len(), init, &mut seeds.child("kcnn").rng())?;
        let m = config.kcnn.output_dim();
        let attention = AttentionParams::new(m, config.attention_hidden, init, &mut seeds.child("attention").rng());
        let predictor = PredictorParams::new(m, &config.predictor_hidden, init, &mut seeds.child("predictor").rng());
        Ok(Self {
            config,
            words,
            kcnn,
            attention,
            predictor,
            knowledge,
        })
    }

    fn tables(&self) -> Option<&KnowledgeTables> {
        self.knowledge.as_ref().map(|k| &k.tables)
    }

    pub fn title_dim(&self) -> usize {
        self.config.kcnn.output_dim()
    }

    /// Trainable tensors in update order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = self.kcnn.tensors();
        out.extend(self.attention.net.tensors());
        out.extend(self.predictor.net.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.kcnn.tensors_mut();
        out.extend(self.attention.net.tensors_mut());
        out.extend(self.predictor.net.tensors_mut());
        out
    }

    pub fn encode_record(&self, title: &TitleRecord) -> EncodedTitle {
        let names = self.knowledge.as_ref().map(|k| &k.names);
        self.words.encode(title, names, self.config.kcnn.title_len)
    }

    /// Resolve `logs` into impressions whose histories are the clicks in
    /// `history_logs` made strictly before each impression.
    pub fn dataset(&self, history_logs: &[ClickLog], logs: &[ClickLog]) -> Dataset {
        let mut data = Dataset::default();
        let mut index: HashMap<&TitleRecord, usize> = HashMap::new();
        // user -> clicks sorted by time, ties in log order
        let mut clicks: BTreeMap<&str, Vec<(i64, usize)>> = BTreeMap::new();
        for log in history_logs.iter().filter(|l| l.label == 1) {
            let t = self.intern(&mut data, &mut index, &log.title);
            clicks.entry(&log.user).or_default().push((log.ts, t));
        }
        for list in clicks.values_mut() {
            list.sort_by_key(|&(ts, _)| ts);
        }
        for log in logs {
            let candidate = self.intern(&mut data, &mut index, &log.title);
            let history = clicks.get(log.user.as_str()).map_or_else(Vec::new, |list| {
                let end = list.partition_point(|&(ts, _)| ts < log.ts);
                let start = end.saturating_sub(self.config.history_cap);
                list[start..end].iter().map(|&(_, t)| t).collect()
            });
            data.impressions.push(Impression {
                user: log.user.clone(),
                history,
                candidate,
                label: log.label as f64,
                ts: log.ts,
            });
        }
        data
    }

    fn intern<'a>(&self, data: &mut Dataset, index: &mut HashMap<&'a TitleRecord, usize>, title: &'a TitleRecord) -> usize {
        *index.entry(title).or_insert_with(|| {
            data.titles.push(self.encode_record(title));
            data.texts.push(title.text());
            data.titles.len() - 1
        })
    }

    /// Embedding of every title in `data`, computed once each.
    pub fn encode_titles(&self, data: &Dataset) -> Result<Vec<Vec<f64>>> {
        data.titles.iter().map(|t| self.kcnn.encode(t, self.tables())).collect()
    }

    fn user_vector(&self, history: &[&[f64]], candidate: &[f64]) -> Result<Vec<f64>> {
        if history.is_empty() {
            return Ok(vec![0.0; self.title_dim()]);
        }
        let rows: Vec<Vec<f64>> = history.iter().map(|h| h.to_vec()).collect();
        user_embedding(&Matrix::from_rows(&rows)?, candidate, &self.attention, self.config.user_mode)
    }

    /// Click probability for one candidate given the user's clicked titles.
    pub fn forward(&self, history: &[EncodedTitle], candidate: &EncodedTitle) -> Result<f64> {
        let cand = self.kcnn.encode(candidate, self.tables())?;
        let hist = history
            .iter()
            .map(|t| self.kcnn.encode(t, self.tables()))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[f64]> = hist.iter().map(Vec::as_slice).collect();
        let user = self.user_vector(&refs, &cand)?;
        predict_ctr(&user, &cand, &self.predictor)
    }

    /// Probabilities for every impression of `data`.
    pub fn predict(&self, data: &Dataset) -> Result<Vec<f64>> {
        let emb = self.encode_titles(data)?;
        data.impressions
            .iter()
            .map(|imp| {
                let hist: Vec<&[f64]> = imp.history.iter().map(|&h| emb[h].as_slice()).collect();
                let cand = &emb[imp.candidate];
                let user = self.user_vector(&hist, cand)?;
                predict_ctr(&user, cand, &self.predictor)
            })
            .collect()
    }

    /// Attention weights, `clicked x candidates`; each column sums to one.
    pub fn attention_matrix(&self, history: &[EncodedTitle], candidates: &[EncodedTitle]) -> Result<Matrix> {
        if history.is_empty() {
            return Err(Error::Contract("attention needs at least one clicked title".into()));
        }
        let rows = history
            .iter()
            .map(|t| self.kcnn.encode(t, self.tables()))
            .collect::<Result<Vec<_>>>()?;
        let hist = Matrix::from_rows(&rows)?;
        let mut out = Matrix::zeros(history.len(), candidates.len());
        for (j, c) in candidates.iter().enumerate() {
            let cand = self.kcnn.encode(c, self.tables())?;
            let w = attention_weights(&hist, &cand, &self.attention)?;
            for (i, v) in w.into_iter().enumerate() {
                out.set(i, j, v);
            }
        }
        Ok(out)
    }

    /// Mean log loss of `batch` (impression indices into `data`) built on `tape`
    /// over the parameter `leaves` (one per [`Self::tensors`] entry).
    pub fn batch_loss(&self, tape: &mut Tape, leaves: &[Var], data: &Dataset, batch: &[usize]) -> Result<Var> {
        let nk = self.kcnn.tensors().len();
        let na = self.attention.net.tensors().len();
        if leaves.len() != nk + na + self.predictor.net.tensors().len() {
            return Err(Error::Contract("leaf count does not match the model".into()));
        }
        let kv = self.kcnn.attach(tape, &leaves[..nk]);
        let av = MlpVars::from_vars(&leaves[nk..nk + na]);
        let pv = MlpVars::from_vars(&leaves[nk + na..]);
        let tables = if self.config.kcnn.needs_tables() {
            self.tables().map(|t| t.bind(tape))
        } else {
            None
        };
        let mut encoded: HashMap<usize, Var> = HashMap::new();
        let mut encode = |tape: &mut Tape, t: usize| -> Result<Var> {
            if let Some(&v) = encoded.get(&t) {
                return Ok(v);
            }
            let v = kv.encode(tape, &data.titles[t], tables)?;
            encoded.insert(t, v);
            Ok(v)
        };
        let m = self.title_dim();
        let (mut users, mut cands, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        for &i in batch {
            let imp = &data.impressions[i];
            let cand = encode(tape, imp.candidate)?;
            let user = if imp.history.is_empty() {
                tape.constant(Matrix::zeros(1, m))
            } else {
                let rows = imp
                    .history
                    .iter()
                    .map(|&h| encode(tape, h))
                    .collect::<Result<Vec<_>>>()?;
                let hist = tape.concat_rows(&rows)?;
                user_embedding_on_tape(tape, &av, hist, cand, self.config.user_mode)?
            };
            users.push(user);
            cands.push(cand);
            labels.push(imp.label);
        }
        let u = tape.concat_rows(&users)?;
        let c = tape.concat_rows(&cands)?;
        let x = tape.concat_cols(&[u, c])?;
        let logits = pv.forward(tape, x)?;
        tape.logistic_loss(logits, &labels)
    }

    /// Loss and gradients for one batch; the PAD word row never receives gradient.
    pub fn batch_gradients(&self, data: &Dataset, batch: &[usize]) -> Result<(f64, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = self.tensors().into_iter().map(|t| tape.param(t.clone())).collect();
        let loss = self.batch_loss(&mut tape, &leaves, data, batch)?;
        let mut grads = tape.backward(loss)?;
        let mut out: Vec<Matrix> = leaves.iter().map(|&v| grads.take_or_zeros(v, &tape)).collect();
        out[0].row_mut(PAD).fill(0.0);
        Ok((tape.scalar_value(loss), out))
    }
}

/// Train a click model on `train_logs`. The word vocabulary comes from the
/// training logs only; `validation` logs (if any) are scored after every epoch.
pub fn train(
    train_logs: &[ClickLog],
    knowledge: Option<Knowledge>,
    config: &TrainConfig,
    validation: Option<&[ClickLog]>,
) -> Result<Trained> {
    config.validate()?;
    if train_logs.is_empty() {
        return Err(Error::Dataset("no training impressions".into()));
    }
    let mut model = DknModel::new(config.clone(), Vocab::build(train_logs), knowledge)?;
    let data = model.dataset(train_logs, train_logs);
    let val = validation.map(|v| model.dataset(train_logs, v));
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        &model.tensors(),
    );
    let shuffle = SeedTree::new(config.seed).child("shuffle");
    let mut order: Vec<usize> = (0..data.impressions.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle.child_index(epoch as u64).rng());
        let mut total = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let (loss, grads) = model.batch_gradients(&data, batch).map_err(|e| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("{msg} in epoch {epoch}, batch {b} (impressions {batch:?})"))
                }
                other => other,
            })?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite loss or gradient in epoch {epoch}, batch {b} (impressions {batch:?})"
                )));
            }
            adam.step(&mut model.tensors_mut(), &grads)?;
            total += loss * batch.len() as f64;
        }
        let train_loss = total / data.impressions.len() as f64;
        let val_auc = match &val {
            Some(v) => scored_auc(&model, v)?,
            None => None,
        };
        log::info!(
            "epoch {epoch}: train loss {train_loss:.5}{}",
            val_auc.map_or(String::new(), |a| format!(", val auc {a:.4}"))
        );
        trace.push(EpochMetrics {
            epoch,
            train_loss,
            val_auc,
        });
    }
    Ok(Trained { model, trace })
}

fn scored_auc(model: &DknModel, data: &Dataset) -> Result<Option<f64>> {
    let scored = score(model, data)?;
    match eval::auc(&scored) {
        Ok(a) => Ok(Some(a)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Predictions paired with labels and timestamps.
pub fn score(model: &DknModel, data: &Dataset) -> Result<Vec<eval::ScoredImpression>> {
    let probs = model.predict(data)?;
    Ok(probs
        .into_iter()
        .zip(&data.impressions)
        .map(|(p, imp)| eval::ScoredImpression {
            prob: p,
            label: imp.label as u8,
            ts: imp.ts,
        })
        .collect())
}
