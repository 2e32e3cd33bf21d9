//! Knowledge-aware CNN title encoder.
//!
//! A title of `n` positions is turned into up to three aligned channels, each
//! `n x d` with one row per position: word embeddings, transformed entity
//! embeddings and transformed context embeddings. Row `i` of every channel
//! belongs to token `i`. The channels are convolved jointly by filters of several
//! widths, passed through `tanh`, max-pooled over positions and concatenated.

use crate::error::{Error, Result};
use crate::kg::EntityId;
use crate::nn::{ops, Init, Matrix, Tape, Var};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Padding word id; its embedding row is pinned to zero.
pub const PAD: usize = 0;
/// Unknown-word id.
pub const UNK: usize = 1;

/// Which knowledge channels feed the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnowledgeMode {
    None,
    Entity,
    Context,
    Both,
}

impl KnowledgeMode {
    pub fn uses_entities(self) -> bool {
        matches!(self, KnowledgeMode::Entity | KnowledgeMode::Both)
    }

    pub fn uses_contexts(self) -> bool {
        matches!(self, KnowledgeMode::Context | KnowledgeMode::Both)
    }

    pub fn channels(self) -> usize {
        1 + self.uses_entities() as usize + self.uses_contexts() as usize
    }
}

/// Map `g` from entity space into word space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mapping {
    /// Entity vectors are used as-is (requires `d == k`).
    None,
    /// `g(e) = M e`.
    Linear,
    /// `g(e) = tanh(M e + b)`.
    Nonlinear,
}

/// Title encoder family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoder {
    /// Multi-channel aligned encoder.
    Kcnn,
    /// Single-channel CNN over the words followed by the title's entities as extra positions.
    Concat,
}

macro_rules! text_enum {
    ($ty:ty, $what:literal, $($name:literal => $variant:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", $what, " {:?}; expected one of: {}"),
                        other,
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let name = match self {
                    $(v if *v == $variant => $name,)+
                    _ => unreachable!(),
                };
                f.write_str(name)
            }
        }
    };
}
pub(crate) use text_enum;

text_enum!(KnowledgeMode, "knowledge mode",
    "none" => KnowledgeMode::None,
    "entity" => KnowledgeMode::Entity,
    "context" => KnowledgeMode::Context,
    "both" => KnowledgeMode::Both,
);
text_enum!(Mapping, "mapping",
    "none" => Mapping::None,
    "linear" => Mapping::Linear,
    "nonlinear" => Mapping::Nonlinear,
);
text_enum!(Encoder, "encoder",
    "kcnn" => Encoder::Kcnn,
    "concat" => Encoder::Concat,
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KcnnConfig {
    pub word_dim: usize,
    pub entity_dim: usize,
    pub title_len: usize,
    pub windows: Vec<usize>,
    /// Filters per window size.
    pub filters: usize,
    pub knowledge: KnowledgeMode,
    pub mapping: Mapping,
    /// One `(M, b)` pair for both knowledge channels instead of one each.
    pub shared_transform: bool,
    pub encoder: Encoder,
}

impl Default for KcnnConfig {
    fn default() -> Self {
        Self {
            word_dim: 100,
            entity_dim: 100,
            title_len: 16,
            windows: vec![1, 2, 3, 4],
            filters: 100,
            knowledge: KnowledgeMode::Both,
            mapping: Mapping::Nonlinear,
            shared_transform: false,
            encoder: Encoder::Kcnn,
        }
    }
}

impl KcnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.word_dim == 0 || self.entity_dim == 0 || self.filters == 0 || self.title_len == 0 {
            return Err(Error::Config("dimensions, filter count and title length must be positive".into()));
        }
        if self.windows.is_empty() {
            return Err(Error::Config("at least one window size is required".into()));
        }
        if let Some(&l) = self.windows.iter().find(|&&l| l == 0 || l > self.title_len) {
            return Err(Error::Config(format!(
                "window size {l} does not fit title length {}",
                self.title_len
            )));
        }
        match self.encoder {
            Encoder::Concat => {
                if self.word_dim != self.entity_dim {
                    return Err(Error::Config(format!(
                        "the concat encoder appends entity vectors as extra words, so word and entity \
                         dimensions must be equal (got d={} and k={})",
                        self.word_dim, self.entity_dim
                    )));
                }
            }
            Encoder::Kcnn => {
                if self.knowledge == KnowledgeMode::None && self.mapping != Mapping::None {
                    return Err(Error::Config(format!(
                        "mapping {} transforms entity vectors and needs a knowledge mode other than none",
                        self.mapping
                    )));
                }
                if self.knowledge != KnowledgeMode::None
                    && self.mapping == Mapping::None
                    && self.word_dim != self.entity_dim
                {
                    return Err(Error::Config(format!(
                        "without a mapping entity vectors enter the word space directly, so d={} must equal k={}",
                        self.word_dim, self.entity_dim
                    )));
                }
            }
        }
        Ok(())
    }

    /// Width of the title embedding.
    pub fn output_dim(&self) -> usize {
        self.filters * self.windows.len()
    }

    fn channels(&self) -> usize {
        match self.encoder {
            Encoder::Kcnn => self.knowledge.channels(),
            Encoder::Concat => 1,
        }
    }

    /// Whether the encoder reads the entity/context tables at all.
    pub fn needs_tables(&self) -> bool {
        match self.encoder {
            Encoder::Kcnn => self.knowledge != KnowledgeMode::None,
            Encoder::Concat => true,
        }
    }

    fn has_transform(&self) -> bool {
        self.encoder == Encoder::Kcnn && self.knowledge != KnowledgeMode::None && self.mapping != Mapping::None
    }
}

/// Word ids and aligned entity ids of one title, padded to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EncodedTitle {
    words: Vec<usize>,
    entities: Vec<EntityId>,
}

impl EncodedTitle {
    pub fn new(words: Vec<usize>, entities: Vec<EntityId>) -> Result<Self> {
        if words.len() != entities.len() {
            return Err(Error::Contract(format!(
                "title has {} words but {} entity slots",
                words.len(),
                entities.len()
            )));
        }
        Ok(Self { words, entities })
    }

    /// Truncate (keeping the prefix) or right-pad with [`PAD`] to length `n`.
    pub fn padded(mut words: Vec<usize>, mut entities: Vec<EntityId>, n: usize) -> Result<Self> {
        if words.len() != entities.len() {
            return Self::new(words, entities);
        }
        words.resize(n, PAD);
        entities.resize(n, EntityId::NONE);
        Ok(Self { words, entities })
    }

    pub fn words(&self) -> &[usize] {
        &self.words
    }

    pub fn entities(&self) -> &[EntityId] {
        &self.entities
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Entities present in the title, in position order.
    pub fn linked_entities(&self) -> Vec<EntityId> {
        self.entities.iter().copied().filter(|e| *e != EntityId::NONE).collect()
    }

    fn entity_rows(&self) -> Vec<usize> {
        self.entities.iter().map(|e| e.index()).collect()
    }
}

/// Frozen entity and context embedding tables, indexed by entity id (row 0 = none).
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeTables {
    pub entities: Matrix,
    pub contexts: Matrix,
}

impl KnowledgeTables {
    pub fn new(entities: Matrix, contexts: Matrix) -> Result<Self> {
        if entities.shape() != contexts.shape() {
            return Err(Error::dim("knowledge tables", entities.shape(), contexts.shape()));
        }
        if entities.rows() == 0 {
            return Err(Error::Contract("knowledge tables need the reserved row 0".into()));
        }
        Ok(Self { entities, contexts })
    }

    pub fn dim(&self) -> usize {
        self.entities.cols()
    }

    pub fn bind(&self, tape: &mut Tape) -> TableVars {
        TableVars {
            entities: tape.constant(self.entities.clone()),
            contexts: tape.constant(self.contexts.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TableVars {
    pub entities: Var,
    pub contexts: Var,
}

/// `g`'s parameters: `m` is `d x k`, `b` is `1 x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transform {
    pub m: Matrix,
    pub b: Matrix,
}

/// Apply `g` to a single entity vector.
pub fn transform(mapping: Mapping, m: &Matrix, b: &Matrix, e: &[f64]) -> Result<Vec<f64>> {
    if mapping == Mapping::None {
        return Ok(e.to_vec());
    }
    if m.cols() != e.len() {
        return Err(Error::dim("transform", m.shape(), (e.len(), 1)));
    }
    if b.len() != m.rows() {
        return Err(Error::dim("transform bias", b.shape(), (1, m.rows())));
    }
    Ok((0..m.rows())
        .map(|r| {
            let me = ops::dot(m.row(r), e);
            match mapping {
                Mapping::Linear => me,
                _ => (me + b.data()[r]).tanh(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KcnnParams {
    pub config: KcnnConfig,
    /// `|V| x d`, row [`PAD`] fixed at zero.
    pub words: Matrix,
    /// Transform for the entity channel, or for both channels when shared.
    pub entity_transform: Option<Transform>,
    pub context_transform: Option<Transform>,
    /// Per window size: filter bank `m x (l * C * d)` and bias `1 x m`.
    pub filters: Vec<(Matrix, Matrix)>,
}

impl KcnnParams {
    pub fn new(config: KcnnConfig, vocab_len: usize, init: Init, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if vocab_len < 2 {
            return Err(Error::Config("word vocabulary must hold at least PAD and UNK".into()));
        }
        let (d, k) = (config.word_dim, config.entity_dim);
        let zero = init == Init::Zero;
        let mut words = if zero {
            Matrix::zeros(vocab_len, d)
        } else {
            Matrix::uniform(vocab_len, d, 0.1, rng)
        };
        words.row_mut(PAD).fill(0.0);
        let mut make_transform = || Transform {
            m: if zero { Matrix::zeros(d, k) } else { Matrix::xavier(d, k, rng) },
            b: Matrix::zeros(1, d),
        };
        let (mut entity_transform, mut context_transform) = (None, None);
        if config.has_transform() {
            let kn = config.knowledge;
            if config.shared_transform || kn.uses_entities() {
                entity_transform = Some(make_transform());
            }
            if !config.shared_transform && kn.uses_contexts() {
                context_transform = Some(make_transform());
            }
        }
        let c = config.channels();
        let filters = config
            .windows
            .iter()
            .map(|&l| {
                let w = if zero {
                    Matrix::zeros(config.filters, l * c * d)
                } else {
                    let bound = (6.0 / (l * c * d + config.filters) as f64).sqrt();
                    Matrix::uniform(config.filters, l * c * d, bound, rng)
                };
                (w, Matrix::zeros(1, config.filters))
            })
            .collect();
        Ok(Self {
            config,
            words,
            entity_transform,
            context_transform,
            filters,
        })
    }

    pub fn vocab_len(&self) -> usize {
        self.words.rows()
    }

    fn context_transform_ref(&self) -> Option<&Transform> {
        if self.config.shared_transform {
            self.entity_transform.as_ref()
        } else {
            self.context_transform.as_ref()
        }
    }

    /// Trainable tensors in a fixed order, with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("words".to_string(), &self.words)];
        for (tag, t) in [("entity", &self.entity_transform), ("context", &self.context_transform)] {
            if let Some(t) = t {
                out.push((format!("{tag}_m"), &t.m));
                out.push((format!("{tag}_b"), &t.b));
            }
        }
        for (i, (w, b)) in self.filters.iter().enumerate() {
            let l = self.config.windows[i];
            out.push((format!("filters_w{l}"), w));
            out.push((format!("bias_w{l}"), b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.words];
        for t in [&mut self.entity_transform, &mut self.context_transform].into_iter().flatten() {
            out.push(&mut t.m);
            out.push(&mut t.b);
        }
        for (w, b) in &mut self.filters {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.named_tensors().into_iter().map(|(_, m)| m).collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> KcnnVars {
        let leaves: Vec<Var> = self.tensors().into_iter().map(|m| tape.param(m.clone())).collect();
        self.attach(tape, &leaves)
    }

    /// Tape handles over existing leaves, one per tensor in [`Self::tensors`] order.
    pub fn attach(&self, tape: &mut Tape, leaves: &[Var]) -> KcnnVars {
        let mut it = leaves.iter().copied();
        let words = it.next().expect("word table leaf");
        let mut take = |t: &Option<Transform>, tape: &mut Tape| {
            t.as_ref().map(|_| {
                let m = it.next().expect("transform leaf");
                let b = it.next().expect("transform leaf");
                (tape.transpose(m), b)
            })
        };
        let entity = take(&self.entity_transform, tape);
        let context = take(&self.context_transform, tape);
        let context = if self.config.shared_transform { entity } else { context };
        let filters = self
            .filters
            .iter()
            .map(|_| (it.next().expect("filter leaf"), it.next().expect("bias leaf")))
            .collect();
        KcnnVars {
            config: self.config.clone(),
            words,
            entity,
            context,
            filters,
            params: leaves.to_vec(),
        }
    }

    fn check_title(&self, title: &EncodedTitle) -> Result<()> {
        if title.len() != self.config.title_len {
            return Err(Error::Contract(format!(
                "title of length {} given to an encoder for length {}",
                title.len(),
                self.config.title_len
            )));
        }
        if let Some(&w) = title.words().iter().find(|&&w| w >= self.vocab_len()) {
            return Err(Error::Lookup(format!(
                "word id {w} outside vocabulary of {} (unknown words must map to UNK)",
                self.vocab_len()
            )));
        }
        Ok(())
    }

    /// Title embedding with frozen parameters, dispatching on the configured encoder.
    pub fn encode(&self, title: &EncodedTitle, tables: Option<&KnowledgeTables>) -> Result<Vec<f64>> {
        match self.config.encoder {
            Encoder::Kcnn => encode_title(&build_title_tensor(title, self, tables)?, self),
            Encoder::Concat => encode_title_concat(title, self, tables),
        }
    }
}

fn table_row<'a>(table: &'a Matrix, e: EntityId, what: &str) -> Result<&'a [f64]> {
    if e.index() >= table.rows() {
        return Err(Error::Lookup(format!("{what} table has no row for entity {}", e.0)));
    }
    Ok(table.row(e.index()))
}

fn require_tables(tables: Option<&KnowledgeTables>) -> Result<&KnowledgeTables> {
    tables.ok_or_else(|| Error::Contract("encoder needs entity tables but none were supplied".into()))
}

/// The aligned input channels of one title, each `n x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct TitleTensor {
    pub words: Matrix,
    pub entities: Option<Matrix>,
    pub contexts: Option<Matrix>,
}

impl TitleTensor {
    pub fn channels(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.words];
        out.extend(self.entities.as_ref());
        out.extend(self.contexts.as_ref());
        out
    }
}

/// Assemble the channels for `title`; position `i` of every channel belongs to token `i`.
pub fn build_title_tensor(
    title: &EncodedTitle,
    params: &KcnnParams,
    tables: Option<&KnowledgeTables>,
) -> Result<TitleTensor> {
    params.check_title(title)?;
    let cfg = &params.config;
    let (n, d) = (title.len(), cfg.word_dim);
    let mut words = Matrix::zeros(n, d);
    for (i, &w) in title.words().iter().enumerate() {
        words.row_mut(i).copy_from_slice(params.words.row(w));
    }
    let channel = |table: &Matrix, t: Option<&Transform>, what: &str| -> Result<Matrix> {
        let mut out = Matrix::zeros(n, d);
        for (i, &e) in title.entities().iter().enumerate() {
            let raw = table_row(table, e, what)?;
            let mapped = match t {
                Some(t) => transform(cfg.mapping, &t.m, &t.b, raw)?,
                None => raw.to_vec(),
            };
            if mapped.len() != d {
                return Err(Error::dim("title tensor channel", (1, mapped.len()), (1, d)));
            }
            out.row_mut(i).copy_from_slice(&mapped);
        }
        Ok(out)
    };
    let mut tensor = TitleTensor {
        words,
        entities: None,
        contexts: None,
    };
    if cfg.knowledge.uses_entities() {
        let tables = require_tables(tables)?;
        tensor.entities = Some(channel(&tables.entities, params.entity_transform.as_ref(), "entity")?);
    }
    if cfg.knowledge.uses_contexts() {
        let tables = require_tables(tables)?;
        tensor.contexts = Some(channel(&tables.contexts, params.context_transform_ref(), "context")?);
    }
    Ok(tensor)
}

fn pooled_features(channels: &[&Matrix], params: &KcnnParams) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(params.config.output_dim());
    for (&l, (w, b)) in params.config.windows.iter().zip(&params.filters) {
        let maps = ops::conv_valid(channels, w, b, l)?.map(f64::tanh);
        let mut column = vec![0.0; maps.rows()];
        for f in 0..maps.cols() {
            for (i, c) in column.iter_mut().enumerate() {
                *c = maps.get(i, f);
            }
            out.push(ops::max_over_time(&column)?.0);
        }
    }
    Ok(out)
}

/// Convolve, `tanh`, max-pool and concatenate; filter order follows the window list.
pub fn encode_title(tensor: &TitleTensor, params: &KcnnParams) -> Result<Vec<f64>> {
    let channels = tensor.channels();
    if channels.len() != params.config.channels() {
        return Err(Error::Contract(format!(
            "tensor has {} channels, filters expect {}",
            channels.len(),
            params.config.channels()
        )));
    }
    pooled_features(&channels, params)
}

/// Single-channel encoding of the words followed by the title's entity vectors.
pub fn encode_title_concat(
    title: &EncodedTitle,
    params: &KcnnParams,
    tables: Option<&KnowledgeTables>,
) -> Result<Vec<f64>> {
    if params.config.encoder != Encoder::Concat {
        return Err(Error::Config("parameters were built for the multi-channel encoder".into()));
    }
    params.config.validate()?;
    params.check_title(title)?;
    let tables = require_tables(tables)?;
    let linked = title.linked_entities();
    let d = params.config.word_dim;
    let mut seq = Matrix::zeros(title.len() + linked.len(), d);
    for (i, &w) in title.words().iter().enumerate() {
        seq.row_mut(i).copy_from_slice(params.words.row(w));
    }
    for (j, &e) in linked.iter().enumerate() {
        let row = table_row(&tables.entities, e, "entity")?;
        if row.len() != d {
            return Err(Error::dim("concat entity row", (1, row.len()), (1, d)));
        }
        seq.row_mut(title.len() + j).copy_from_slice(row);
    }
    pooled_features(&[&seq], params)
}

/// Tape handles for [`KcnnParams`].
#[derive(Debug, Clone)]
pub struct KcnnVars {
    config: KcnnConfig,
    words: Var,
    /// `(M^T, b)` per knowledge channel.
    entity: Option<(Var, Var)>,
    context: Option<(Var, Var)>,
    filters: Vec<(Var, Var)>,
    params: Vec<Var>,
}

impl KcnnVars {
    /// Parameter leaves in [`KcnnParams::tensors`] order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    fn map(&self, tape: &mut Tape, raw: Var, t: Option<(Var, Var)>) -> Result<Var> {
        match (self.config.mapping, t) {
            (Mapping::None, _) | (_, None) => Ok(raw),
            (Mapping::Linear, Some((mt, _))) => tape.matmul(raw, mt),
            (Mapping::Nonlinear, Some((mt, b))) => {
                let z = tape.matmul(raw, mt)?;
                let z = tape.add_row(z, b)?;
                Ok(tape.tanh(z))
            }
        }
    }

    fn pool(&self, tape: &mut Tape, channels: &[Var]) -> Result<Var> {
        let mut pooled = Vec::with_capacity(self.filters.len());
        for (&l, &(w, b)) in self.config.windows.iter().zip(&self.filters) {
            let maps = tape.conv(channels, w, b, l)?;
            let act = tape.tanh(maps);
            pooled.push(tape.max_pool(act)?);
        }
        tape.concat_cols(&pooled)
    }

    /// `1 x output_dim` embedding of one title.
    pub fn encode(&self, tape: &mut Tape, title: &EncodedTitle, tables: Option<TableVars>) -> Result<Var> {
        if title.len() != self.config.title_len {
            return Err(Error::Contract(format!(
                "title of length {} given to an encoder for length {}",
                title.len(),
                self.config.title_len
            )));
        }
        let words = tape.gather(self.words, title.words())?;
        let need = || tables.ok_or_else(|| Error::Contract("encoder needs entity tables".into()));
        match self.config.encoder {
            Encoder::Kcnn => {
                let mut channels = vec![words];
                if self.config.knowledge.uses_entities() {
                    let raw = tape.gather(need()?.entities, &title.entity_rows())?;
                    channels.push(self.map(tape, raw, self.entity)?);
                }
                if self.config.knowledge.uses_contexts() {
                    let raw = tape.gather(need()?.contexts, &title.entity_rows())?;
                    channels.push(self.map(tape, raw, self.context)?);
                }
                self.pool(tape, &channels)
            }
            Encoder::Concat => {
                let linked: Vec<usize> = title.linked_entities().iter().map(|e| e.index()).collect();
                let seq = if linked.is_empty() {
                    words
                } else {
                    let ents = tape.gather(need()?.entities, &linked)?;
                    tape.concat_rows(&[words, ents])?
                };
                self.pool(tape, &[seq])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::KnowledgeGraph;
    use crate::nn::check_gradients;
    use crate::rng::SeedTree;
    use rand::Rng as _;

    fn small_config(knowledge: KnowledgeMode, mapping: Mapping) -> KcnnConfig {
        KcnnConfig {
            word_dim: 4,
            entity_dim: 3,
            title_len: 5,
            windows: vec![1, 2],
            filters: 3,
            knowledge,
            mapping,
            shared_transform: false,
            encoder: Encoder::Kcnn,
        }
    }

    fn randomize(params: &mut KcnnParams, rng: &mut Rng) {
        for t in params.tensors_mut() {
            *t = Matrix::uniform(t.rows(), t.cols(), 0.8, rng);
        }
        params.words.row_mut(PAD).fill(0.0);
    }

    fn tables(rng: &mut Rng, entities: usize, k: usize) -> KnowledgeTables {
        let mut e = Matrix::uniform(entities + 1, k, 1.0, rng);
        let mut c = Matrix::uniform(entities + 1, k, 1.0, rng);
        e.row_mut(0).fill(0.0);
        c.row_mut(0).fill(0.0);
        KnowledgeTables::new(e, c).unwrap()
    }

    fn random_title(rng: &mut Rng, n: usize, vocab: usize, entities: usize) -> EncodedTitle {
        let words = (0..n).map(|_| rng.gen_range(0..vocab)).collect();
        let ents = (0..n)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    EntityId(rng.gen_range(1..=entities as u32))
                } else {
                    EntityId::NONE
                }
            })
            .collect();
        EncodedTitle::new(words, ents).unwrap()
    }

    #[test]
    fn transform_cases() {
        let mut rng = SeedTree::new(1).rng();
        let e = [0.3, -2.0, 1.5];
        let zero = transform(Mapping::Nonlinear, &Matrix::zeros(2, 3), &Matrix::zeros(1, 2), &e).unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);
        let id = transform(Mapping::Linear, &Matrix::identity(3), &Matrix::zeros(1, 3), &e).unwrap();
        assert_eq!(id, e.to_vec());
        let m = Matrix::uniform(4, 3, 1.0, &mut rng);
        let b = Matrix::uniform(1, 4, 1.0, &mut rng);
        let got = transform(Mapping::Nonlinear, &m, &b, &e).unwrap();
        for r in 0..4 {
            let mut s = b.get(0, r);
            for c in 0..3 {
                s += m.get(r, c) * e[c];
            }
            assert!((got[r] - s.tanh()).abs() < 1e-15);
            assert!(got[r].abs() < 1.0);
        }
        let err = transform(Mapping::Linear, &m, &b, &[1.0, 2.0]).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config(KnowledgeMode::None, Mapping::Linear);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.mapping = Mapping::None;
        cfg.validate().unwrap();
        cfg.knowledge = KnowledgeMode::Both;
        assert!(cfg.validate().is_err(), "d != k without mapping");
        cfg.mapping = Mapping::Nonlinear;
        cfg.windows = vec![6];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.windows = vec![1];
        cfg.encoder = Encoder::Concat;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("d=4") && msg.contains("k=3"), "{msg}");
        assert_eq!(KcnnConfig::default().output_dim(), 400);
    }

    #[test]
    fn ragged_titles_cannot_be_built() {
        assert!(EncodedTitle::new(vec![2, 3], vec![EntityId::NONE]).is_err());
        assert!(EncodedTitle::padded(vec![2, 3], vec![EntityId::NONE], 4).is_err());
        let t = EncodedTitle::padded(vec![2, 3, 4], vec![EntityId(1); 3], 2).unwrap();
        assert_eq!(t.words(), &[2, 3]);
        let t = EncodedTitle::padded(vec![2], vec![EntityId(1)], 3).unwrap();
        assert_eq!(t.words(), &[2, PAD, PAD]);
        assert_eq!(t.entities(), &[EntityId(1), EntityId::NONE, EntityId::NONE]);
    }

    #[test]
    fn entity_free_title_gets_g_of_zero() {
        let mut rng = SeedTree::new(2).rng();
        let mut p = KcnnParams::new(small_config(KnowledgeMode::Both, Mapping::Nonlinear), 6, Init::Random, &mut rng).unwrap();
        randomize(&mut p, &mut rng);
        let tb = tables(&mut rng, 3, 3);
        let title = EncodedTitle::new(vec![2, 3, 0, 0, 0], vec![EntityId::NONE; 5]).unwrap();
        let tensor = build_title_tensor(&title, &p, Some(&tb)).unwrap();
        let eb = &p.entity_transform.as_ref().unwrap().b;
        let cb = &p.context_transform.as_ref().unwrap().b;
        for i in 0..5 {
            for j in 0..4 {
                assert_eq!(tensor.entities.as_ref().unwrap().get(i, j), eb.get(0, j).tanh());
                assert_eq!(tensor.contexts.as_ref().unwrap().get(i, j), cb.get(0, j).tanh());
            }
        }
    }

    #[test]
    fn single_neighbour_context_column() {
        let mut rng = SeedTree::new(3).rng();
        let g = KnowledgeGraph::from_named(&[("a", "r", "b")]);
        let ent = {
            let mut m = Matrix::uniform(3, 3, 1.0, &mut rng);
            m.row_mut(0).fill(0.0);
            m
        };
        let ctx = g.context_table(&ent).unwrap();
        let tb = KnowledgeTables::new(ent.clone(), ctx).unwrap();
        let mut p = KcnnParams::new(small_config(KnowledgeMode::Context, Mapping::Linear), 4, Init::Random, &mut rng).unwrap();
        randomize(&mut p, &mut rng);
        let a = g.entity_id("a").unwrap();
        let b = g.entity_id("b").unwrap();
        let title = EncodedTitle::padded(vec![2], vec![a], 5).unwrap();
        let tensor = build_title_tensor(&title, &p, Some(&tb)).unwrap();
        let t = p.context_transform.as_ref().unwrap();
        let expect = transform(Mapping::Linear, &t.m, &t.b, ent.row(b.index())).unwrap();
        assert_eq!(tensor.contexts.as_ref().unwrap().row(0), expect.as_slice());
        assert!(tensor.entities.is_none());
    }

    #[test]
    fn tensor_matches_per_column_assembly() {
        let mut rng = SeedTree::new(4).rng();
        let mut cfg = small_config(KnowledgeMode::Both, Mapping::Nonlinear);
        cfg.shared_transform = true;
        let mut p = KcnnParams::new(cfg, 7, Init::Random, &mut rng).unwrap();
        randomize(&mut p, &mut rng);
        assert!(p.context_transform.is_none());
        let tb = tables(&mut rng, 5, 3);
        let title = random_title(&mut rng, 5, 7, 5);
        let tensor = build_title_tensor(&title, &p, Some(&tb)).unwrap();
        let t = p.entity_transform.as_ref().unwrap();
        for i in 0..5 {
            let e = title.entities()[i].index();
            assert_eq!(tensor.words.row(i), p.words.row(title.words()[i]));
            for (table, ch) in [(&tb.entities, &tensor.entities), (&tb.contexts, &tensor.contexts)] {
                for r in 0..4 {
                    let mut s = t.b.get(0, r);
                    for c in 0..3 {
                        s += t.m.get(r, c) * table.get(e, c);
                    }
                    assert!((ch.as_ref().unwrap().get(i, r) - s.tanh()).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn unknown_word_is_lookup_error() {
        let mut rng = SeedTree::new(5).rng();
        let p = KcnnParams::new(small_config(KnowledgeMode::None, Mapping::None), 4, Init::Random, &mut rng).unwrap();
        let title = EncodedTitle::padded(vec![9], vec![EntityId::NONE], 5).unwrap();
        assert!(matches!(p.encode(&title, None), Err(Error::Lookup(_))));
    }

    #[test]
    fn zero_tensor_zero_embedding() {
        let mut rng = SeedTree::new(6).rng();
        let p = KcnnParams::new(small_config(KnowledgeMode::Both, Mapping::Linear), 4, Init::Random, &mut rng).unwrap();
        let tensor = TitleTensor {
            words: Matrix::zeros(5, 4),
            entities: Some(Matrix::zeros(5, 4)),
            contexts: Some(Matrix::zeros(5, 4)),
        };
        let out = encode_title(&tensor, &p).unwrap();
        assert_eq!(out, vec![0.0; 6]);
    }

    #[test]
    fn full_width_window_single_feature() {
        let mut rng = SeedTree::new(7).rng();
        let mut cfg = small_config(KnowledgeMode::None, Mapping::None);
        cfg.windows = vec![5];
        cfg.filters = 1;
        let mut p = KcnnParams::new(cfg, 5, Init::Random, &mut rng).unwrap();
        randomize(&mut p, &mut rng);
        let words = Matrix::uniform(5, 4, 1.0, &mut rng);
        let tensor = TitleTensor {
            words: words.clone(),
            entities: None,
            contexts: None,
        };
        let out = encode_title(&tensor, &p).unwrap();
        let (w, b) = &p.filters[0];
        let expect = (ops::dot(w.data(), words.data()) + b.get(0, 0)).tanh();
        assert_eq!(out.len(), 1);
        assert!((out[0] - expect).abs() < 1e-14);
    }

    fn brute_force(tensor: &TitleTensor, p: &KcnnParams) -> Vec<f64> {
        let chans = tensor.channels();
        let (n, d) = chans[0].shape();
        let mut out = Vec::new();
        for (&l, (w, b)) in p.config.windows.iter().zip(&p.filters) {
            for f in 0..w.rows() {
                let mut best = f64::NEG_INFINITY;
                for i in 0..=n - l {
                    let mut s = b.get(0, f);
                    for j in 0..l {
                        for (c, ch) in chans.iter().enumerate() {
                            for q in 0..d {
                                s += w.get(f, (j * chans.len() + c) * d + q) * ch.get(i + j, q);
                            }
                        }
                    }
                    best = best.max(s.tanh());
                }
                out.push(best);
            }
        }
        out
    }

    #[test]
    fn encode_matches_brute_force_and_tape() {
        let mut rng = SeedTree::new(8).rng();
        for knowledge in [KnowledgeMode::None, KnowledgeMode::Entity, KnowledgeMode::Context, KnowledgeMode::Both] {
            let mapping = if knowledge == KnowledgeMode::None { Mapping::None } else { Mapping::Nonlinear };
            let mut p = KcnnParams::new(small_config(knowledge, mapping), 8, Init::Random, &mut rng).unwrap();
            randomize(&mut p, &mut rng);
            let tb = tables(&mut rng, 4, 3);
            let title = random_title(&mut rng, 5, 8, 4);
            let tensor = build_title_tensor(&title, &p, Some(&tb)).unwrap();
            let direct = encode_title(&tensor, &p).unwrap();
            let oracle = brute_force(&tensor, &p);
            for (a, b) in direct.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape);
            let tv = tb.bind(&mut tape);
            let y = vars.encode(&mut tape, &title, Some(tv)).unwrap();
            assert_eq!(tape.value(y).data(), direct.as_slice());
        }
    }

    #[test]
    fn concat_encoder_cases() {
        let mut rng = SeedTree::new(9).rng();
        let mut cfg = small_config(KnowledgeMode::Entity, Mapping::None);
        cfg.entity_dim = 4;
        cfg.encoder = Encoder::Concat;
        let mut p = KcnnParams::new(cfg.clone(), 6, Init::Random, &mut rng).unwrap();
        randomize(&mut p, &mut rng);
        let tb = tables(&mut rng, 3, 4);
        // no entities: plain single-channel CNN over the words
        let plain = EncodedTitle::new(vec![2, 3, 4, 5, 0], vec![EntityId::NONE; 5]).unwrap();
        let got = encode_title_concat(&plain, &p, Some(&tb)).unwrap();
        let kim = KcnnParams {
            config: KcnnConfig {
                encoder: Encoder::Kcnn,
                knowledge: KnowledgeMode::None,
                ..cfg.clone()
            },
            ..p.clone()
        };
        assert_eq!(got, kim.encode(&plain, None).unwrap());
        // with entities the sequence grows by the number of linked positions
        let linked = EncodedTitle::new(vec![2, 3, 4, 5, 0], vec![EntityId(2), EntityId::NONE, EntityId(3), EntityId::NONE, EntityId::NONE]).unwrap();
        let got = encode_title_concat(&linked, &p, Some(&tb)).unwrap();
        let mut seq = Matrix::zeros(7, 4);
        for i in 0..5 {
            seq.row_mut(i).copy_from_slice(p.words.row(linked.words()[i]));
        }
        seq.row_mut(5).copy_from_slice(tb.entities.row(2));
        seq.row_mut(6).copy_from_slice(tb.entities.row(3));
        let oracle = brute_force(
            &TitleTensor {
                words: seq,
                entities: None,
                contexts: None,
            },
            &p,
        );
        assert_eq!(got.len(), oracle.len());
        for (a, b) in got.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let tv = tb.bind(&mut tape);
        let y = vars.encode(&mut tape, &linked, Some(tv)).unwrap();
        assert_eq!(tape.value(y).data(), got.as_slice());
    }

    #[test]
    fn zero_knowledge_channels_reduce_to_single_channel() {
        let mut rng = SeedTree::new(10).rng();
        let mut p3 = KcnnParams::new(small_config(KnowledgeMode::Both, Mapping::Linear), 6, Init::Random, &mut rng).unwrap();
        randomize(&mut p3, &mut rng);
        let mut p1 = KcnnParams::new(small_config(KnowledgeMode::None, Mapping::None), 6, Init::Random, &mut rng).unwrap();
        p1.words = p3.words.clone();
        // single-channel filters are the word slices of the three-channel ones
        for (i, &l) in p3.config.windows.iter().enumerate() {
            let (w3, b3) = &p3.filters[i];
            let d = 4;
            let mut w1 = Matrix::zeros(w3.rows(), l * d);
            for f in 0..w3.rows() {
                for j in 0..l {
                    w1.row_mut(f)[j * d..(j + 1) * d].copy_from_slice(&w3.row(f)[j * 3 * d..j * 3 * d + d]);
                }
            }
            p1.filters[i] = (w1, b3.clone());
        }
        let words = Matrix::uniform(5, 4, 1.0, &mut rng);
        let three = TitleTensor {
            words: words.clone(),
            entities: Some(Matrix::zeros(5, 4)),
            contexts: Some(Matrix::zeros(5, 4)),
        };
        let one = TitleTensor {
            words,
            entities: None,
            contexts: None,
        };
        assert_eq!(encode_title(&three, &p3).unwrap(), encode_title(&one, &p1).unwrap());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        for (seed, knowledge, mapping, shared) in [
            (11, KnowledgeMode::Both, Mapping::Nonlinear, false),
            (12, KnowledgeMode::Both, Mapping::Linear, true),
            (13, KnowledgeMode::Entity, Mapping::Nonlinear, false),
            (14, KnowledgeMode::None, Mapping::None, false),
        ] {
            let mut rng = SeedTree::new(seed).rng();
            let mut cfg = small_config(knowledge, mapping);
            cfg.shared_transform = shared;
            let mut p = KcnnParams::new(cfg, 6, Init::Random, &mut rng).unwrap();
            randomize(&mut p, &mut rng);
            let tb = tables(&mut rng, 4, 3);
            let titles: Vec<EncodedTitle> = (0..2).map(|_| random_title(&mut rng, 5, 6, 4)).collect();
            let target = Matrix::uniform(1, 6, 1.0, &mut rng);
            let params: Vec<Matrix> = p.tensors().into_iter().cloned().collect();
            let report = check_gradients(&params, 1e-5, |tape, vars| {
                let kv = p.attach(tape, vars);
                let tv = tb.bind(tape);
                let mut total = None;
                for t in &titles {
                    let y = kv.encode(tape, t, Some(tv))?;
                    let tg = tape.constant(target.clone());
                    let diff = tape.sub(y, tg)?;
                    let sq = tape.mul(diff, diff)?;
                    let s = tape.sum(sq);
                    total = Some(match total {
                        None => s,
                        Some(acc) => tape.add(acc, s)?,
                    });
                }
                Ok(total.unwrap())
            })
            .unwrap();
            assert!(report.max_relative_error() < 1e-4, "{knowledge:?}/{mapping:?}: {report:?}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn swapping_positions_swaps_all_channels(seed in 0u64..1000, i in 0usize..5, j in 0usize..5) {
                let mut rng = SeedTree::new(seed).rng();
                let mut p = KcnnParams::new(small_config(KnowledgeMode::Both, Mapping::Nonlinear), 6, Init::Random, &mut rng).unwrap();
                randomize(&mut p, &mut rng);
                let tb = tables(&mut rng, 4, 3);
                let t = random_title(&mut rng, 5, 6, 4);
                let (mut w, mut e) = (t.words().to_vec(), t.entities().to_vec());
                w.swap(i, j);
                e.swap(i, j);
                let swapped = EncodedTitle::new(w, e).unwrap();
                let a = build_title_tensor(&t, &p, Some(&tb)).unwrap();
                let b = build_title_tensor(&swapped, &p, Some(&tb)).unwrap();
                for (ca, cb) in a.channels().iter().zip(b.channels()) {
                    prop_assert_eq!(ca.row(i), cb.row(j));
                    prop_assert_eq!(ca.row(j), cb.row(i));
                }
            }

            #[test]
            fn window_one_is_order_free(seed in 0u64..1000, shift in 1usize..5) {
                let mut rng = SeedTree::new(seed).rng();
                let mut cfg = small_config(KnowledgeMode::Both, Mapping::Nonlinear);
                cfg.windows = vec![1, 1];
                let mut p = KcnnParams::new(cfg, 6, Init::Random, &mut rng).unwrap();
                randomize(&mut p, &mut rng);
                let tb = tables(&mut rng, 4, 3);
                let t = random_title(&mut rng, 5, 6, 4);
                let (mut w, mut e) = (t.words().to_vec(), t.entities().to_vec());
                w.rotate_left(shift);
                e.rotate_left(shift);
                let rotated = EncodedTitle::new(w, e).unwrap();
                prop_assert_eq!(p.encode(&t, Some(&tb)).unwrap(), p.encode(&rotated, Some(&tb)).unwrap());
            }

            #[test]
            fn output_length_is_fixed(seed in 0u64..1000) {
                let mut rng = SeedTree::new(seed).rng();
                let p = KcnnParams::new(small_config(KnowledgeMode::Context, Mapping::Linear), 6, Init::Random, &mut rng).unwrap();
                let tb = tables(&mut rng, 4, 3);
                let t = random_title(&mut rng, 5, 6, 4);
                let out = p.encode(&t, Some(&tb)).unwrap();
                prop_assert_eq!(out.len(), p.config.output_dim());
                prop_assert!(out.iter().all(|v| v.is_finite()));
            }
        }
    }
}
