//! Translation-based knowledge-graph embeddings (TransE, TransH, TransR, TransD)
//! trained with a margin ranking loss over corrupted triples.
//!
//! All variants score a triple by the squared L2 distance between the projected
//! head plus the relation vector and the projected tail; lower is more plausible.
//! Projections are applied to column vectors (`h_r = M_r h` for TransR).

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId, Triple};
use crate::nn::ops::dot;
use crate::nn::{AdamConfig, AdamState, Matrix, Tape, Var};
use crate::rng::{Rng, SeedTree};
use crate::util;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KgeVariant {
    TransE,
    TransH,
    TransR,
    TransD,
}

impl FromStr for KgeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().trim_start_matches("TRANS") {
            "E" => Ok(KgeVariant::TransE),
            "H" => Ok(KgeVariant::TransH),
            "R" => Ok(KgeVariant::TransR),
            "D" => Ok(KgeVariant::TransD),
            _ => Err(Error::Config(format!("unknown KGE variant {s:?}; expected E, H, R or D"))),
        }
    }
}

impl fmt::Display for KgeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            KgeVariant::TransE => "TransE",
            KgeVariant::TransH => "TransH",
            KgeVariant::TransR => "TransR",
            KgeVariant::TransD => "TransD",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KgeInit {
    /// uniform(-6/sqrt(k), 6/sqrt(k)); TransR matrices at identity, TransD projections at zero.
    Uniform,
    /// Everything zero (TransH normals set to the first basis vector).
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarginConfig {
    pub dim: usize,
    pub margin: f64,
    pub negatives: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub init: KgeInit,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            dim: 100,
            margin: 1.0,
            negatives: 1,
            epochs: 50,
            batch_size: 128,
            learning_rate: 0.01,
            seed: 0,
            init: KgeInit::Uniform,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if self.dim == 0 || self.batch_size == 0 || self.negatives == 0 {
            return Err(Error::Config("dim, batch size and negatives must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Embedding tables. Row `i` belongs to id `i`; row 0 is unused.
#[derive(Debug, Clone, PartialEq)]
pub struct KgeModel {
    pub variant: KgeVariant,
    pub dim: usize,
    pub entities: Matrix,
    pub relations: Matrix,
    /// TransH hyperplane normals, unit norm.
    pub normals: Option<Matrix>,
    /// TransR projection matrices, one row-major `k x k` per relation row.
    pub projections: Option<Matrix>,
    /// TransD entity projection vectors.
    pub entity_proj: Option<Matrix>,
    /// TransD relation projection vectors.
    pub relation_proj: Option<Matrix>,
}

impl KgeModel {
    pub fn new(variant: KgeVariant, num_entities: usize, num_relations: usize, dim: usize, init: KgeInit, rng: &mut Rng) -> Self {
        let (ne, nr, k) = (num_entities + 1, num_relations + 1, dim);
        let bound = 6.0 / (k as f64).sqrt();
        let table = |rows: usize, rng: &mut Rng| match init {
            KgeInit::Uniform => Matrix::uniform(rows, k, bound, rng),
            KgeInit::Zero => Matrix::zeros(rows, k),
        };
        let entities = table(ne, rng);
        let relations = table(nr, rng);
        let mut model = KgeModel {
            variant,
            dim,
            entities,
            relations,
            normals: None,
            projections: None,
            entity_proj: None,
            relation_proj: None,
        };
        match variant {
            KgeVariant::TransE => {}
            KgeVariant::TransH => {
                let mut w = match init {
                    KgeInit::Uniform => Matrix::uniform(nr, k, bound, rng),
                    KgeInit::Zero => {
                        let mut w = Matrix::zeros(nr, k);
                        (0..nr).for_each(|r| w.set(r, 0, 1.0));
                        w
                    }
                };
                normalize_rows(&mut w);
                model.normals = Some(w);
            }
            KgeVariant::TransR => {
                let mut m = Matrix::zeros(nr, k * k);
                for r in 0..nr {
                    for i in 0..k {
                        m.set(r, i * k + i, 1.0);
                    }
                }
                model.projections = Some(m);
            }
            KgeVariant::TransD => {
                model.entity_proj = Some(Matrix::zeros(ne, k));
                model.relation_proj = Some(Matrix::zeros(nr, k));
            }
        }
        for table in model.tables_mut() {
            table.row_mut(0).iter_mut().for_each(|v| *v = 0.0);
        }
        model
    }

    fn check(&self, t: &Triple) -> Result<()> {
        for e in [t.head, t.tail] {
            if e.0 == 0 || e.index() >= self.entities.rows() {
                return Err(Error::Lookup(format!("entity id {} has no embedding", e.0)));
            }
        }
        if t.relation.0 == 0 || t.relation.index() >= self.relations.rows() {
            return Err(Error::Lookup(format!("relation id {} has no embedding", t.relation.0)));
        }
        Ok(())
    }

    /// Project an entity vector into the space of `relation`.
    pub fn project(&self, e: EntityId, relation: RelationId) -> Vec<f64> {
        let k = self.dim;
        let v = self.entities.row(e.index());
        match self.variant {
            KgeVariant::TransE => v.to_vec(),
            KgeVariant::TransH => {
                let w = self.normals.as_ref().expect("TransH normals").row(relation.index());
                let s = dot(w, v);
                v.iter().zip(w).map(|(x, wi)| x - s * wi).collect()
            }
            KgeVariant::TransR => {
                let m = self.projections.as_ref().expect("TransR matrices").row(relation.index());
                (0..k).map(|i| dot(&m[i * k..(i + 1) * k], v)).collect()
            }
            KgeVariant::TransD => {
                let ep = self.entity_proj.as_ref().expect("TransD projections").row(e.index());
                let rp = self.relation_proj.as_ref().expect("TransD projections").row(relation.index());
                let s = dot(ep, v);
                v.iter().zip(rp).map(|(x, r)| x + s * r).collect()
            }
        }
    }

    /// Translation distance; lower is more plausible.
    pub fn score(&self, t: &Triple) -> Result<f64> {
        self.check(t)?;
        let h = self.project(t.head, t.relation);
        let tl = self.project(t.tail, t.relation);
        let r = self.relations.row(t.relation.index());
        Ok(h.iter()
            .zip(r)
            .zip(&tl)
            .map(|((a, b), c)| {
                let d = a + b - c;
                d * d
            })
            .sum())
    }

    pub fn margin_loss(&self, positive: &Triple, negative: &Triple, margin: f64) -> Result<f64> {
        Ok(hinge(self.score(positive)?, self.score(negative)?, margin))
    }

    fn tables(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.entities, &self.relations];
        v.extend(self.normals.iter());
        v.extend(self.projections.iter());
        v.extend(self.entity_proj.iter());
        v.extend(self.relation_proj.iter());
        v
    }

    fn tables_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.entities, &mut self.relations];
        v.extend(self.normals.iter_mut());
        v.extend(self.projections.iter_mut());
        v.extend(self.entity_proj.iter_mut());
        v.extend(self.relation_proj.iter_mut());
        v
    }

    fn table_names(&self) -> Vec<&'static str> {
        let mut v = vec!["entities", "relations"];
        match self.variant {
            KgeVariant::TransE => {}
            KgeVariant::TransH => v.push("normals"),
            KgeVariant::TransR => v.push("projections"),
            KgeVariant::TransD => v.extend(["entity_proj", "relation_proj"]),
        }
        v
    }

    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tables().into_iter().map(|m| tape.param(m.clone())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tables().iter().all(|m| m.is_finite())
    }
}

/// `max(0, pos + margin - neg)`.
pub fn hinge(positive: f64, negative: f64, margin: f64) -> f64 {
    (positive + margin - negative).max(0.0)
}

/// Tape version of the scorer for a batch of triples; returns `B x 1` scores.
/// `vars` are the model's tables bound in declaration order.
pub fn score_on_tape(model: &KgeModel, tape: &mut Tape, vars: &[Var], triples: &[Triple]) -> Result<Var> {
    let heads: Vec<usize> = triples.iter().map(|t| t.head.index()).collect();
    let tails: Vec<usize> = triples.iter().map(|t| t.tail.index()).collect();
    let rels: Vec<usize> = triples.iter().map(|t| t.relation.index()).collect();
    let h = tape.gather(vars[0], &heads)?;
    let t = tape.gather(vars[0], &tails)?;
    let r = tape.gather(vars[1], &rels)?;
    let (hp, tp) = match model.variant {
        KgeVariant::TransE => (h, t),
        KgeVariant::TransH => {
            let w = tape.gather(vars[2], &rels)?;
            let project = |tape: &mut Tape, x: Var| -> Result<Var> {
                let s = tape.row_dot(w, x)?;
                let along = tape.scale_rows(w, s)?;
                tape.sub(x, along)
            };
            (project(tape, h)?, project(tape, t)?)
        }
        KgeVariant::TransR => {
            let m = tape.gather(vars[2], &rels)?;
            (tape.batch_mat_vec(m, h)?, tape.batch_mat_vec(m, t)?)
        }
        KgeVariant::TransD => {
            let rp = tape.gather(vars[3], &rels)?;
            let hpv = tape.gather(vars[2], &heads)?;
            let tpv = tape.gather(vars[2], &tails)?;
            let project = |tape: &mut Tape, x: Var, p: Var| -> Result<Var> {
                let s = tape.row_dot(p, x)?;
                let shift = tape.scale_rows(rp, s)?;
                tape.add(x, shift)
            };
            (project(tape, h, hpv)?, project(tape, t, tpv)?)
        }
    };
    let sum = tape.add(hp, r)?;
    let diff = tape.sub(sum, tp)?;
    Ok(tape.row_sum_sq(diff))
}

/// Corrupts triples by replacing the head or the tail (fair coin) with a
/// different, uniformly drawn entity of the graph, avoiding known triples for up
/// to 100 draws before accepting a collision.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    pool: Vec<EntityId>,
    known: HashSet<Triple>,
}

impl NegativeSampler {
    pub fn new(graph: &KnowledgeGraph) -> Result<Self> {
        let pool: Vec<EntityId> = graph.entities().collect();
        if pool.len() < 2 {
            return Err(Error::Contract("negative sampling needs at least two entities".into()));
        }
        Ok(Self {
            pool,
            known: graph.triple_set(),
        })
    }

    pub fn sample(&self, triple: &Triple, rng: &mut Rng) -> Triple {
        let corrupt_head = rng.gen_bool(0.5);
        let original = if corrupt_head { triple.head } else { triple.tail };
        let mut candidate = *triple;
        for _ in 0..100 {
            let mut e = self.pool[rng.gen_range(0..self.pool.len())];
            while e == original {
                e = self.pool[rng.gen_range(0..self.pool.len())];
            }
            candidate = if corrupt_head {
                Triple::new(e, triple.relation, triple.tail)
            } else {
                Triple::new(triple.head, triple.relation, e)
            };
            if !self.known.contains(&candidate) {
                break;
            }
        }
        candidate
    }
}

#[derive(Debug, Clone)]
pub struct TrainedKge {
    pub model: KgeModel,
    /// Mean hinge loss per (positive, negative) pair, one entry per epoch.
    pub loss_trace: Vec<f64>,
}

pub fn train_kge(graph: &KnowledgeGraph, config: &MarginConfig, variant: KgeVariant) -> Result<TrainedKge> {
    config.validate()?;
    if graph.is_empty() {
        return Err(Error::Config("cannot train embeddings on an empty graph".into()));
    }
    let seeds = SeedTree::new(config.seed).child("kge");
    let mut init_rng = seeds.child("init").rng();
    let mut model = KgeModel::new(
        variant,
        graph.entity_vocab_len(),
        graph.relation_vocab_len(),
        config.dim,
        config.init,
        &mut init_rng,
    );
    let mut shuffle_rng = seeds.child("shuffle").rng();
    let mut neg_rng = seeds.child("negatives").rng();
    let adam_cfg = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_cfg, &model.tables());
    let sampler = NegativeSampler::new(graph)?;
    let mut order: Vec<usize> = (0..graph.triples().len()).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut pairs = 0usize;
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut pos = Vec::with_capacity(chunk.len() * config.negatives);
            let mut neg = Vec::with_capacity(pos.capacity());
            for &i in chunk {
                let t = graph.triples()[i];
                for _ in 0..config.negatives {
                    pos.push(t);
                    neg.push(sampler.sample(&t, &mut neg_rng));
                }
            }
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let sp = score_on_tape(&model, &mut tape, &vars, &pos)?;
            let sn = score_on_tape(&model, &mut tape, &vars, &neg)?;
            let diff = tape.sub(sp, sn)?;
            let shifted = tape.add_scalar(diff, config.margin);
            let hinges = tape.relu(shifted);
            let loss = tape.mean(hinges)?;
            let value = tape.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite KGE loss at epoch {epoch}, batch {batch_no}")));
            }
            total += value * pos.len() as f64;
            pairs += pos.len();
            let mut grads = tape.backward(loss)?;
            let g: Vec<Matrix> = vars.iter().map(|&v| grads.take_or_zeros(v, &tape)).collect();
            if g.iter().any(|m| !m.is_finite()) {
                return Err(Error::Numeric(format!("non-finite KGE gradient at epoch {epoch}, batch {batch_no}")));
            }
            adam.step(&mut model.tables_mut(), &g)?;
            if let Some(w) = model.normals.as_mut() {
                normalize_rows(w);
            }
        }
        project_to_unit_ball(&mut model.entities);
        loss_trace.push(total / pairs.max(1) as f64);
    }
    Ok(TrainedKge { model, loss_trace })
}

fn normalize_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let n = dot(row, row).sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

fn project_to_unit_ball(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let n = dot(row, row).sqrt();
        if n > 1.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkPredictionReport {
    pub mean_rank: f64,
    pub hits_at_10: f64,
}

/// Filtered tail prediction: the true tail is ranked against every graph entity
/// whose corrupted triple is not already known. Ties count half.
pub fn link_prediction_eval(model: &KgeModel, test: &[Triple], graph: &KnowledgeGraph) -> Result<LinkPredictionReport> {
    let known = graph.triple_set();
    let pool: Vec<EntityId> = graph.entities().collect();
    let mut rank_sum = 0.0;
    let mut hits = 0usize;
    for t in test {
        let truth = model.score(t)?;
        let mut better = 0.0;
        for &e in &pool {
            if e == t.tail {
                continue;
            }
            let cand = Triple::new(t.head, t.relation, e);
            if known.contains(&cand) {
                continue;
            }
            let s = model.score(&cand)?;
            if s < truth {
                better += 1.0;
            } else if s == truth {
                better += 0.5;
            }
        }
        let rank = 1.0 + better;
        rank_sum += rank;
        if rank <= 10.0 {
            hits += 1;
        }
    }
    let n = test.len().max(1) as f64;
    Ok(LinkPredictionReport {
        mean_rank: rank_sum / n,
        hits_at_10: hits as f64 / n,
    })
}

/// JSON sidecar written next to the embedding tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgeSidecar {
    pub variant: KgeVariant,
    pub dim: usize,
    pub seed: u64,
    pub config_hash: String,
    pub config: MarginConfig,
    pub tables: Vec<String>,
    pub loss_trace: Vec<f64>,
}

impl KgeModel {
    /// Write one `name<TAB>v1..vk` TSV per table plus `kge.json`.
    pub fn save_dir(&self, dir: &Path, graph: &KnowledgeGraph, config: &MarginConfig, loss_trace: &[f64]) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let names = self.table_names();
        for (name, table) in names.iter().zip(self.tables()) {
            let is_entity = matches!(*name, "entities" | "entity_proj");
            let mut buf = Vec::new();
            let rows: Vec<(String, usize)> = if is_entity {
                graph
                    .entities()
                    .map(|e| (graph.entity_name(e).unwrap_or_default().to_string(), e.index()))
                    .collect()
            } else {
                graph
                    .relation_names()
                    .iter()
                    .map(|(n, id)| (n.to_string(), id as usize))
                    .collect()
            };
            for (label, row) in rows {
                write!(buf, "{label}")?;
                for v in table.row(row) {
                    write!(buf, "\t{v}")?;
                }
                writeln!(buf)?;
            }
            util::write_atomic(&dir.join(format!("{name}.tsv")), &buf)?;
        }
        let sidecar = KgeSidecar {
            variant: self.variant,
            dim: self.dim,
            seed: config.seed,
            config_hash: util::config_hash(config)?,
            config: config.clone(),
            tables: names.iter().map(|s| s.to_string()).collect(),
            loss_trace: loss_trace.to_vec(),
        };
        util::write_atomic(&dir.join("kge.json"), &serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    /// Read tables written by [`KgeModel::save_dir`], aligning rows to `graph`'s ids.
    /// Entities of the graph missing from the dump keep zero rows.
    pub fn load_dir(dir: &Path, graph: &KnowledgeGraph) -> Result<(Self, KgeSidecar)> {
        let sidecar: KgeSidecar = serde_json::from_slice(&std::fs::read(dir.join("kge.json"))?)?;
        let k = sidecar.dim;
        let width = |name: &str| if name == "projections" { k * k } else { k };
        let mut tables = Vec::new();
        for name in &sidecar.tables {
            let is_entity = matches!(name.as_str(), "entities" | "entity_proj");
            let rows = if is_entity {
                graph.entity_vocab_len() + 1
            } else {
                graph.relation_vocab_len() + 1
            };
            let mut m = Matrix::zeros(rows, width(name));
            let file = std::fs::File::open(dir.join(format!("{name}.tsv")))?;
            for (lineno, line) in BufReader::new(file).lines().enumerate() {
                let line = line?;
                if line.is_empty() {
                    continue;
                }
                let mut cols = line.split('\t');
                let label = cols.next().unwrap_or_default();
                let id = if is_entity {
                    graph.entity_id(label).map(|e| e.index())
                } else {
                    graph.relation_names().get(label).map(|r| r as usize)
                };
                let Some(id) = id else { continue };
                let values: Vec<f64> = cols
                    .map(|c| c.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Data {
                        line: lineno + 1,
                        msg: format!("bad number in {name}.tsv"),
                    })?;
                if values.len() != m.cols() {
                    return Err(Error::Data {
                        line: lineno + 1,
                        msg: format!("{name}.tsv row has {} values, expected {}", values.len(), m.cols()),
                    });
                }
                m.row_mut(id).copy_from_slice(&values);
            }
            tables.push(m);
        }
        let mut it = tables.into_iter();
        let entities = it.next().ok_or_else(|| Error::Dataset("missing entity table".into()))?;
        let relations = it.next().ok_or_else(|| Error::Dataset("missing relation table".into()))?;
        let mut model = KgeModel {
            variant: sidecar.variant,
            dim: k,
            entities,
            relations,
            normals: None,
            projections: None,
            entity_proj: None,
            relation_proj: None,
        };
        match sidecar.variant {
            KgeVariant::TransE => {}
            KgeVariant::TransH => model.normals = it.next(),
            KgeVariant::TransR => model.projections = it.next(),
            KgeVariant::TransD => {
                model.entity_proj = it.next();
                model.relation_proj = it.next();
            }
        }
        Ok((model, sidecar))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(variant: KgeVariant, seed: u64) -> (KnowledgeGraph, KgeModel) {
        let g = KnowledgeGraph::from_named(&[("A", "r", "B"), ("B", "s", "C"), ("C", "r", "A")]);
        let mut rng = SeedTree::new(seed).rng();
        let m = KgeModel::new(variant, g.entity_vocab_len(), g.relation_vocab_len(), 4, KgeInit::Uniform, &mut rng);
        (g, m)
    }

    #[test]
    fn transe_exact_translation_scores_zero() {
        let (g, mut m) = toy(KgeVariant::TransE, 1);
        let t = g.triples()[0];
        let h = m.entities.row(t.head.index()).to_vec();
        let r = m.relations.row(t.relation.index()).to_vec();
        let tail: Vec<f64> = h.iter().zip(&r).map(|(a, b)| a + b).collect();
        m.entities.row_mut(t.tail.index()).copy_from_slice(&tail);
        assert!(m.score(&t).unwrap().abs() < 1e-24);
    }

    #[test]
    fn transh_orthogonal_normal_matches_transe() {
        let (g, mut m) = toy(KgeVariant::TransH, 2);
        let t = g.triples()[0];
        // make head and tail orthogonal to a chosen unit normal
        let mut w = vec![0.0; 4];
        w[3] = 1.0;
        m.normals.as_mut().unwrap().row_mut(t.relation.index()).copy_from_slice(&w);
        m.entities.set(t.head.index(), 3, 0.0);
        m.entities.set(t.tail.index(), 3, 0.0);
        let mut e = m.clone();
        e.variant = KgeVariant::TransE;
        assert!((m.score(&t).unwrap() - e.score(&t).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn unknown_ids_are_lookup_errors() {
        let (_, m) = toy(KgeVariant::TransE, 3);
        let bad = Triple::new(EntityId(99), RelationId(1), EntityId(1));
        assert!(matches!(m.score(&bad), Err(Error::Lookup(_))));
    }

    #[test]
    fn margin_boundaries() {
        assert_eq!(hinge(0.0, 1.0, 1.0), 0.0);
        assert_eq!(hinge(0.7, 0.7, 1.0), 1.0);
        assert_eq!(hinge(0.2, 5.0, 1.0), 0.0);
    }

    #[test]
    fn two_entity_tail_corruption() {
        let g = KnowledgeGraph::from_named(&[("A", "r", "B")]);
        let sampler = NegativeSampler::new(&g).unwrap();
        let t = g.triples()[0];
        let mut rng = SeedTree::new(0).rng();
        for _ in 0..50 {
            let n = sampler.sample(&t, &mut rng);
            let a = g.entity_id("A").unwrap();
            if n.head == t.head {
                assert_eq!(n, Triple::new(a, t.relation, a));
            } else {
                assert_eq!(n, Triple::new(g.entity_id("B").unwrap(), t.relation, g.entity_id("B").unwrap()));
            }
        }
    }

    #[test]
    fn empty_graph_is_config_error() {
        let g = KnowledgeGraph::new();
        assert!(matches!(
            train_kge(&g, &MarginConfig::default(), KgeVariant::TransE),
            Err(Error::Config(_))
        ));
        let bad = MarginConfig {
            margin: 0.0,
            ..MarginConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_init_loss_starts_at_margin() {
        let g = KnowledgeGraph::from_named(&[("A", "r", "B"), ("B", "r", "C"), ("C", "s", "D")]);
        for variant in [KgeVariant::TransE, KgeVariant::TransH, KgeVariant::TransR, KgeVariant::TransD] {
            let cfg = MarginConfig {
                dim: 3,
                margin: 1.0,
                epochs: 1,
                batch_size: 64,
                init: KgeInit::Zero,
                ..MarginConfig::default()
            };
            let out = train_kge(&g, &cfg, variant).unwrap();
            assert_eq!(out.loss_trace, vec![1.0], "{variant}");
        }
    }

    #[test]
    fn tape_scores_match_direct_scores() {
        for variant in [KgeVariant::TransE, KgeVariant::TransH, KgeVariant::TransR, KgeVariant::TransD] {
            let (g, mut m) = toy(variant, 7);
            let mut rng = SeedTree::new(8).rng();
            if let Some(p) = m.projections.as_mut() {
                *p = Matrix::uniform(p.rows(), p.cols(), 0.5, &mut rng);
            }
            if let Some(p) = m.entity_proj.as_mut() {
                *p = Matrix::uniform(p.rows(), p.cols(), 0.5, &mut rng);
            }
            if let Some(p) = m.relation_proj.as_mut() {
                *p = Matrix::uniform(p.rows(), p.cols(), 0.5, &mut rng);
            }
            let mut tape = Tape::new();
            let vars = m.bind(&mut tape);
            let s = score_on_tape(&m, &mut tape, &vars, g.triples()).unwrap();
            for (i, t) in g.triples().iter().enumerate() {
                assert!((tape.value(s).get(i, 0) - m.score(t).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dump_round_trip() {
        let g = KnowledgeGraph::from_named(&[("A", "r", "B"), ("B", "s", "C")]);
        let cfg = MarginConfig {
            dim: 3,
            epochs: 2,
            ..MarginConfig::default()
        };
        for variant in [KgeVariant::TransE, KgeVariant::TransH, KgeVariant::TransR, KgeVariant::TransD] {
            let out = train_kge(&g, &cfg, variant).unwrap();
            let dir = tempfile::tempdir().unwrap();
            out.model.save_dir(dir.path(), &g, &cfg, &out.loss_trace).unwrap();
            let (back, side) = KgeModel::load_dir(dir.path(), &g).unwrap();
            assert_eq!(back, out.model);
            assert_eq!(side.variant, variant);
            assert_eq!(side.loss_trace, out.loss_trace);
        }
    }
}
