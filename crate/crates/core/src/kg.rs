//! In-memory knowledge graph, one-hop sub-graph extraction and entity contexts.
//!
//! Entity and relation ids are dense positive integers assigned at registration;
//! id 0 is reserved for "no entity" in title records. A sub-graph keeps the id
//! space of the graph it was extracted from, so embedding tables stay aligned.

use crate::error::{Error, Result};
use crate::nn::Matrix;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    pub const NONE: EntityId = EntityId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

/// String <-> dense id mapping, ids starting at 1.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NameTable {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl NameTable {
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        self.names.push(name.to_string());
        let id = self.names.len() as u32;
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        id.checked_sub(1)
            .and_then(|i| self.names.get(i as usize))
            .map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// `(name, id)` pairs in id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, u32)> {
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i as u32 + 1))
    }

    /// Two-column TSV, `name<TAB>id`.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        for (name, id) in self.iter() {
            writeln!(out, "{name}\t{id}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(input: R) -> Result<Self> {
        let mut table = NameTable::default();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let (Some(name), Some(id)) = (cols.next(), cols.next()) else {
                return Err(Error::Data {
                    line: lineno + 1,
                    msg: "expected name<TAB>id".into(),
                });
            };
            let id: u32 = id.trim().parse().map_err(|_| Error::Data {
                line: lineno + 1,
                msg: format!("bad id {id:?}"),
            })?;
            if id as usize != table.len() + 1 {
                return Err(Error::Data {
                    line: lineno + 1,
                    msg: format!("ids must be dense and ordered; expected {}", table.len() + 1),
                });
            }
            table.intern(name);
        }
        Ok(table)
    }
}

/// One-hop neighbourhood of an entity, ignoring edge direction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityContext {
    pub entity: EntityId,
    pub neighbors: BTreeSet<EntityId>,
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    entities: NameTable,
    relations: NameTable,
    members: BTreeSet<EntityId>,
    triples: Vec<Triple>,
    confidence: Vec<Option<f64>>,
    lookup: HashMap<Triple, usize>,
    // entity id -> indices into `triples` where it is head or tail
    adjacency: Vec<Vec<usize>>,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Build from `(head, relation, tail)` name triples.
    pub fn from_named<S: AsRef<str>>(triples: &[(S, S, S)]) -> Self {
        let mut g = Self::new();
        for (h, r, t) in triples {
            let h = g.add_entity(h.as_ref());
            let r = g.add_relation(r.as_ref());
            let t = g.add_entity(t.as_ref());
            g.add_triple(Triple::new(h, r, t), None);
        }
        g
    }

    pub fn add_entity(&mut self, name: &str) -> EntityId {
        let id = EntityId(self.entities.intern(name));
        if self.adjacency.len() <= id.index() {
            self.adjacency.resize(id.index() + 1, Vec::new());
        }
        self.members.insert(id);
        id
    }

    pub fn add_relation(&mut self, name: &str) -> RelationId {
        RelationId(self.relations.intern(name))
    }

    /// Insert a triple; duplicates keep the larger confidence. Returns false on duplicates.
    pub fn add_triple(&mut self, triple: Triple, confidence: Option<f64>) -> bool {
        if let Some(&i) = self.lookup.get(&triple) {
            self.confidence[i] = match (self.confidence[i], confidence) {
                (Some(a), Some(b)) => Some(a.max(b)),
                (a, b) => a.or(b),
            };
            return false;
        }
        let i = self.triples.len();
        self.triples.push(triple);
        self.confidence.push(confidence);
        self.lookup.insert(triple, i);
        self.adjacency[triple.head.index()].push(i);
        if triple.tail != triple.head {
            self.adjacency[triple.tail.index()].push(i);
        }
        true
    }

    pub fn entity_names(&self) -> &NameTable {
        &self.entities
    }

    pub fn relation_names(&self) -> &NameTable {
        &self.relations
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entities.get(name).map(EntityId)
    }

    pub fn entity_name(&self, id: EntityId) -> Option<&str> {
        self.entities.name(id.0)
    }

    /// Size of the entity id space (table rows needed = this + 1).
    pub fn entity_vocab_len(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_vocab_len(&self) -> usize {
        self.relations.len()
    }

    /// Entities that belong to this graph.
    pub fn entities(&self) -> impl Iterator<Item = EntityId> + '_ {
        self.members.iter().copied()
    }

    pub fn num_entities(&self) -> usize {
        self.members.len()
    }

    pub fn contains_entity(&self, e: EntityId) -> bool {
        self.members.contains(&e)
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn confidence(&self, i: usize) -> Option<f64> {
        self.confidence[i]
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.lookup.contains_key(t)
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    fn require(&self, e: EntityId) -> Result<()> {
        if self.contains_entity(e) {
            Ok(())
        } else {
            Err(Error::Lookup(format!("unknown entity id {}", e.0)))
        }
    }

    pub fn context_of(&self, e: EntityId) -> Result<EntityContext> {
        self.require(e)?;
        let neighbors = self.adjacency[e.index()]
            .iter()
            .map(|&i| {
                let t = self.triples[i];
                if t.head == e {
                    t.tail
                } else {
                    t.head
                }
            })
            .collect();
        Ok(EntityContext {
            entity: e,
            neighbors,
        })
    }

    /// Mean embedding of an entity's context; zero when the context is empty.
    pub fn context_embedding(&self, e: EntityId, entity_table: &Matrix) -> Result<Vec<f64>> {
        let ctx = self.context_of(e)?;
        let mut out = vec![0.0; entity_table.cols()];
        if ctx.neighbors.is_empty() {
            return Ok(out);
        }
        for n in &ctx.neighbors {
            if n.index() >= entity_table.rows() {
                return Err(Error::Lookup(format!("no embedding row for entity id {}", n.0)));
            }
            for (o, v) in out.iter_mut().zip(entity_table.row(n.index())) {
                *o += v;
            }
        }
        let k = ctx.neighbors.len() as f64;
        out.iter_mut().for_each(|v| *v /= k);
        Ok(out)
    }

    /// Context embeddings for every id of the entity space (row 0 and
    /// non-member rows stay zero).
    pub fn context_table(&self, entity_table: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(entity_table.rows(), entity_table.cols());
        for e in self.entities() {
            if e.index() >= out.rows() {
                return Err(Error::Lookup(format!("no embedding row for entity id {}", e.0)));
            }
            let v = self.context_embedding(e, entity_table)?;
            out.row_mut(e.index()).copy_from_slice(&v);
        }
        Ok(out)
    }

    /// Seeds, their one-hop neighbours, and every triple with both endpoints in that set.
    pub fn expand_subgraph(&self, seeds: &BTreeSet<EntityId>) -> Result<KnowledgeGraph> {
        let mut keep: BTreeSet<EntityId> = BTreeSet::new();
        for &s in seeds {
            self.require(s)?;
            keep.insert(s);
            keep.extend(self.context_of(s)?.neighbors);
        }
        let mut sub = KnowledgeGraph {
            entities: self.entities.clone(),
            relations: self.relations.clone(),
            members: keep.clone(),
            triples: Vec::new(),
            confidence: Vec::new(),
            lookup: HashMap::new(),
            adjacency: vec![Vec::new(); self.adjacency.len()],
        };
        for (i, t) in self.triples.iter().enumerate() {
            if keep.contains(&t.head) && keep.contains(&t.tail) {
                sub.add_triple(*t, self.confidence[i]);
            }
        }
        Ok(sub)
    }

    /// Parse `head<TAB>relation<TAB>tail[<TAB>confidence]` lines. Triples whose
    /// confidence is below `min_confidence` are dropped; triples without a
    /// confidence column always pass.
    pub fn read_tsv<R: BufRead>(input: R, min_confidence: Option<f64>) -> Result<Self> {
        let mut g = Self::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim_end_matches(['\r', '\n']);
            if trimmed.trim().is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = trimmed.split('\t').collect();
            if cols.len() != 3 && cols.len() != 4 {
                return Err(Error::Data {
                    line: lineno + 1,
                    msg: format!("expected 3 or 4 tab-separated columns, found {}", cols.len()),
                });
            }
            let confidence = match cols.get(3) {
                Some(c) => Some(c.trim().parse::<f64>().map_err(|_| Error::Data {
                    line: lineno + 1,
                    msg: format!("bad confidence {c:?}"),
                })?),
                None => None,
            };
            if let (Some(c), Some(min)) = (confidence, min_confidence) {
                if c < min {
                    continue;
                }
            }
            let h = g.add_entity(cols[0]);
            let r = g.add_relation(cols[1]);
            let t = g.add_entity(cols[2]);
            g.add_triple(Triple::new(h, r, t), confidence);
        }
        Ok(g)
    }

    pub fn load_tsv(path: &Path, min_confidence: Option<f64>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_tsv(std::io::BufReader::new(file), min_confidence)
    }

    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        for (i, t) in self.triples.iter().enumerate() {
            let h = self.entity_name(t.head).unwrap_or_default();
            let r = self.relations.name(t.relation.0).unwrap_or_default();
            let tl = self.entity_name(t.tail).unwrap_or_default();
            match self.confidence[i] {
                Some(c) => writeln!(out, "{h}\t{r}\t{tl}\t{c}")?,
                None => writeln!(out, "{h}\t{r}\t{tl}")?,
            }
        }
        Ok(())
    }

    /// Entities of this graph as a set.
    pub fn entity_set(&self) -> BTreeSet<EntityId> {
        self.members.clone()
    }

    pub fn triple_set(&self) -> HashSet<Triple> {
        self.triples.iter().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use rand::Rng;

    fn id(g: &KnowledgeGraph, n: &str) -> EntityId {
        g.entity_id(n).unwrap()
    }

    #[test]
    fn one_hop_excludes_two_hop() {
        let g = KnowledgeGraph::from_named(&[("A", "r", "B"), ("B", "r", "C")]);
        let sub = g.expand_subgraph(&[id(&g, "A")].into()).unwrap();
        assert_eq!(sub.entity_set(), [id(&g, "A"), id(&g, "B")].into());
        assert_eq!(sub.triples().len(), 1);
        assert_eq!(sub.triples()[0].tail, id(&g, "B"));
    }

    #[test]
    fn all_seeds_is_fixed_point() {
        let g = KnowledgeGraph::from_named(&[("A", "r", "B"), ("B", "s", "C"), ("D", "r", "A")]);
        let sub = g.expand_subgraph(&g.entity_set()).unwrap();
        assert_eq!(sub.entity_set(), g.entity_set());
        assert_eq!(sub.triples(), g.triples());
    }

    #[test]
    fn unknown_seed_names_the_id() {
        let g = KnowledgeGraph::from_named(&[("A", "r", "B")]);
        let err = g.expand_subgraph(&[EntityId(42)].into()).unwrap_err();
        assert!(err.to_string().contains("42"));
    }

    #[test]
    fn contexts_both_directions() {
        let mut g = KnowledgeGraph::from_named(&[("A", "r", "B"), ("C", "s", "A")]);
        let lonely = g.add_entity("Z");
        assert!(g.context_of(lonely).unwrap().neighbors.is_empty());
        let ctx = g.context_of(id(&g, "A")).unwrap();
        assert_eq!(ctx.neighbors, [id(&g, "B"), id(&g, "C")].into());
        assert!(g.context_of(EntityId(99)).is_err());
    }

    #[test]
    fn context_embedding_cases() {
        let g = KnowledgeGraph::from_named(&[("A", "r", "B"), ("C", "r", "D"), ("C", "s", "E")]);
        let mut table = Matrix::zeros(6, 3);
        table.row_mut(id(&g, "B").index()).copy_from_slice(&[1.0, -2.0, 0.5]);
        table.row_mut(id(&g, "D").index()).copy_from_slice(&[0.3, 0.1, -0.7]);
        table.row_mut(id(&g, "E").index()).copy_from_slice(&[-0.3, -0.1, 0.7]);
        assert_eq!(g.context_embedding(id(&g, "A"), &table).unwrap(), vec![1.0, -2.0, 0.5]);
        assert_eq!(g.context_embedding(id(&g, "C"), &table).unwrap(), vec![0.0, 0.0, 0.0]);
        let short = Matrix::zeros(2, 3);
        assert!(matches!(g.context_embedding(id(&g, "C"), &short), Err(Error::Lookup(_))));
    }

    #[test]
    fn five_neighbors_average() {
        let names = ["B", "C", "D", "E", "F"];
        let triples: Vec<(&str, &str, &str)> = names.iter().map(|n| ("A", "r", *n)).collect();
        let g = KnowledgeGraph::from_named(&triples);
        let mut rng = SeedTree::new(11).rng();
        let table = Matrix::uniform(g.entity_vocab_len() + 1, 4, 1.0, &mut rng);
        let got = g.context_embedding(id(&g, "A"), &table).unwrap();
        for (q, &value) in got.iter().enumerate() {
            let mut s = 0.0;
            for n in names {
                s += table.get(id(&g, n).index(), q);
            }
            assert!((value - s / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tsv_round_trip_and_confidence_filter() {
        let text = "# comment\nA\tr\tB\t0.9\nB\tr\tC\t0.5\nC\ts\tA\n\nA\tr\tB\n";
        let g = KnowledgeGraph::read_tsv(text.as_bytes(), Some(0.8)).unwrap();
        assert_eq!(g.triples().len(), 2);
        let mut buf = Vec::new();
        g.write_tsv(&mut buf).unwrap();
        let again = KnowledgeGraph::read_tsv(buf.as_slice(), None).unwrap();
        assert_eq!(again.triples(), g.triples());
        assert!(KnowledgeGraph::read_tsv("A\tB\n".as_bytes(), None).is_err());
    }

    pub(crate) fn random_graph(seed: u64, n: usize, edges: usize) -> KnowledgeGraph {
        let mut rng = SeedTree::new(seed).rng();
        let mut g = KnowledgeGraph::new();
        for i in 0..n {
            g.add_entity(&format!("E{i}"));
        }
        let rels: Vec<RelationId> = (0..3).map(|i| g.add_relation(&format!("r{i}"))).collect();
        for _ in 0..edges {
            let h = EntityId(rng.gen_range(1..=n as u32));
            let t = EntityId(rng.gen_range(1..=n as u32));
            let r = rels[rng.gen_range(0..rels.len())];
            g.add_triple(Triple::new(h, r, t), None);
        }
        g
    }

    #[test]
    fn subgraph_matches_bfs_oracle() {
        for seed in 0..10 {
            let g = random_graph(seed, 50, 70);
            let mut rng = SeedTree::new(seed + 100).rng();
            let seeds: BTreeSet<EntityId> = (0..5).map(|_| EntityId(rng.gen_range(1..=50))).collect();
            // depth-1 BFS over an undirected edge list
            let mut frontier: BTreeSet<EntityId> = seeds.clone();
            for t in g.triples() {
                if seeds.contains(&t.head) {
                    frontier.insert(t.tail);
                }
                if seeds.contains(&t.tail) {
                    frontier.insert(t.head);
                }
            }
            let expect: Vec<Triple> = g
                .triples()
                .iter()
                .filter(|t| frontier.contains(&t.head) && frontier.contains(&t.tail))
                .copied()
                .collect();
            let sub = g.expand_subgraph(&seeds).unwrap();
            assert_eq!(sub.entity_set(), frontier);
            assert_eq!(sub.triples(), expect.as_slice());
        }
    }

    #[test]
    fn context_matches_full_scan() {
        let g = random_graph(3, 50, 120);
        for e in g.entities() {
            let mut expect = BTreeSet::new();
            for t in g.triples() {
                if t.head == e {
                    expect.insert(t.tail);
                }
                if t.tail == e {
                    expect.insert(t.head);
                }
            }
            assert_eq!(g.context_of(e).unwrap().neighbors, expect);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn reversing_edges_keeps_contexts(seed in 0u64..500) {
                let g = random_graph(seed, 20, 40);
                let mut rev = KnowledgeGraph::new();
                for (name, _) in g.entity_names().iter() {
                    rev.add_entity(name);
                }
                for (name, _) in g.relation_names().iter() {
                    rev.add_relation(name);
                }
                for t in g.triples() {
                    rev.add_triple(Triple::new(t.tail, t.relation, t.head), None);
                }
                for e in g.entities() {
                    prop_assert_eq!(g.context_of(e).unwrap(), rev.context_of(e).unwrap());
                }
            }

            #[test]
            fn expansion_idempotent_and_monotone(seed in 0u64..500, a in 1u32..=20, b in 1u32..=20) {
                let g = random_graph(seed, 20, 25);
                let small: BTreeSet<EntityId> = [EntityId(a)].into();
                let big: BTreeSet<EntityId> = [EntityId(a), EntityId(b)].into();
                let s1 = g.expand_subgraph(&small).unwrap();
                let s2 = g.expand_subgraph(&small).unwrap();
                prop_assert_eq!(s1.entity_set(), s2.entity_set());
                prop_assert_eq!(s1.triples(), s2.triples());
                let sb = g.expand_subgraph(&big).unwrap();
                prop_assert!(s1.entity_set().is_subset(&sb.entity_set()));
                let tb = sb.triple_set();
                prop_assert!(s1.triples().iter().all(|t| tb.contains(t)));
            }

            #[test]
            fn context_embedding_permutation_invariant(seed in 0u64..200) {
                // Build the same star with neighbours registered in two orders.
                let mut rng = SeedTree::new(seed).rng();
                let names: Vec<String> = (0..6).map(|i| format!("N{i}")).collect();
                let mut order: Vec<usize> = (0..6).collect();
                for i in (1..6).rev() {
                    order.swap(i, rng.gen_range(0..=i));
                }
                let vecs: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
                let build = |ord: &[usize]| {
                    let mut g = KnowledgeGraph::new();
                    let a = g.add_entity("A");
                    let r = g.add_relation("r");
                    let mut table = Matrix::zeros(8, 3);
                    for &i in ord {
                        let e = g.add_entity(&names[i]);
                        g.add_triple(Triple::new(a, r, e), None);
                        table.row_mut(e.index()).copy_from_slice(&vecs[i]);
                    }
                    g.context_embedding(a, &table).unwrap()
                };
                let x = build(&(0..6).collect::<Vec<_>>());
                let y = build(&order);
                for (p, q) in x.iter().zip(&y) {
                    prop_assert!((p - q).abs() < 1e-12);
                }
            }
        }
    }
}
