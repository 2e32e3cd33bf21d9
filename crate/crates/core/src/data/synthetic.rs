//! Synthetic click corpus with planted topical and graph structure.
//!
//! Every topic owns a private word list and a private entity list, each split in
//! half: titles shown before the split boundary use only the first halves, later
//! titles only the second halves. Entities of a topic are densely linked in the
//! graph, so an unseen test title is related to a user's earlier clicks through
//! shared graph neighbourhoods while sharing no tokens with them.

use super::{ClickLog, TitleRecord};
use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, Triple};
use crate::rng::{Rng, SeedTree};
use crate::util::write_atomic;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// 2017-06-01T00:00:00Z.
pub const BASE_TIMESTAMP: i64 = 1_496_275_200;
const DAY: i64 = 86_400;
const RELATIONS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub topics: usize,
    pub users: usize,
    pub titles_per_topic: usize,
    /// Plain (non-entity) words per topic.
    pub vocab_per_topic: usize,
    pub entities_per_topic: usize,
    /// Probability that two entities of the same topic are linked.
    pub context_density: f64,
    /// Probability that two entities of different topics are linked.
    pub cross_density: f64,
    /// Zipf exponent of entity popularity within a topic. Same-topic pairs are
    /// linked with probability `min(1, c * w_a * w_b)`, with `c` chosen so the mean
    /// over pairs is `context_density`; 0 makes every pair equally likely.
    pub degree_skew: f64,
    /// Probability that an impression's topic is drawn from the wrong pool for its label.
    pub noise: f64,
    pub impressions_per_user: usize,
    pub days: usize,
    pub train_days: usize,
    pub min_user_topics: usize,
    pub max_user_topics: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub min_entities: usize,
    pub max_entities: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            topics: 2,
            users: 100,
            titles_per_topic: 40,
            vocab_per_topic: 40,
            entities_per_topic: 60,
            context_density: 0.68,
            cross_density: 0.0,
            degree_skew: 1.0,
            noise: 0.15,
            impressions_per_user: 8,
            days: 10,
            train_days: 7,
            min_user_topics: 1,
            max_user_topics: 3,
            min_words: 6,
            max_words: 10,
            min_entities: 3,
            max_entities: 5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.topics < 2 {
            return fail(format!("need at least 2 topics to draw non-clicks, got {}", self.topics));
        }
        if self.users == 0 || self.impressions_per_user < 2 {
            return fail("need at least one user and two impressions per user".into());
        }
        if self.titles_per_topic < 2 {
            return fail("need at least 2 titles per topic (one per split)".into());
        }
        if self.vocab_per_topic < 2 {
            return fail("need at least 2 plain words per topic (one per split)".into());
        }
        if self.min_entities > self.max_entities || self.min_words > self.max_words || self.min_words == 0 {
            return fail("word and entity ranges must be non-empty".into());
        }
        if self.max_entities > self.min_words {
            return fail(format!(
                "up to {} entities cannot fit in titles of {} words",
                self.max_entities, self.min_words
            ));
        }
        if self.entities_per_topic / 2 < self.max_entities.max(1) {
            return fail(format!(
                "{} entities per topic cannot supply {} distinct entities per title in each split",
                self.entities_per_topic, self.max_entities
            ));
        }
        for (name, p) in [
            ("context density", self.context_density),
            ("cross density", self.cross_density),
            ("noise", self.noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.degree_skew >= 0.0 && self.degree_skew.is_finite()) {
            return fail(format!("degree skew must be a finite non-negative number, got {}", self.degree_skew));
        }
        if self.min_user_topics == 0 || self.min_user_topics > self.max_user_topics {
            return fail("user topic range must be non-empty and start at 1 or more".into());
        }
        if self.min_user_topics > self.topics - 1 {
            return fail(format!(
                "users need at least one non-preferred topic; {} preferred of {} topics is too many",
                self.min_user_topics, self.topics
            ));
        }
        if self.train_days == 0 || self.train_days >= self.days {
            return fail(format!("train days {} must lie in [1, {})", self.train_days, self.days));
        }
        Ok(())
    }

    /// First timestamp of the test period.
    pub fn boundary(&self) -> i64 {
        BASE_TIMESTAMP + self.train_days as i64 * DAY
    }

    fn user_topic_range(&self) -> (usize, usize) {
        (self.min_user_topics, self.max_user_topics.min(self.topics - 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TitleInfo {
    pub topic: usize,
    /// `"train"` or `"test"`.
    pub split: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub impressions: usize,
    pub triples: usize,
    pub words_per_title: f64,
    pub entities_per_title: f64,
    pub contexts_per_entity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SyntheticSpec,
    pub boundary_ts: i64,
    /// Preferred topics per user.
    pub users: BTreeMap<String, Vec<usize>>,
    /// Topic and split per title text.
    pub titles: BTreeMap<String, TitleInfo>,
    pub stats: CorpusStats,
}

/// In-memory corpus; [`generate_synthetic`] writes it out.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub logs: Vec<ClickLog>,
    pub graph: KnowledgeGraph,
    pub manifest: Manifest,
}

fn entity_name(topic: usize, i: usize) -> String {
    format!("t{topic}_e{i}")
}

fn word_name(topic: usize, i: usize) -> String {
    format!("t{topic}_w{i}")
}

fn build_graph(spec: &SyntheticSpec, rng: &mut Rng) -> KnowledgeGraph {
    let mut g = KnowledgeGraph::new();
    let rels: Vec<_> = (0..RELATIONS).map(|r| g.add_relation(&format!("rel{r}"))).collect();
    let mut ids = Vec::new();
    // popularity relative to the topic mean; ranks are shuffled so both title halves get a mix
    let (mut weight, mut scale) = (Vec::new(), Vec::new());
    let n = spec.entities_per_topic;
    for t in 0..spec.topics {
        let mut w: Vec<f64> = (0..n).map(|r| ((r + 1) as f64).powf(-spec.degree_skew)).collect();
        if spec.degree_skew > 0.0 {
            w.shuffle(rng);
        }
        scale.push(pair_scale(&w, spec.context_density));
        for (i, wi) in w.into_iter().enumerate() {
            ids.push((t, g.add_entity(&entity_name(t, i))));
            weight.push(wi);
        }
    }
    for a in 0..ids.len() {
        for b in a + 1..ids.len() {
            let p = if ids[a].0 == ids[b].0 {
                (scale[ids[a].0] * weight[a] * weight[b]).min(1.0)
            } else {
                spec.cross_density
            };
            if p > 0.0 && rng.gen_bool(p) {
                let r = rels[rng.gen_range(0..RELATIONS)];
                let (h, t) = if rng.gen_bool(0.5) { (ids[a].1, ids[b].1) } else { (ids[b].1, ids[a].1) };
                g.add_triple(Triple::new(h, r, t), None);
            }
        }
    }
    g
}

/// Scale `c` with `mean over pairs a < b of min(1, c * w_a * w_b) = density`.
fn pair_scale(w: &[f64], density: f64) -> f64 {
    let pairs: Vec<f64> = (0..w.len())
        .flat_map(|a| (a + 1..w.len()).map(move |b| w[a] * w[b]))
        .collect();
    if pairs.is_empty() || density <= 0.0 {
        return 0.0;
    }
    let mean = |c: f64| pairs.iter().map(|p| (c * p).min(1.0)).sum::<f64>() / pairs.len() as f64;
    let uncapped = density / (pairs.iter().sum::<f64>() / pairs.len() as f64);
    if uncapped * pairs.iter().copied().fold(0.0, f64::max) <= 1.0 {
        return uncapped;
    }
    let top = 1.0 / pairs.iter().copied().fold(f64::INFINITY, f64::min);
    if density >= 1.0 {
        return top;
    }
    let (mut lo, mut hi) = (uncapped, top);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean(mid) < density {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

fn make_title(spec: &SyntheticSpec, topic: usize, test: bool, rng: &mut Rng) -> TitleRecord {
    let half = |n: usize| if test { (n / 2)..n } else { 0..(n / 2).max(1) };
    let words: Vec<usize> = half(spec.vocab_per_topic).collect();
    let ents: Vec<usize> = half(spec.entities_per_topic).collect();
    let nw = rng.gen_range(spec.min_words..=spec.max_words);
    let ne = rng.gen_range(spec.min_entities..=spec.max_entities).min(nw);
    let mut slots: Vec<(String, Option<String>)> = ents
        .choose_multiple(rng, ne)
        .map(|&i| (entity_name(topic, i), Some(entity_name(topic, i))))
        .collect();
    for _ in ne..nw {
        slots.push((word_name(topic, *words.choose(rng).expect("non-empty word half")), None));
    }
    slots.shuffle(rng);
    let (tokens, entities) = slots.into_iter().unzip();
    TitleRecord::new(tokens, entities).expect("aligned by construction")
}

/// Build the corpus in memory.
pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let seeds = SeedTree::new(spec.seed);
    let graph = build_graph(spec, &mut seeds.child("graph").rng());

    let mut title_rng = seeds.child("titles").rng();
    let n_test = spec.titles_per_topic / 2;
    let n_train = spec.titles_per_topic - n_test;
    // pools[topic][split] -> titles
    let pools: Vec<[Vec<TitleRecord>; 2]> = (0..spec.topics)
        .map(|t| {
            [
                (0..n_train).map(|_| make_title(spec, t, false, &mut title_rng)).collect(),
                (0..n_test).map(|_| make_title(spec, t, true, &mut title_rng)).collect(),
            ]
        })
        .collect();

    let mut user_rng = seeds.child("users").rng();
    let (lo, hi) = spec.user_topic_range();
    let all_topics: Vec<usize> = (0..spec.topics).collect();
    let mut users = BTreeMap::new();
    let mut titles = BTreeMap::new();
    let mut logs = Vec::with_capacity(spec.users * spec.impressions_per_user);
    for u in 0..spec.users {
        let name = format!("u{u:04}");
        let k = user_rng.gen_range(lo..=hi);
        let mut preferred: Vec<usize> = all_topics.choose_multiple(&mut user_rng, k).copied().collect();
        preferred.sort_unstable();
        let others: Vec<usize> = all_topics.iter().copied().filter(|t| !preferred.contains(t)).collect();
        // Impressions come in sessions of one click and one non-click shown on the
        // same day, so every day (and hence every split) is balanced per user.
        let mut sessions: Vec<Vec<u8>> = (0..spec.impressions_per_user / 2).map(|_| vec![1, 0]).collect();
        if spec.impressions_per_user % 2 == 1 {
            sessions.push(vec![user_rng.gen_range(0..=1)]);
        }
        for session in sessions {
            let day = user_rng.gen_range(0..spec.days);
            let start = BASE_TIMESTAMP + day as i64 * DAY + user_rng.gen_range(0..DAY - 60);
            let test = day >= spec.train_days;
            for (offset, label) in session.into_iter().enumerate() {
                let flip = user_rng.gen_bool(spec.noise);
                let pool = if (label == 1) != flip { &preferred } else { &others };
                let topic = *pool.choose(&mut user_rng).expect("both topic pools are non-empty");
                let title = pools[topic][test as usize]
                    .choose(&mut user_rng)
                    .expect("non-empty title pool")
                    .clone();
                titles.entry(title.text()).or_insert_with(|| TitleInfo {
                    topic,
                    split: if test { "test" } else { "train" }.to_string(),
                });
                logs.push(ClickLog {
                    user: name.clone(),
                    title,
                    label,
                    ts: start + offset as i64,
                });
            }
        }
        users.insert(name, preferred);
    }
    logs.sort_by(|a, b| a.ts.cmp(&b.ts).then_with(|| a.user.cmp(&b.user)));

    let stats = measure(&logs, &graph);
    Ok(SyntheticCorpus {
        logs,
        graph,
        manifest: Manifest {
            spec: spec.clone(),
            boundary_ts: spec.boundary(),
            users,
            titles,
            stats,
        },
    })
}

/// Corpus statistics: tokens and linked entities per impression title, neighbours per entity.
pub fn measure(logs: &[ClickLog], graph: &KnowledgeGraph) -> CorpusStats {
    let n = logs.len().max(1) as f64;
    let words: usize = logs.iter().map(|l| l.title.tokens().len()).sum();
    let ents: usize = logs.iter().map(|l| l.title.linked().count()).sum();
    let mut neighbours: BTreeMap<_, BTreeSet<_>> = BTreeMap::new();
    for t in graph.triples() {
        if t.head != t.tail {
            neighbours.entry(t.head).or_default().insert(t.tail);
            neighbours.entry(t.tail).or_default().insert(t.head);
        }
    }
    let contexts: usize = graph.entities().map(|e| neighbours.get(&e).map_or(0, BTreeSet::len)).sum();
    CorpusStats {
        impressions: logs.len(),
        triples: graph.triples().len(),
        words_per_title: words as f64 / n,
        entities_per_title: ents as f64 / n,
        contexts_per_entity: contexts as f64 / graph.num_entities().max(1) as f64,
    }
}

/// Write `logs.jsonl`, `triples.tsv` and `manifest.json` into `dir`.
pub fn generate_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<Manifest> {
    let corpus = synthesize(spec)?;
    std::fs::create_dir_all(dir)?;
    let mut logs = Vec::new();
    super::write_logs(&mut logs, &corpus.logs)?;
    write_atomic(&dir.join("logs.jsonl"), &logs)?;
    let mut triples = Vec::new();
    corpus.graph.write_tsv(&mut triples)?;
    write_atomic(&dir.join("triples.tsv"), &triples)?;
    let mut manifest = serde_json::to_vec_pretty(&corpus.manifest)?;
    manifest.push(b'\n');
    write_atomic(&dir.join("manifest.json"), &manifest)?;
    Ok(corpus.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_logs;

    #[test]
    fn infeasible_specs_are_config_errors() {
        for spec in [
            SyntheticSpec { topics: 0, ..Default::default() },
            SyntheticSpec { topics: 1, ..Default::default() },
            SyntheticSpec { entities_per_topic: 4, ..Default::default() },
            SyntheticSpec { noise: 1.5, ..Default::default() },
            SyntheticSpec { train_days: 10, ..Default::default() },
            SyntheticSpec { min_user_topics: 2, ..Default::default() },
            SyntheticSpec { degree_skew: -1.0, ..Default::default() },
        ] {
            assert!(matches!(synthesize(&spec), Err(Error::Config(_))), "{spec:?}");
        }
    }

    #[test]
    fn no_cross_topic_triples_at_zero_density() {
        let spec = SyntheticSpec {
            users: 10,
            cross_density: 0.0,
            ..Default::default()
        };
        let c = synthesize(&spec).unwrap();
        for t in c.graph.triples() {
            let topic = |e| c.graph.entity_name(e).unwrap().split('_').next().unwrap().to_string();
            assert_eq!(topic(t.head), topic(t.tail));
        }
    }

    #[test]
    fn pair_scale_hits_the_mean_density() {
        let w: Vec<f64> = (1..=60).map(|r| 1.0 / r as f64).collect();
        for density in [0.05, 0.3, 0.68, 0.95] {
            let c = pair_scale(&w, density);
            let mut total = 0.0;
            for a in 0..w.len() {
                for b in a + 1..w.len() {
                    total += (c * w[a] * w[b]).min(1.0);
                }
            }
            let mean = total / (60.0 * 59.0 / 2.0);
            assert!((mean - density).abs() < 1e-9, "{density}: {mean}");
        }
        assert_eq!(pair_scale(&[1.0; 5], 0.4), 0.4);
    }

    #[test]
    fn skew_spreads_degrees_at_fixed_density() {
        let degrees = |skew: f64| {
            let spec = SyntheticSpec { users: 2, degree_skew: skew, ..Default::default() };
            let g = synthesize(&spec).unwrap().graph;
            let mut d: Vec<usize> = g.entities().map(|e| g.context_of(e).unwrap().neighbors.len()).collect();
            d.sort_unstable();
            d
        };
        let (flat, skewed) = (degrees(0.0), degrees(1.0));
        let mean = |d: &[usize]| d.iter().sum::<usize>() as f64 / d.len() as f64;
        assert!((mean(&flat) - mean(&skewed)).abs() < 0.05 * mean(&flat));
        let spread = |d: &[usize]| d[d.len() - 1] - d[0];
        assert!(spread(&skewed) > 2 * spread(&flat), "{flat:?}\n{skewed:?}");
        // the most popular entities link to all 59 others of their topic
        assert_eq!(skewed[skewed.len() - 1], 59);
    }

    #[test]
    fn noiseless_clicks_follow_preferences() {
        let spec = SyntheticSpec {
            topics: 5,
            noise: 0.0,
            min_user_topics: 2,
            max_user_topics: 3,
            seed: 4,
            ..Default::default()
        };
        let c = synthesize(&spec).unwrap();
        for log in &c.logs {
            let topic = c.manifest.titles[&log.title.text()].topic;
            let preferred = c.manifest.users[&log.user].contains(&topic);
            assert_eq!(preferred, log.label == 1);
        }
    }

    #[test]
    fn labels_balanced_per_user_within_each_split_and_splits_disjoint_in_tokens() {
        let c = synthesize(&SyntheticSpec::default()).unwrap();
        let mut per_user: BTreeMap<(&str, bool), (usize, usize)> = BTreeMap::new();
        for l in &c.logs {
            let e = per_user.entry((&l.user, l.ts >= c.manifest.boundary_ts)).or_default();
            if l.label == 1 {
                e.0 += 1
            } else {
                e.1 += 1
            }
        }
        assert!(per_user.values().all(|(p, n)| p == n));
        let (train, test) = crate::data::time_split(&c.logs, c.manifest.boundary_ts);
        let train_tokens: BTreeSet<&String> = train.iter().flat_map(|l| l.title.tokens()).collect();
        assert!(test.iter().flat_map(|l| l.title.tokens()).all(|w| !train_tokens.contains(w)));
        for l in &c.logs {
            let split = &c.manifest.titles[&l.title.text()].split;
            assert_eq!(split == "test", l.ts >= c.manifest.boundary_ts);
        }
    }

    #[test]
    fn generated_files_hit_target_statistics() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::default();
        generate_synthetic(&spec, dir.path()).unwrap();
        let logs = load_logs(&dir.path().join("logs.jsonl")).unwrap().logs;
        let graph = KnowledgeGraph::load_tsv(&dir.path().join("triples.tsv"), None).unwrap();
        let s = measure(&logs, &graph);
        let within = |v: f64, target: f64| (v - target).abs() <= 0.15 * target;
        assert!(within(s.words_per_title, 8.0), "{s:?}");
        assert!(within(s.entities_per_title, 4.0), "{s:?}");
        assert!(within(s.contexts_per_entity, 40.0), "{s:?}");
        assert_eq!(s.impressions, 800);
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SyntheticSpec {
            users: 20,
            seed: 9,
            ..Default::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_synthetic(&spec, a.path()).unwrap();
        generate_synthetic(&spec, b.path()).unwrap();
        for f in ["logs.jsonl", "triples.tsv", "manifest.json"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }
}
