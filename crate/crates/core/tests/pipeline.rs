use dkn_core::attention::{predict_ctr, user_embedding, UserMode};
use dkn_core::data::{ClickLog, TitleRecord};
use dkn_core::eval::auc;
use dkn_core::experiment::fit_knowledge;
use dkn_core::kcnn::{KcnnConfig, KnowledgeMode, Mapping};
use dkn_core::kg::KnowledgeGraph;
use dkn_core::kge::{KgeVariant, MarginConfig};
use dkn_core::model::{load_model, save_model, score, train, Knowledge, TrainConfig};
use dkn_core::nn::Matrix;
use dkn_core::rng::SeedTree;
use dkn_core::Error;
use rand::seq::SliceRandom;
use rand::Rng;

fn small(knowledge: KnowledgeMode, mapping: Mapping) -> TrainConfig {
    TrainConfig {
        kcnn: KcnnConfig {
            word_dim: 8,
            entity_dim: 8,
            title_len: 8,
            windows: vec![1, 2],
            filters: 4,
            knowledge,
            mapping,
            ..Default::default()
        },
        attention_hidden: 8,
        predictor_hidden: vec![8],
        batch_size: 16,
        ..Default::default()
    }
}

fn log(user: usize, tokens: Vec<String>, entities: Vec<Option<String>>, label: u8, ts: i64) -> ClickLog {
    ClickLog {
        user: format!("u{user}"),
        title: TitleRecord::new(tokens, entities).unwrap(),
        label,
        ts,
    }
}

/// Random titles over a shared filler vocabulary; `word` is appended to positives
/// and `other` to negatives when given.
fn corpus(seed: u64, users: usize, per_user: usize, marker: Option<(&str, &str)>) -> Vec<ClickLog> {
    let mut rng = SeedTree::new(seed).rng();
    let mut logs = Vec::new();
    for u in 0..users {
        for k in 0..per_user {
            let label = (k % 2) as u8;
            let mut tokens: Vec<String> = (0..rng.gen_range(3..6)).map(|_| format!("w{}", rng.gen_range(0..30))).collect();
            if let Some((pos, neg)) = marker {
                let at = rng.gen_range(0..=tokens.len());
                tokens.insert(at, if label == 1 { pos } else { neg }.to_string());
            }
            let ents: Vec<Option<String>> = tokens
                .iter()
                .map(|t| (rng.gen_bool(0.3)).then(|| format!("e{}", t.len() + rng.gen_range(0..6))))
                .collect();
            logs.push(log(u, tokens, ents, label, (u * 100 + k) as i64));
        }
    }
    logs
}

fn graph() -> KnowledgeGraph {
    let triples: Vec<(String, String, String)> =
        (0..12).map(|i| (format!("e{i}"), format!("r{}", i % 2), format!("e{}", (i * 5 + 1) % 12))).collect();
    KnowledgeGraph::from_named(&triples)
}

fn knowledge(seed: u64) -> Knowledge {
    let cfg = MarginConfig {
        dim: 8,
        epochs: 5,
        seed,
        ..Default::default()
    };
    fit_knowledge(&graph(), &cfg, KgeVariant::TransE).unwrap()
}

#[test]
fn random_labels_stay_near_chance_loss() {
    // every input appears once with each label, so the best achievable loss is ln 2
    let mut logs = corpus(1, 20, 10, None);
    let twins: Vec<ClickLog> = logs
        .iter()
        .map(|l| ClickLog {
            label: 1 - l.label,
            ..l.clone()
        })
        .collect();
    logs.extend(twins);
    let mut cfg = small(KnowledgeMode::None, Mapping::None);
    cfg.epochs = 20;
    cfg.learning_rate = 0.01;
    let trained = train(&logs, None, &cfg, None).unwrap();
    let last = trained.trace.last().unwrap().train_loss;
    assert!(trained.trace.iter().all(|m| m.train_loss >= 0.65), "{:?}", trained.trace);
    assert!((last - std::f64::consts::LN_2).abs() < 0.03, "{last}");
}

#[test]
fn one_informative_word_is_learned() {
    let logs = corpus(2, 20, 10, Some(("good", "bad")));
    let mut cfg = small(KnowledgeMode::None, Mapping::None);
    cfg.epochs = 30;
    cfg.learning_rate = 0.01;
    let trained = train(&logs, None, &cfg, None).unwrap();
    let data = trained.model.dataset(&logs, &logs);
    let a = auc(&score(&trained.model, &data).unwrap()).unwrap();
    assert!(a > 0.99, "{a}");
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let logs = corpus(3, 8, 6, Some(("good", "bad")));
    let mut cfg = small(KnowledgeMode::Both, Mapping::Nonlinear);
    cfg.epochs = 3;
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for name in ["a.bin", "b.bin"] {
        let trained = train(&logs, Some(knowledge(4)), &cfg, None).unwrap();
        save_model(&trained.model, &dir.path().join(name)).unwrap();
        bytes.push(std::fs::read(dir.path().join(name)).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    cfg.seed = 1;
    let other = train(&logs, Some(knowledge(4)), &cfg, None).unwrap();
    save_model(&other.model, &dir.path().join("c.bin")).unwrap();
    assert_ne!(bytes[0], std::fs::read(dir.path().join("c.bin")).unwrap());
}

#[test]
fn checkpoint_refuses_other_knowledge_mode() {
    let logs = corpus(5, 4, 4, None);
    let mut cfg = small(KnowledgeMode::Both, Mapping::Nonlinear);
    cfg.epochs = 1;
    let trained = train(&logs, Some(knowledge(5)), &cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    save_model(&trained.model, &path).unwrap();
    assert!(load_model(&path, Some(&cfg)).is_ok());
    let expected = small(KnowledgeMode::None, Mapping::None);
    match load_model(&path, Some(&expected)) {
        Err(e @ Error::Checkpoint(_)) => {
            let msg = e.to_string();
            assert!(msg.contains("both") && msg.contains("none"), "{msg}");
        }
        other => panic!("expected a checkpoint error, got {other:?}"),
    }
}

#[test]
fn no_knowledge_ignores_the_graph() {
    let logs = corpus(6, 6, 6, Some(("good", "bad")));
    let mut cfg = small(KnowledgeMode::None, Mapping::None);
    cfg.epochs = 2;
    let without = train(&logs, None, &cfg, None).unwrap();
    let with = train(&logs, Some(knowledge(9)), &cfg, None).unwrap();
    assert!(with.model.knowledge.is_none());
    assert_eq!(without.model.tensors(), with.model.tensors());
    assert_eq!(without.trace, with.trace);
}

#[test]
fn forward_is_the_composition_of_its_parts() {
    let logs = corpus(7, 6, 8, Some(("good", "bad")));
    for mode in [UserMode::Attention, UserMode::Average] {
        let mut cfg = small(KnowledgeMode::Both, Mapping::Nonlinear);
        cfg.user_mode = mode;
        cfg.epochs = 2;
        let model = train(&logs, Some(knowledge(7)), &cfg, None).unwrap().model;
        let data = model.dataset(&logs, &logs);
        let tables = model.knowledge.as_ref().map(|k| &k.tables);
        let mut rng = SeedTree::new(8).rng();
        let mut checked = 0;
        for imp in data.impressions.iter().filter(|i| !i.history.is_empty()) {
            let cand = model.kcnn.encode(&data.titles[imp.candidate], tables).unwrap();
            let rows: Vec<Vec<f64>> =
                imp.history.iter().map(|&h| model.kcnn.encode(&data.titles[h], tables).unwrap()).collect();
            let user = user_embedding(&Matrix::from_rows(&rows).unwrap(), &cand, &model.attention, mode).unwrap();
            let expect = predict_ctr(&user, &cand, &model.predictor).unwrap();
            let mut hist: Vec<_> = imp.history.iter().map(|&h| data.titles[h].clone()).collect();
            let p = model.forward(&hist, &data.titles[imp.candidate]).unwrap();
            assert!((p - expect).abs() < 1e-12);
            hist.shuffle(&mut rng);
            let q = model.forward(&hist, &data.titles[imp.candidate]).unwrap();
            assert!((p - q).abs() < 1e-12, "history order changed the prediction: {p} vs {q}");
            checked += 1;
        }
        assert!(checked > 20);
    }
}
