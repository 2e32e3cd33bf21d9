//! Multi-seed variant comparisons on a fixed train/test split.

use crate::attention::UserMode;
use crate::data::ClickLog;
use crate::error::{Error, Result};
use crate::eval::{self, AblationReport, RunMetrics, ScoredImpression, VariantRuns};
use crate::kcnn::{Encoder, KnowledgeMode, Mapping};
use crate::kg::KnowledgeGraph;
use crate::kge::{train_kge, KgeVariant, MarginConfig};
use crate::model::{score, train, Knowledge, TrainConfig, Trained};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
}

impl Variant {
    pub fn new(name: &str, config: TrainConfig) -> Self {
        Self {
            name: name.to_string(),
            config,
        }
    }
}

/// The standard grid around `base` (which should be the full model). Variants
/// that feed raw entity vectors into the word space are included only when the
/// word and entity dimensions agree.
pub fn standard_variants(base: &TrainConfig) -> Vec<Variant> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let mut out = vec![
        Variant::new("full", base.clone()),
        Variant::new("entity-only", with(&|c| c.kcnn.knowledge = KnowledgeMode::Entity)),
        Variant::new(
            "no-knowledge",
            with(&|c| {
                c.kcnn.knowledge = KnowledgeMode::None;
                c.kcnn.mapping = Mapping::None;
            }),
        ),
        Variant::new("linear-mapping", with(&|c| c.kcnn.mapping = Mapping::Linear)),
        Variant::new("average-pooling", with(&|c| c.user_mode = UserMode::Average)),
    ];
    if base.kcnn.word_dim == base.kcnn.entity_dim {
        out.insert(4, Variant::new("no-mapping", with(&|c| c.kcnn.mapping = Mapping::None)));
        out.push(Variant::new(
            "concat-input",
            with(&|c| {
                c.kcnn.encoder = Encoder::Concat;
                c.kcnn.mapping = Mapping::None;
            }),
        ));
    }
    out
}

/// Train graph embeddings and wrap them with their context table.
pub fn fit_knowledge(graph: &KnowledgeGraph, config: &MarginConfig, variant: KgeVariant) -> Result<Knowledge> {
    let trained = train_kge(graph, config, variant)?;
    Knowledge::from_graph(graph, trained.model.entities)
}

/// Identifies a test set by content.
pub fn eval_fingerprint(logs: &[ClickLog]) -> Result<String> {
    let lines = logs.iter().map(ClickLog::to_json_line).collect::<Result<Vec<_>>>()?;
    crate::util::config_hash(&lines)
}

pub struct VariantRun {
    pub trained: Trained,
    pub scored: Vec<ScoredImpression>,
    pub metrics: RunMetrics,
}

/// Train on `train_logs` and score `test_logs`, with histories taken from the training logs.
pub fn run_variant(
    train_logs: &[ClickLog],
    test_logs: &[ClickLog],
    knowledge: Option<Knowledge>,
    config: &TrainConfig,
    fingerprint: &str,
) -> Result<VariantRun> {
    let trained = train(train_logs, knowledge, config, None)?;
    let data = trained.model.dataset(train_logs, test_logs);
    let scored = score(&trained.model, &data)?;
    let metrics = RunMetrics {
        seed: config.seed,
        auc: eval::auc(&scored)?,
        f1: eval::f1(&scored, 0.5).f1,
        eval_fingerprint: fingerprint.to_string(),
    };
    Ok(VariantRun {
        trained,
        scored,
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSetup {
    pub kge: MarginConfig,
    pub kge_variant: KgeVariant,
    pub seeds: Vec<u64>,
}

/// Every variant under every seed. Each seed gets its own graph embedding
/// (seeded identically), shared by all variants of that seed.
pub fn ablate(
    train_logs: &[ClickLog],
    test_logs: &[ClickLog],
    graph: &KnowledgeGraph,
    variants: &[Variant],
    setup: &AblationSetup,
) -> Result<(AblationReport, Vec<VariantRuns>)> {
    if variants.is_empty() || setup.seeds.is_empty() {
        return Err(Error::Config("an ablation needs at least one variant and one seed".into()));
    }
    let fingerprint = eval_fingerprint(test_logs)?;
    let mut runs: Vec<VariantRuns> = variants
        .iter()
        .map(|v| VariantRuns {
            name: v.name.clone(),
            runs: Vec::new(),
        })
        .collect();
    let needs_tables = variants.iter().any(|v| v.config.kcnn.needs_tables());
    for &seed in &setup.seeds {
        let knowledge = if needs_tables {
            let kge = MarginConfig {
                seed,
                ..setup.kge.clone()
            };
            Some(fit_knowledge(graph, &kge, setup.kge_variant)?)
        } else {
            None
        };
        for (v, slot) in variants.iter().zip(runs.iter_mut()) {
            let config = TrainConfig {
                seed,
                ..v.config.clone()
            };
            let k = if config.kcnn.needs_tables() { knowledge.clone() } else { None };
            let run = run_variant(train_logs, test_logs, k, &config, &fingerprint)?;
            log::info!("{} seed {seed}: auc {:.4} f1 {:.4}", v.name, run.metrics.auc, run.metrics.f1);
            slot.runs.push(run.metrics);
        }
    }
    Ok((eval::ablation_report(&runs)?, runs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kcnn::KcnnConfig;

    #[test]
    fn grid_depends_on_dimension_match() {
        let base = TrainConfig::default();
        let names: Vec<String> = standard_variants(&base).into_iter().map(|v| v.name).collect();
        assert_eq!(
            names,
            [
                "full",
                "entity-only",
                "no-knowledge",
                "linear-mapping",
                "no-mapping",
                "average-pooling",
                "concat-input"
            ]
        );
        let uneven = TrainConfig {
            kcnn: KcnnConfig {
                entity_dim: 50,
                ..Default::default()
            },
            ..Default::default()
        };
        for v in standard_variants(&uneven) {
            v.config.validate().unwrap();
            assert!(v.name != "no-mapping" && v.name != "concat-input");
        }
    }
}
