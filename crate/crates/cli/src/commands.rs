use crate::inputs::{load_config, prepare_out, write_json, write_resolved, DataArgs};
use crate::Global;
use clap::Args;
use dkn_core::attention::UserMode;
use dkn_core::data::{generate_synthetic, load_logs, mentioned_entities, ClickLog, SyntheticSpec};
use dkn_core::eval::{self, ScoredImpression};
use dkn_core::experiment::{self, AblationSetup};
use dkn_core::kcnn::{Encoder, KnowledgeMode, Mapping};
use dkn_core::kg::KnowledgeGraph;
use dkn_core::kge::{train_kge as fit_kge, KgeModel, KgeVariant, MarginConfig};
use dkn_core::model::{load_model, save_model, score, train, Knowledge, TrainConfig};
use dkn_core::util::write_atomic;
use dkn_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeSet;
use std::path::PathBuf;

macro_rules! set {
    ($target:expr, $flag:expr) => {
        if let Some(v) = $flag.clone() {
            $target = v;
        }
    };
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    topics: Option<usize>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    titles_per_topic: Option<usize>,
    #[arg(long)]
    vocab_per_topic: Option<usize>,
    #[arg(long)]
    entities_per_topic: Option<usize>,
    #[arg(long)]
    context_density: Option<f64>,
    #[arg(long)]
    cross_density: Option<f64>,
    #[arg(long)]
    degree_skew: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    impressions_per_user: Option<usize>,
    #[arg(long)]
    days: Option<usize>,
    #[arg(long)]
    train_days: Option<usize>,
    #[arg(long)]
    min_user_topics: Option<usize>,
    #[arg(long)]
    max_user_topics: Option<usize>,
}

pub fn gen(global: &Global, a: GenArgs) -> Result<()> {
    let (mut spec, _) = load_config::<SyntheticSpec>(global)?;
    set!(spec.topics, a.topics);
    set!(spec.users, a.users);
    set!(spec.titles_per_topic, a.titles_per_topic);
    set!(spec.vocab_per_topic, a.vocab_per_topic);
    set!(spec.entities_per_topic, a.entities_per_topic);
    set!(spec.context_density, a.context_density);
    set!(spec.cross_density, a.cross_density);
    set!(spec.degree_skew, a.degree_skew);
    set!(spec.noise, a.noise);
    set!(spec.impressions_per_user, a.impressions_per_user);
    set!(spec.days, a.days);
    set!(spec.train_days, a.train_days);
    set!(spec.min_user_topics, a.min_user_topics);
    set!(spec.max_user_topics, a.max_user_topics);
    set!(spec.seed, global.seed);
    spec.validate()?;
    let dir = prepare_out(global, &["logs.jsonl", "triples.tsv", "manifest.json", "config.json"])?;
    let manifest = generate_synthetic(&spec, &dir)?;
    write_resolved(&dir, "gen", &spec, Value::Null)?;
    log::info!(
        "wrote {} impressions and {} triples to {}",
        manifest.stats.impressions,
        manifest.stats.triples,
        dir.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Full triples TSV.
    #[arg(long)]
    triples: PathBuf,
    /// Click log whose linked entities seed the sub-graph.
    #[arg(long)]
    logs: PathBuf,
    #[arg(long)]
    min_confidence: Option<f64>,
}

pub fn distill(global: &Global, a: DistillArgs) -> Result<()> {
    let dir = prepare_out(global, &["subgraph.tsv", "contexts.tsv", "config.json"])?;
    let graph = KnowledgeGraph::load_tsv(&a.triples, a.min_confidence)?;
    let logs = load_logs(&a.logs)?;
    let mentioned = mentioned_entities(&logs.logs);
    let seeds: BTreeSet<_> = mentioned.iter().filter_map(|n| graph.entity_id(n)).collect();
    let missing = mentioned.len() - seeds.len();
    if missing > 0 {
        log::warn!("{missing} entities mentioned in the logs are not in the graph");
    }
    if seeds.is_empty() {
        log::warn!("no entity of the logs occurs in the graph; the sub-graph is empty");
    }
    let sub = graph.expand_subgraph(&seeds)?;
    let mut triples = Vec::new();
    sub.write_tsv(&mut triples)?;
    write_atomic(&dir.join("subgraph.tsv"), &triples)?;
    // entity<TAB>neighbour<TAB>neighbour...
    let mut contexts = String::new();
    for e in sub.entities() {
        contexts.push_str(sub.entity_name(e).unwrap_or_default());
        for n in sub.context_of(e)?.neighbors {
            contexts.push('\t');
            contexts.push_str(sub.entity_name(n).unwrap_or_default());
        }
        contexts.push('\n');
    }
    write_atomic(&dir.join("contexts.tsv"), contexts.as_bytes())?;
    write_resolved(
        &dir,
        "distill",
        &json!({ "min_confidence": a.min_confidence }),
        json!({ "triples": a.triples, "logs": a.logs }),
    )?;
    log::info!(
        "sub-graph: {} entities, {} triples (from {} seeds)",
        sub.num_entities(),
        sub.triples().len(),
        seeds.len()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KgeRun {
    pub variant: KgeVariant,
    pub margin: MarginConfig,
}

impl Default for KgeRun {
    fn default() -> Self {
        Self {
            variant: KgeVariant::TransE,
            margin: MarginConfig::default(),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainKgeArgs {
    #[arg(long)]
    graph: PathBuf,
    /// E, H, R or D.
    #[arg(long)]
    variant: Option<KgeVariant>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    min_confidence: Option<f64>,
}

pub fn train_kge(global: &Global, a: TrainKgeArgs) -> Result<()> {
    let (mut run, _) = load_config::<KgeRun>(global)?;
    set!(run.variant, a.variant);
    set!(run.margin.dim, a.dim);
    set!(run.margin.margin, a.margin);
    set!(run.margin.negatives, a.negatives);
    set!(run.margin.epochs, a.epochs);
    set!(run.margin.batch_size, a.batch_size);
    set!(run.margin.learning_rate, a.lr);
    set!(run.margin.seed, global.seed);
    run.margin.validate()?;
    let dir = prepare_out(global, &["kge.json", "entities.tsv", "relations.tsv", "config.json"])?;
    let graph = KnowledgeGraph::load_tsv(&a.graph, a.min_confidence)?;
    let trained = fit_kge(&graph, &run.margin, run.variant)?;
    trained.model.save_dir(&dir, &graph, &run.margin, &trained.loss_trace)?;
    write_resolved(
        &dir,
        "train-kge",
        &run,
        json!({ "graph": a.graph, "min_confidence": a.min_confidence }),
    )?;
    log::info!(
        "{} on {} triples, final loss {:.5}",
        run.variant,
        graph.triples().len(),
        trained.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Model settings shared by `train-dkn` and `ablate`.
#[derive(Debug, Clone, Args)]
pub struct ModelFlags {
    /// none, entity, context or both.
    #[arg(long)]
    knowledge: Option<KnowledgeMode>,
    /// Entity-to-word-space mapping: none, linear or nonlinear. Defaults to
    /// nonlinear with knowledge and none without.
    #[arg(long)]
    g_mode: Option<Mapping>,
    /// attention or average.
    #[arg(long)]
    user_mode: Option<UserMode>,
    /// kcnn or concat.
    #[arg(long)]
    encoder: Option<Encoder>,
    /// One mapping for both knowledge channels.
    #[arg(long)]
    shared_transform: bool,
    #[arg(long)]
    word_dim: Option<usize>,
    #[arg(long)]
    entity_dim: Option<usize>,
    #[arg(long)]
    title_len: Option<usize>,
    /// Comma-separated window sizes.
    #[arg(long, value_delimiter = ',')]
    windows: Option<Vec<usize>>,
    /// Filters per window size.
    #[arg(long)]
    filters: Option<usize>,
    #[arg(long)]
    attention_hidden: Option<usize>,
    /// Comma-separated hidden widths of the click predictor.
    #[arg(long, value_delimiter = ',')]
    predictor_hidden: Option<Vec<usize>>,
    #[arg(long)]
    history_cap: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

/// Graph-embedding settings used when the click model needs knowledge tables.
#[derive(Debug, Clone, Args)]
pub struct KgeFlags {
    /// E, H, R or D.
    #[arg(long)]
    kge_variant: Option<KgeVariant>,
    #[arg(long)]
    kge_epochs: Option<usize>,
    #[arg(long)]
    kge_margin: Option<f64>,
    #[arg(long)]
    kge_lr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DknRun {
    pub train: TrainConfig,
    pub kge: KgeRun,
}

fn resolve_dkn(global: &Global, m: &ModelFlags, k: &KgeFlags) -> Result<DknRun> {
    let (mut run, raw) = load_config::<DknRun>(global)?;
    let t = &mut run.train;
    set!(t.kcnn.knowledge, m.knowledge);
    set!(t.user_mode, m.user_mode);
    set!(t.kcnn.encoder, m.encoder);
    t.kcnn.shared_transform |= m.shared_transform;
    set!(t.kcnn.word_dim, m.word_dim);
    set!(t.kcnn.entity_dim, m.entity_dim);
    set!(t.kcnn.title_len, m.title_len);
    set!(t.kcnn.windows, m.windows);
    set!(t.kcnn.filters, m.filters);
    set!(t.attention_hidden, m.attention_hidden);
    set!(t.predictor_hidden, m.predictor_hidden);
    set!(t.history_cap, m.history_cap);
    set!(t.epochs, m.epochs);
    set!(t.batch_size, m.batch_size);
    set!(t.learning_rate, m.lr);
    set!(t.seed, global.seed);
    let mapping_in_file = raw.pointer("/train/kcnn/mapping").is_some();
    t.kcnn.mapping = match m.g_mode {
        Some(g) => g,
        None if mapping_in_file => t.kcnn.mapping,
        None if t.kcnn.knowledge == KnowledgeMode::None => Mapping::None,
        None => Mapping::Nonlinear,
    };
    if t.kcnn.encoder == Encoder::Concat && m.g_mode.is_none() && !mapping_in_file {
        t.kcnn.mapping = Mapping::None;
    }
    set!(run.kge.variant, k.kge_variant);
    set!(run.kge.margin.epochs, k.kge_epochs);
    set!(run.kge.margin.margin, k.kge_margin);
    set!(run.kge.margin.learning_rate, k.kge_lr);
    run.kge.margin.dim = run.train.kcnn.entity_dim;
    run.kge.margin.seed = run.train.seed;
    run.train.validate()?;
    run.kge.margin.validate()?;
    Ok(run)
}

#[derive(Debug, Args)]
pub struct TrainDknArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    kge: KgeFlags,
    /// Pre-trained graph embeddings (a `train-kge` output directory). When absent
    /// and knowledge is needed, embeddings are trained first with the --kge-* settings.
    #[arg(long = "kge")]
    kge_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct TestMetrics {
    impressions: usize,
    auc: Option<f64>,
    f1: eval::F1Report,
}

fn test_metrics(scored: &[ScoredImpression]) -> Result<TestMetrics> {
    let auc = match eval::auc(scored) {
        Ok(a) => Some(a),
        Err(Error::UndefinedMetric(msg)) => {
            log::warn!("test AUC undefined: {msg}");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(TestMetrics {
        impressions: scored.len(),
        auc,
        f1: eval::f1(scored, 0.5),
    })
}

pub fn train_dkn(global: &Global, a: TrainDknArgs) -> Result<()> {
    let run = resolve_dkn(global, &a.model, &a.kge)?;
    let dir = prepare_out(global, &["model.bin", "metrics.json", "config.json"])?;
    let inputs = a.data.resolve()?;
    let knowledge = if run.train.kcnn.needs_tables() {
        let graph = inputs.graph()?;
        let entities = match &a.kge_dir {
            Some(kdir) => {
                let (model, sidecar) = KgeModel::load_dir(kdir, &graph)?;
                if sidecar.dim != run.train.kcnn.entity_dim {
                    return Err(Error::Config(format!(
                        "embeddings in {} have dimension {}, the model expects entity dimension {}",
                        kdir.display(),
                        sidecar.dim,
                        run.train.kcnn.entity_dim
                    )));
                }
                model.entities
            }
            None => fit_kge(&graph, &run.kge.margin, run.kge.variant)?.model.entities,
        };
        Some(Knowledge::from_graph(&graph, entities)?)
    } else {
        None
    };
    let validation = (!inputs.test.is_empty()).then_some(inputs.test.as_slice());
    let trained = train(&inputs.train, knowledge, &run.train, validation)?;
    let test = match validation {
        Some(v) => {
            let data = trained.model.dataset(&inputs.train, v);
            Some(test_metrics(&score(&trained.model, &data)?)?)
        }
        None => None,
    };
    save_model(&trained.model, &dir.join("model.bin"))?;
    write_json(
        &dir.join("metrics.json"),
        &json!({
            "train_impressions": inputs.train.len(),
            "split_ts": inputs.split_ts,
            "trace": trained.trace,
            "test": test,
        }),
    )?;
    let mut described = a.data.describe();
    described["kge"] = json!(a.kge_dir);
    write_resolved(&dir, "train-dkn", &run, described)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train-dkn`.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Positive-class threshold for F1.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Also report F1 at thresholds 0.05, 0.10, ..., 0.95.
    #[arg(long)]
    sweep: bool,
}

/// Logs to score and the logs users' histories come from: the test split
/// against the training split, or the whole log against itself.
fn eval_parts(a: &DataArgs) -> Result<(Vec<ClickLog>, Vec<ClickLog>)> {
    let inputs = a.resolve()?;
    if inputs.split_ts.is_some() {
        Ok((inputs.train, inputs.test))
    } else {
        Ok((inputs.train.clone(), inputs.train))
    }
}

pub fn eval(global: &Global, a: EvalArgs) -> Result<()> {
    let dir = prepare_out(global, &["metrics.json"])?;
    let model = load_model(&a.model, None)?;
    let (history, logs) = eval_parts(&a.data)?;
    if logs.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let data = model.dataset(&history, &logs);
    let scored = score(&model, &data)?;
    let auc = eval::auc(&scored)?;
    let sweep = a.sweep.then(|| {
        let thresholds: Vec<f64> = (1..20).map(|i| i as f64 / 20.0).collect();
        eval::f1_sweep(&scored, &thresholds)
            .into_iter()
            .map(|(t, r)| json!({ "threshold": t, "f1": r.f1, "precision": r.precision, "recall": r.recall }))
            .collect::<Vec<_>>()
    });
    write_json(
        &dir.join("metrics.json"),
        &json!({
            "impressions": scored.len(),
            "eval_fingerprint": experiment::eval_fingerprint(&logs)?,
            "auc": auc,
            "threshold": a.threshold,
            "f1": eval::f1(&scored, a.threshold),
            "daily": eval::daily_trace(&scored)?,
            "sweep": sweep,
        }),
    )?;
    log::info!("{} impressions: auc {auc:.4}", scored.len());
    Ok(())
}

#[derive(Debug, Args)]
pub struct ExportAttentionArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    user: String,
    #[command(flatten)]
    data: DataArgs,
    /// Keep at most this many candidates (the user's earliest impressions).
    #[arg(long, default_value_t = 10)]
    max_candidates: usize,
}

pub fn export_attention(global: &Global, a: ExportAttentionArgs) -> Result<()> {
    let dir = prepare_out(global, &["attention.json"])?;
    let model = load_model(&a.model, None)?;
    let (history_logs, logs) = eval_parts(&a.data)?;
    let mut clicks: Vec<&ClickLog> = history_logs
        .iter()
        .filter(|l| l.user == a.user && l.label == 1)
        .collect();
    clicks.sort_by_key(|l| l.ts);
    let clicks = &clicks[clicks.len().saturating_sub(model.config.history_cap)..];
    let mut candidates: Vec<&ClickLog> = logs.iter().filter(|l| l.user == a.user).collect();
    candidates.sort_by_key(|l| l.ts);
    candidates.truncate(a.max_candidates);
    if candidates.is_empty() {
        return Err(Error::Dataset(format!("user {:?} has no impressions to use as candidates", a.user)));
    }
    let weights: Vec<Vec<f64>> = if clicks.is_empty() {
        log::warn!("user {:?} has no clicks; the attention matrix is empty", a.user);
        Vec::new()
    } else {
        let h: Vec<_> = clicks.iter().map(|l| model.encode_record(&l.title)).collect();
        let c: Vec<_> = candidates.iter().map(|l| model.encode_record(&l.title)).collect();
        let w = model.attention_matrix(&h, &c)?;
        (0..w.rows()).map(|r| w.row(r).to_vec()).collect()
    };
    write_json(
        &dir.join("attention.json"),
        &json!({
            "user": a.user,
            "user_mode": model.config.user_mode,
            "clicked": clicks.iter().map(|l| l.title.text()).collect::<Vec<_>>(),
            "candidates": candidates.iter().map(|l| json!({ "title": l.title.text(), "label": l.label, "ts": l.ts })).collect::<Vec<_>>(),
            "weights": weights,
        }),
    )?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    kge: KgeFlags,
    /// Number of seeds; seed values run from --seed upward.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Comma-separated subset of the variant grid.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
}

pub fn ablate(global: &Global, a: AblateArgs) -> Result<()> {
    let run = resolve_dkn(global, &a.model, &a.kge)?;
    let dir = prepare_out(global, &["report.json", "report.txt", "config.json"])?;
    let inputs = a.data.resolve()?;
    if inputs.test.is_empty() {
        return Err(Error::Config("an ablation needs a held-out split (--split-ts or a manifest)".into()));
    }
    let mut variants = experiment::standard_variants(&run.train);
    if let Some(keep) = &a.variants {
        if let Some(bad) = keep.iter().find(|k| !variants.iter().any(|v| &v.name == *k)) {
            return Err(Error::Config(format!(
                "unknown variant {bad:?}; available: {}",
                variants.iter().map(|v| v.name.as_str()).collect::<Vec<_>>().join(", ")
            )));
        }
        variants.retain(|v| keep.contains(&v.name));
    }
    let graph = if variants.iter().any(|v| v.config.kcnn.needs_tables()) {
        inputs.graph()?
    } else {
        KnowledgeGraph::new()
    };
    let setup = AblationSetup {
        kge: run.kge.margin.clone(),
        kge_variant: run.kge.variant,
        seeds: (0..a.seeds).map(|i| run.train.seed + i).collect(),
    };
    let (report, runs) = experiment::ablate(&inputs.train, &inputs.test, &graph, &variants, &setup)?;
    write_json(&dir.join("report.json"), &json!({ "report": report, "runs": runs }))?;
    write_atomic(&dir.join("report.txt"), report.to_text().as_bytes())?;
    write_resolved(
        &dir,
        "ablate",
        &json!({ "variants": variants, "setup": setup }),
        a.data.describe(),
    )?;
    print!("{}", report.to_text());
    Ok(())
}
