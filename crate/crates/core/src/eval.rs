//! AUC, F1, per-day traces and ablation reports.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredImpression {
    pub prob: f64,
    pub label: u8,
    pub ts: i64,
}

fn class_counts(scored: &[ScoredImpression]) -> (usize, usize) {
    let pos = scored.iter().filter(|s| s.label == 1).count();
    (pos, scored.len() - pos)
}

/// Rank-based AUC with tied scores sharing their average rank.
pub fn auc(scored: &[ScoredImpression]) -> Result<f64> {
    let (pos, neg) = class_counts(scored);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    if let Some(s) = scored.iter().find(|s| s.prob.is_nan()) {
        return Err(Error::Numeric(format!("NaN score at timestamp {}", s.ts)));
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].prob.total_cmp(&scored[b].prob));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scored[order[j + 1]].prob == scored[order[i]].prob {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| scored[k].label == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    /// Predict positive when `prob >= threshold`.
    pub fn at(scored: &[ScoredImpression], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for s in scored {
            match (s.prob >= threshold, s.label == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// Set when precision or recall had a zero denominator and was taken as 0.
    pub degenerate: bool,
    pub confusion: Confusion,
}

impl F1Report {
    pub fn from_confusion(c: Confusion) -> Self {
        let predicted = c.tp + c.fp;
        let actual = c.tp + c.fn_;
        let precision = if predicted == 0 { 0.0 } else { c.tp as f64 / predicted as f64 };
        let recall = if actual == 0 { 0.0 } else { c.tp as f64 / actual as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            f1,
            precision,
            recall,
            degenerate: predicted == 0 || actual == 0,
            confusion: c,
        }
    }
}

/// Binary F1 of the positive class.
pub fn f1(scored: &[ScoredImpression], threshold: f64) -> F1Report {
    let report = F1Report::from_confusion(Confusion::at(scored, threshold));
    if report.degenerate {
        log::warn!("F1 at threshold {threshold} is degenerate (no predicted or no actual positives)");
    }
    report
}

/// F1 at each threshold.
pub fn f1_sweep(scored: &[ScoredImpression], thresholds: &[f64]) -> Vec<(f64, F1Report)> {
    thresholds
        .iter()
        .map(|&t| (t, F1Report::from_confusion(Confusion::at(scored, t))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyAuc {
    /// Days since the Unix epoch (UTC).
    pub day: i64,
    pub impressions: usize,
    /// `None` when the day lacks one of the classes.
    pub auc: Option<f64>,
}

pub fn utc_day(ts: i64) -> i64 {
    ts.div_euclid(SECONDS_PER_DAY)
}

/// AUC per UTC day, in day order.
pub fn daily_trace(scored: &[ScoredImpression]) -> Result<Vec<DailyAuc>> {
    let mut days: BTreeMap<i64, Vec<ScoredImpression>> = BTreeMap::new();
    for s in scored {
        days.entry(utc_day(s.ts)).or_default().push(*s);
    }
    days.into_iter()
        .map(|(day, items)| {
            let auc = match auc(&items) {
                Ok(a) => Some(a),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(DailyAuc {
                day,
                impressions: items.len(),
                auc,
            })
        })
        .collect()
}

/// Metrics of one training run of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub auc: f64,
    pub f1: f64,
    /// Identifies the evaluation set; all runs compared must agree.
    pub eval_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRuns {
    pub name: String,
    pub runs: Vec<RunMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanDev {
    pub mean: f64,
    /// Largest `|run - mean|`.
    pub max_dev: f64,
}

impl MeanDev {
    pub fn of(values: &[f64]) -> Self {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let max_dev = values.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
        Self { mean, max_dev }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub name: String,
    pub seeds: usize,
    pub auc: MeanDev,
    pub f1: MeanDev,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ordering {
    Better,
    Worse,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOrdering {
    pub left: String,
    pub right: String,
    /// How `left` compares with `right` on mean AUC.
    pub auc: Ordering,
    pub f1: Ordering,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub variants: Vec<VariantSummary>,
    pub pairs: Vec<PairOrdering>,
}

const TIE_TOLERANCE: f64 = 1e-12;

fn compare(a: f64, b: f64) -> Ordering {
    if (a - b).abs() <= TIE_TOLERANCE {
        Ordering::Tie
    } else if a > b {
        Ordering::Better
    } else {
        Ordering::Worse
    }
}

/// Mean and maximum deviation per variant, plus pairwise orderings.
pub fn ablation_report(variants: &[VariantRuns]) -> Result<AblationReport> {
    let mut fingerprint: Option<&str> = None;
    for v in variants {
        if v.runs.is_empty() {
            return Err(Error::Comparison(format!("variant {} has no runs", v.name)));
        }
        for r in &v.runs {
            match fingerprint {
                None => fingerprint = Some(&r.eval_fingerprint),
                Some(f) if f != r.eval_fingerprint => {
                    return Err(Error::Comparison(format!(
                        "variant {} (seed {}) was evaluated on a different set ({} vs {f})",
                        v.name, r.seed, r.eval_fingerprint
                    )))
                }
                _ => {}
            }
        }
    }
    let summaries: Vec<VariantSummary> = variants
        .iter()
        .map(|v| VariantSummary {
            name: v.name.clone(),
            seeds: v.runs.len(),
            auc: MeanDev::of(&v.runs.iter().map(|r| r.auc).collect::<Vec<_>>()),
            f1: MeanDev::of(&v.runs.iter().map(|r| r.f1).collect::<Vec<_>>()),
        })
        .collect();
    let mut pairs = Vec::new();
    for (i, a) in summaries.iter().enumerate() {
        for b in &summaries[i + 1..] {
            pairs.push(PairOrdering {
                left: a.name.clone(),
                right: b.name.clone(),
                auc: compare(a.auc.mean, b.auc.mean),
                f1: compare(a.f1.mean, b.f1.mean),
            });
        }
    }
    Ok(AblationReport {
        variants: summaries,
        pairs,
    })
}

impl AblationReport {
    /// Aligned plain-text table, metrics in percent.
    pub fn to_text(&self) -> String {
        let width = self.variants.iter().map(|v| v.name.len()).max().unwrap_or(7).max(7);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>5}  {:>14}  {:>14}", "variant", "seeds", "F1", "AUC");
        for v in &self.variants {
            let _ = writeln!(
                out,
                "{:<width$}  {:>5}  {:>6.2} ± {:<5.2}  {:>6.2} ± {:<5.2}",
                v.name,
                v.seeds,
                100.0 * v.f1.mean,
                100.0 * v.f1.max_dev,
                100.0 * v.auc.mean,
                100.0 * v.auc.max_dev
            );
        }
        if !self.pairs.is_empty() {
            let _ = writeln!(out);
            for p in &self.pairs {
                let _ = writeln!(out, "{} vs {}: auc {:?}, f1 {:?}", p.left, p.right, p.auc, p.f1);
            }
        }
        out
    }
}
