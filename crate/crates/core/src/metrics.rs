//! Mean average precision and top-1 accuracy.

use crate::error::{contract, GrafitError, Result};
use crate::memory::LabelLevel;
use crate::retrieval::{RankingMode, RankingResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    MeanAveragePrecision,
    Top1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Ranking(RankingMode),
    Classification,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub level: LabelLevel,
    pub metric: Metric,
    pub value: f64,
    pub num_queries: usize,
    /// Queries without any relevant item, excluded from the mean.
    pub num_skipped: usize,
    pub mode: EvalMode,
}

/// Non-interpolated AP: mean of precision@r over the ranks `r` holding a
/// relevant item. `relevance` is indexed by memory index; only items present
/// in the ranking count toward the relevant total.
pub fn average_precision(ranking: &RankingResult, relevance: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, idx) in ranking.indices().enumerate() {
        contract!(idx < relevance.len(), "ranking index {idx} outside relevance vector");
        if relevance[idx] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(GrafitError::UndefinedAp);
    }
    Ok(sum / hits as f64)
}

/// mAP where an item is relevant when its fine label equals the query's.
pub fn mean_average_precision(rankings: &[RankingResult], query_fine_labels: &[u32], memory_fine_labels: &[u32]) -> Result<EvalReport> {
    contract!(rankings.len() == query_fine_labels.len(), "{} rankings but {} query labels", rankings.len(), query_fine_labels.len());
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    let mut relevance = vec![false; memory_fine_labels.len()];
    for (ranking, &label) in rankings.iter().zip(query_fine_labels) {
        for (r, &m) in relevance.iter_mut().zip(memory_fine_labels) {
            *r = m == label;
        }
        match average_precision(ranking, &relevance) {
            Ok(ap) => {
                total += ap;
                used += 1;
            }
            Err(GrafitError::UndefinedAp) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    contract!(used > 0, "every query was skipped (no relevant items)");
    let mode = rankings.first().map_or(RankingMode::Cosine, |r| r.mode);
    Ok(EvalReport {
        level: LabelLevel::Fine,
        metric: Metric::MeanAveragePrecision,
        value: total / used as f64,
        num_queries: used,
        num_skipped: skipped,
        mode: EvalMode::Ranking(mode),
    })
}

pub fn top1_accuracy(predictions: &[u32], truths: &[u32]) -> Result<f64> {
    contract!(predictions.len() == truths.len(), "{} predictions but {} truths", predictions.len(), truths.len());
    contract!(!truths.is_empty(), "top-1 accuracy of an empty set");
    let hits = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truths.len() as f64)
}
