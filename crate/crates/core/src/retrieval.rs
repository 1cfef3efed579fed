//! Category-level retrieval over the embedding memory.

use std::collections::BTreeMap;

use crate::error::{contract, GrafitError, Result};
use crate::matrix::cosine;
use crate::memory::EmbeddingMemory;

/// Log-odds clamp for conditional scores.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Score offset lifting same-coarse rows above every other row in oracle
/// rankings (cosines lie in [-1, 1]).
pub const ORACLE_OFFSET: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RankingMode {
    Cosine,
    Conditional,
    Oracle,
}

impl RankingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RankingMode::Cosine => "cosine",
            RankingMode::Conditional => "conditional",
            RankingMode::Oracle => "oracle",
        }
    }
}

impl std::str::FromStr for RankingMode {
    type Err = GrafitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(RankingMode::Cosine),
            "conditional" => Ok(RankingMode::Conditional),
            "oracle" => Ok(RankingMode::Oracle),
            other => Err(GrafitError::Config(format!("unknown ranking mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub query_id: usize,
    /// `(memory_index, score)`, by score descending then index ascending.
    pub entries: Vec<(usize, f64)>,
    pub mode: RankingMode,
}

impl RankingResult {
    pub fn with_query_id(mut self, id: usize) -> Self {
        self.query_id = id;
        self
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|&(i, _)| i)
    }
}

fn candidates(memory: &EmbeddingMemory, query: &[f64], exclude: Option<usize>) -> Result<Vec<(usize, f64)>> {
    contract!(!memory.is_empty(), "cannot rank against an empty memory");
    if query.len() != memory.dim() {
        return Err(GrafitError::Shape { op: "rank", left: vec![query.len()], right: vec![memory.len(), memory.dim()] });
    }
    Ok((0..memory.len()).filter(|&i| Some(i) != exclude).map(|i| (i, cosine(query, memory.row(i)))).collect())
}

fn sort_entries(entries: &mut [(usize, f64)]) {
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// Orders memory rows by cosine similarity to `query`. `exclude` drops the
/// query's own row when it is a training sample.
pub fn rank_cosine(query: &[f64], memory: &EmbeddingMemory, exclude: Option<usize>) -> Result<RankingResult> {
    let mut entries = candidates(memory, query, exclude)?;
    sort_entries(&mut entries);
    Ok(RankingResult { query_id: 0, entries, mode: RankingMode::Cosine })
}

/// `log(p / (1 - p))` with `p` clamped to `[eps, 1 - eps]`.
pub fn clamped_log_odds(p: f64, epsilon: f64) -> f64 {
    let p = p.clamp(epsilon, 1.0 - epsilon);
    (p / (1.0 - p)).ln()
}

/// Scores each row by `cos(q, m_i) + log-odds(p_c)` where `p_c` is the
/// query's posterior for the row's coarse label.
pub fn rank_conditional(
    query: &[f64],
    memory: &EmbeddingMemory,
    coarse_posterior: &BTreeMap<u32, f64>,
    epsilon: f64,
    exclude: Option<usize>,
) -> Result<RankingResult> {
    contract!(coarse_posterior.values().all(|p| (0.0..=1.0).contains(p)), "posterior values must lie in [0, 1]");
    let total: f64 = coarse_posterior.values().sum();
    contract!((total - 1.0).abs() <= 1e-6, "posterior sums to {total}, expected 1");
    let log_odds: BTreeMap<u32, f64> = coarse_posterior.iter().map(|(&c, &p)| (c, clamped_log_odds(p, epsilon))).collect();
    let labels = memory.coarse_labels();
    let mut entries = candidates(memory, query, exclude)?;
    for e in &mut entries {
        let c = labels[e.0];
        e.1 += log_odds.get(&c).ok_or(GrafitError::MissingPosterior(c))?;
    }
    sort_entries(&mut entries);
    Ok(RankingResult { query_id: 0, entries, mode: RankingMode::Conditional })
}

/// Rows sharing the query's coarse label first, each block by cosine.
/// Same-coarse scores are reported as `cos + ORACLE_OFFSET`.
pub fn rank_oracle(query: &[f64], query_coarse: u32, memory: &EmbeddingMemory, exclude: Option<usize>) -> Result<RankingResult> {
    let labels = memory.coarse_labels();
    let mut keyed: Vec<(bool, usize, f64)> =
        candidates(memory, query, exclude)?.into_iter().map(|(i, c)| (labels[i] == query_coarse, i, c)).collect();
    keyed.sort_by(|a, b| b.0.cmp(&a.0).then(b.2.total_cmp(&a.2)).then(a.1.cmp(&b.1)));
    let entries = keyed.into_iter().map(|(same, i, c)| (i, if same { c + ORACLE_OFFSET } else { c })).collect();
    Ok(RankingResult { query_id: 0, entries, mode: RankingMode::Oracle })
}
