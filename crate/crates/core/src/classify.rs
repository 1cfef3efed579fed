//! On-the-fly kNN classification with exponential neighbour weighting, the
//! cross-validated choice of `k`, and coarse-conditioned fine prediction.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use crate::error::{config_check, contract, GrafitError, Result};
use crate::matrix::{cosine, Matrix};
use crate::memory::{EmbeddingMemory, LabelLevel};

#[derive(Debug, Clone, PartialEq)]
pub struct KnnConfig {
    pub k: usize,
    pub sigma: f64,
    pub k_grid: Vec<usize>,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self { k: 20, sigma: 0.05, k_grid: vec![10, 15, 20, 25, 30] }
    }
}

/// Label probabilities, keyed by label.
pub type Posterior = BTreeMap<u32, f64>;

/// Most probable label; ties go to the lowest label.
pub fn argmax(posterior: &Posterior) -> Option<u32> {
    let mut best: Option<(u32, f64)> = None;
    for (&label, &p) in posterior {
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((label, p));
        }
    }
    best.map(|(l, _)| l)
}

/// Memory rows sorted by cosine to `query` (descending, lower index first on
/// ties), without `exclude`.
fn neighbours(query: &[f64], memory: &EmbeddingMemory, exclude: Option<usize>) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = (0..memory.len()).filter(|&i| Some(i) != exclude).map(|i| (i, cosine(query, memory.row(i)))).collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

fn posterior_from(top: &[(usize, f64)], labels: &[u32], sigma: f64) -> Posterior {
    let hi = top.first().map_or(0.0, |t| t.1);
    let mut post = Posterior::new();
    for &(i, c) in top {
        *post.entry(labels[i]).or_insert(0.0) += ((c - hi) / sigma).exp();
    }
    let z: f64 = post.values().sum();
    post.values_mut().for_each(|p| *p /= z);
    post
}

/// Posterior over every `level` label in the memory from the `k` most
/// similar rows, weighted by `exp(cos / sigma)`; labels without a
/// neighbour get probability 0. `exclude` gives leave-one-out behaviour
/// for queries that are themselves memory rows.
pub fn knn_classify(
    query: &[f64],
    memory: &EmbeddingMemory,
    level: LabelLevel,
    cfg: &KnnConfig,
    exclude: Option<usize>,
) -> Result<Posterior> {
    config_check!(cfg.k >= 1, "k must be at least 1");
    config_check!(cfg.sigma > 0.0, "sigma must be positive");
    let labels = memory.labels(level)?;
    contract!(!memory.is_empty(), "kNN classification against an empty memory");
    let available = memory.len() - usize::from(exclude.is_some_and(|i| i < memory.len()));
    contract!(cfg.k <= available, "k = {} exceeds the {available} available memory rows", cfg.k);
    if query.len() != memory.dim() {
        return Err(GrafitError::Shape { op: "knn_classify", left: vec![query.len()], right: vec![memory.len(), memory.dim()] });
    }
    let ranked = neighbours(query, memory, exclude);
    let mut post = posterior_from(&ranked[..cfg.k], labels, cfg.sigma);
    for &l in labels {
        post.entry(l).or_insert(0.0);
    }
    Ok(post)
}

/// Labeled queries for choosing `k`. With `memory_indices`, query `i` is
/// memory row `memory_indices[i]` and is left out of its own neighbourhood.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub embeddings: Matrix,
    pub labels: Vec<u32>,
    pub memory_indices: Option<Vec<usize>>,
}

impl ValidationSet {
    /// Leave-one-out validation over the memory itself.
    pub fn leave_one_out(memory: &EmbeddingMemory, level: LabelLevel) -> Result<Self> {
        Ok(Self {
            embeddings: memory.rows().clone(),
            labels: memory.labels(level)?.to_vec(),
            memory_indices: Some((0..memory.len()).collect()),
        })
    }
}

/// Top-1 accuracy of every grid value of `k` on the validation set.
pub fn grid_accuracies(
    memory: &EmbeddingMemory,
    validation: &ValidationSet,
    level: LabelLevel,
    cfg: &KnnConfig,
) -> Result<Vec<(usize, f64)>> {
    config_check!(!cfg.k_grid.is_empty(), "empty k grid");
    config_check!(cfg.sigma > 0.0, "sigma must be positive");
    let n = validation.embeddings.rows();
    contract!(n > 0 && validation.labels.len() == n, "validation set must be nonempty and fully labeled");
    let labels = memory.labels(level)?;
    let loo = usize::from(validation.memory_indices.is_some());
    let k_max = *cfg.k_grid.iter().max().expect("nonempty grid");
    config_check!(cfg.k_grid.iter().all(|&k| k >= 1), "grid values must be at least 1");
    contract!(k_max + loo <= memory.len(), "k = {k_max} exceeds the {} available memory rows", memory.len().saturating_sub(loo));
    let hits: Vec<Vec<bool>> = (0..n)
        .into_par_iter()
        .map(|q| {
            let exclude = validation.memory_indices.as_ref().map(|m| m[q]);
            let ranked = neighbours(validation.embeddings.row(q), memory, exclude);
            cfg.k_grid.iter().map(|&k| argmax(&posterior_from(&ranked[..k], labels, cfg.sigma)) == Some(validation.labels[q])).collect()
        })
        .collect();
    Ok(cfg.k_grid.iter().enumerate().map(|(gi, &k)| (k, hits.iter().filter(|h| h[gi]).count() as f64 / n as f64)).collect())
}

/// Grid value with the best validation top-1; ties go to the smaller `k`.
pub fn select_k(memory: &EmbeddingMemory, validation: &ValidationSet, level: LabelLevel, cfg: &KnnConfig) -> Result<usize> {
    let mut scored = grid_accuracies(memory, validation, level, cfg)?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored[0].0)
}

/// Softmax over a score map.
pub fn softmax(scores: &BTreeMap<u32, f64>) -> Posterior {
    let hi = scores.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Posterior = scores.iter().map(|(&l, &s)| (l, (s - hi).exp())).collect();
    let z: f64 = out.values().sum();
    out.values_mut().for_each(|p| *p /= z);
    out
}

/// `p(f) ∝ softmax(fine_scores)(f) * coarse_posterior(parent(f))`.
pub fn coarse_conditioned_classify(
    fine_scores: &BTreeMap<u32, f64>,
    coarse_posterior: &Posterior,
    hierarchy: &HashMap<u32, u32>,
) -> Result<Posterior> {
    let fine = softmax(fine_scores);
    let mut out = Posterior::new();
    for (&f, &p) in &fine {
        let parent = hierarchy.get(&f).ok_or(GrafitError::MissingParent(f))?;
        out.insert(f, p * coarse_posterior.get(parent).copied().unwrap_or(0.0));
    }
    let z: f64 = out.values().sum();
    contract!(z > 0.0, "coarse posterior assigns no mass to any fine label's parent");
    out.values_mut().for_each(|p| *p /= z);
    Ok(out)
}
