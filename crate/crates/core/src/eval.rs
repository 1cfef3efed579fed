//! Batch evaluation over query sets: rankings in every mode, retrieval mAP
//! and kNN top-1. Queries are processed in parallel; results keep query
//! order, so outputs do not depend on the thread count.

use rayon::prelude::*;

use crate::classify::{argmax, knn_classify, KnnConfig, Posterior};
use crate::error::{contract, Result};
use crate::matrix::Matrix;
use crate::memory::{EmbeddingMemory, LabelLevel};
use crate::metrics::{mean_average_precision, top1_accuracy, EvalReport};
use crate::retrieval::{rank_conditional, rank_cosine, rank_oracle, RankingMode, RankingResult};

/// Query embeddings with their labels. When the queries are memory rows,
/// `memory_indices[i]` names query `i`'s row so it is left out.
#[derive(Debug, Clone, Copy)]
pub struct Queries<'a> {
    pub embeddings: &'a Matrix,
    pub coarse_labels: &'a [u32],
    pub fine_labels: &'a [u32],
    pub memory_indices: Option<&'a [usize]>,
}

impl<'a> Queries<'a> {
    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn exclude(&self, i: usize) -> Option<usize> {
        self.memory_indices.map(|m| m[i])
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        contract!(
            self.coarse_labels.len() == n && self.fine_labels.len() == n,
            "{n} queries but {} coarse and {} fine labels",
            self.coarse_labels.len(),
            self.fine_labels.len()
        );
        if let Some(m) = self.memory_indices {
            contract!(m.len() == n, "{n} queries but {} memory indices", m.len());
        }
        Ok(())
    }

    pub fn labels(&self, level: LabelLevel) -> &'a [u32] {
        match level {
            LabelLevel::Coarse => self.coarse_labels,
            LabelLevel::Fine => self.fine_labels,
        }
    }
}

/// kNN posterior over `level` labels for every query.
pub fn posteriors(memory: &EmbeddingMemory, queries: &Queries, level: LabelLevel, cfg: &KnnConfig) -> Result<Vec<Posterior>> {
    queries.check()?;
    (0..queries.len()).into_par_iter().map(|i| knn_classify(queries.embeddings.row(i), memory, level, cfg, queries.exclude(i))).collect()
}

/// One ranking per query. Conditional mode uses the kNN coarse posterior
/// (with `knn`); oracle mode uses the query's true coarse label.
pub fn rank_queries(
    memory: &EmbeddingMemory,
    queries: &Queries,
    mode: RankingMode,
    knn: &KnnConfig,
    epsilon: f64,
) -> Result<Vec<RankingResult>> {
    queries.check()?;
    let post = match mode {
        RankingMode::Conditional => Some(posteriors(memory, queries, LabelLevel::Coarse, knn)?),
        _ => None,
    };
    (0..queries.len())
        .into_par_iter()
        .map(|i| {
            let q = queries.embeddings.row(i);
            let ex = queries.exclude(i);
            let r = match mode {
                RankingMode::Cosine => rank_cosine(q, memory, ex),
                RankingMode::Conditional => rank_conditional(q, memory, &post.as_ref().expect("computed above")[i], epsilon, ex),
                RankingMode::Oracle => rank_oracle(q, queries.coarse_labels[i], memory, ex),
            }?;
            Ok(r.with_query_id(i))
        })
        .collect()
}

/// Fine-label retrieval mAP in the given ranking mode.
pub fn retrieval_map(memory: &EmbeddingMemory, queries: &Queries, mode: RankingMode, knn: &KnnConfig, epsilon: f64) -> Result<EvalReport> {
    let memory_fine = memory.labels(LabelLevel::Fine)?;
    let rankings = rank_queries(memory, queries, mode, knn, epsilon)?;
    mean_average_precision(&rankings, queries.fine_labels, memory_fine)
}

/// kNN top-1 accuracy at `level`.
pub fn knn_top1(memory: &EmbeddingMemory, queries: &Queries, level: LabelLevel, cfg: &KnnConfig) -> Result<f64> {
    let preds: Vec<u32> =
        posteriors(memory, queries, level, cfg)?.iter().map(|p| argmax(p).expect("k >= 1 gives a nonempty posterior")).collect();
    top1_accuracy(&preds, queries.labels(level))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(deg: f64) -> [f64; 2] {
        let r = deg.to_radians();
        [r.cos(), r.sin()]
    }

    #[test]
    fn results_keep_query_order_and_ids() {
        let rows: Vec<[f64; 2]> = [0.0, 10.0, 90.0, 100.0].iter().map(|&a| unit(a)).collect();
        let mem = EmbeddingMemory::new(Matrix::from_rows(&rows), vec![0, 0, 1, 1], Some(vec![0, 1, 2, 3])).unwrap();
        let q = Matrix::from_rows(&[unit(95.0), unit(3.0)]);
        let queries = Queries { embeddings: &q, coarse_labels: &[1, 0], fine_labels: &[3, 0], memory_indices: None };
        let cfg = KnnConfig { k: 2, ..KnnConfig::default() };
        let r = rank_queries(&mem, &queries, RankingMode::Cosine, &cfg, 1e-6).unwrap();
        assert_eq!(r[0].query_id, 0);
        assert_eq!(r[1].query_id, 1);
        assert_eq!(r[1].entries[0].0, 0);
        assert_eq!(knn_top1(&mem, &queries, LabelLevel::Coarse, &cfg).unwrap(), 1.0);
        let report = retrieval_map(&mem, &queries, RankingMode::Oracle, &cfg, 1e-6).unwrap();
        assert_eq!(report.num_queries, 2);
    }

    #[test]
    fn leave_one_out_queries_skip_themselves() {
        let rows: Vec<[f64; 2]> = [0.0, 10.0, 90.0, 100.0].iter().map(|&a| unit(a)).collect();
        let m = Matrix::from_rows(&rows);
        let mem = EmbeddingMemory::new(m.clone(), vec![0, 0, 1, 1], Some(vec![0, 0, 1, 1])).unwrap();
        let idx = [0, 1, 2, 3];
        let queries = Queries { embeddings: &m, coarse_labels: &[0, 0, 1, 1], fine_labels: &[0, 0, 1, 1], memory_indices: Some(&idx) };
        let r = rank_queries(&mem, &queries, RankingMode::Cosine, &KnnConfig::default(), 1e-6).unwrap();
        assert!(r.iter().enumerate().all(|(i, rr)| rr.entries.len() == 3 && rr.indices().all(|j| j != i)));
        let report = retrieval_map(&mem, &queries, RankingMode::Cosine, &KnnConfig::default(), 1e-6).unwrap();
        assert_eq!(report.value, 1.0);
    }
}
