//! Representation analyses: PCA energy spectra, linear probes on frozen
//! features, and the random sub-split separability study.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::autodiff::Graph;
use crate::classify::{argmax, coarse_conditioned_classify, KnnConfig, Posterior, ValidationSet};
use crate::data::{random_fine_split, HierarchicalDataset, SplitView};
use crate::error::{config_check, contract, GrafitError, Result};
use crate::eval::{posteriors, Queries};
use crate::losses::cross_entropy_loss;
use crate::matrix::Matrix;
use crate::memory::{EmbeddingMemory, LabelLevel};
use crate::metrics::top1_accuracy;
use crate::model::{Binding, Mlp, TestModel};
use crate::rng::stream;
use crate::trainer::{cosine_lr, Sgd};

/// Eigen-spectrum of the embedding covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaCurve {
    /// Descending, clamped at zero.
    pub eigenvalues: Vec<f64>,
    /// Entry `i` is the energy fraction of the top `i + 1` components.
    pub cumulative_energy: Vec<f64>,
    pub dim: usize,
}

/// PCA of the mean-centred sample covariance (divisor `N - 1`).
pub fn pca_energy(x: &Matrix) -> Result<PcaCurve> {
    let (n, d) = (x.rows(), x.cols());
    contract!(n >= 2, "PCA needs at least 2 rows, got {n}");
    contract!(d >= 1, "PCA needs at least one column");
    let m = DMatrix::from_row_slice(n, d, x.as_slice());
    let mean = m.row_mean();
    let mut centred = m;
    for mut row in centred.row_iter_mut() {
        row -= &mean;
    }
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    let mut eigenvalues: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = eigenvalues.iter().sum();
    let scale = eigenvalues.first().copied().unwrap_or(0.0);
    if total <= 0.0 || scale <= 1e-12 * x.as_slice().iter().fold(1.0f64, |a, v| a.max(v.abs())).powi(2) {
        return Err(GrafitError::Degenerate("all rows are identical".into()));
    }
    let mut acc = 0.0;
    let cumulative_energy = eigenvalues
        .iter()
        .map(|v| {
            acc += v;
            acc / total
        })
        .collect();
    Ok(PcaCurve { eigenvalues, cumulative_energy, dim: d })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 100, lr: 0.01, batch_size: 64, momentum: 0.9, weight_decay: 0.0, seed: 7 }
    }
}

/// A fitted linear classifier over arbitrary `u32` labels.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    head: Mlp,
    /// Column `j` of the logits scores `classes[j]`.
    pub classes: Vec<u32>,
}

impl LinearProbe {
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let xt = g.constant_matrix(x)?;
        let out = self.head.forward(&mut g, xt, false, None)?.out;
        Ok(g.to_matrix(out))
    }

    /// Per-row score map keyed by label.
    pub fn scores(&self, x: &Matrix) -> Result<Vec<BTreeMap<u32, f64>>> {
        let logits = self.logits(x)?;
        Ok(logits.iter_rows().map(|row| self.classes.iter().copied().zip(row.iter().copied()).collect()).collect())
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<u32>> {
        Ok(self
            .logits(x)?
            .iter_rows()
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                self.classes[best]
            })
            .collect())
    }
}

/// Cross-entropy fit of a linear head with the trainer's optimizer under a
/// cosine schedule. Zero epochs returns the initial head.
pub fn fit_linear_probe(x: &Matrix, labels: &[u32], cfg: &ProbeConfig) -> Result<LinearProbe> {
    contract!(x.rows() == labels.len() && !labels.is_empty(), "probe needs one label per nonempty row");
    config_check!(cfg.batch_size >= 1, "probe batch size must be at least 1");
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let index: HashMap<u32, u32> = classes.iter().enumerate().map(|(i, &c)| (c, i as u32)).collect();
    let targets: Vec<u32> = labels.iter().map(|l| index[l]).collect();
    let mut head = Mlp::new("probe", &[x.cols(), classes.len()], &mut stream(cfg.seed, "probe-init", 0));
    let n = x.rows();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut stream(cfg.seed, "probe-shuffle", epoch as u64));
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch * per_epoch + b;
            let mut g = Graph::new();
            let mut binding = Binding::new();
            let xt = g.constant_matrix(&x.select_rows(batch))?;
            let logits = head.forward(&mut g, xt, true, Some(&mut binding))?.out;
            let y: Vec<u32> = batch.iter().map(|&i| targets[i]).collect();
            let loss = cross_entropy_loss(&mut g, logits, &y)?;
            g.backward(loss)?;
            sgd.step(head.trainable_mut(), &binding.grads(&g), cosine_lr(step, total, cfg.lr)?).map_err(|e| e.at_step(step))?;
        }
    }
    Ok(LinearProbe { head, classes })
}

/// Held-out top-1 of a probe fit on frozen trunk features of the training
/// split, evaluated on the test split.
pub fn linear_probe(model: &TestModel, dataset: &HierarchicalDataset, level: LabelLevel, cfg: &ProbeConfig) -> Result<f64> {
    let train = dataset.train();
    let test = dataset.test();
    contract!(!test.is_empty(), "linear probe needs a nonempty test split");
    let probe = fit_linear_probe(&model.trunk_features(&train.features)?, train.labels(level), cfg)?;
    let preds = probe.predict(&model.trunk_features(&test.features)?)?;
    top1_accuracy(&preds, test.labels(level))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialResult {
    pub accuracy_plain: f64,
    pub accuracy_conditioned: f64,
}

/// Mean and sample standard deviation (divisor `n - 1`) across trials.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparabilityReport {
    pub trials: Vec<TrialResult>,
    pub mean_plain: f64,
    pub std_plain: f64,
    pub mean_conditioned: f64,
    pub std_conditioned: f64,
}

/// Sample mean and standard deviation; the deviation is 0 for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Train-set accuracy of linear probes fit to random even sub-splits of each
/// coarse class, plain and after conditioning on the kNN coarse posterior
/// (leave-one-out over the model's training embeddings).
pub fn separability_run(
    model: &TestModel,
    dataset: &HierarchicalDataset,
    num_trials: usize,
    probe: &ProbeConfig,
    knn: &KnnConfig,
) -> Result<SeparabilityReport> {
    config_check!(num_trials >= 1, "need at least one trial");
    let train: SplitView = dataset.train();
    let features = model.trunk_features(&train.features)?;
    let memory = EmbeddingMemory::init(model, &train.features, train.coarse_labels.clone(), None)?;
    let idx: Vec<usize> = (0..train.len()).collect();
    let queries = Queries {
        embeddings: memory.rows(),
        coarse_labels: &train.coarse_labels,
        fine_labels: &train.fine_labels,
        memory_indices: Some(&idx),
    };
    let coarse_post: Vec<Posterior> = posteriors(&memory, &queries, LabelLevel::Coarse, knn)?;
    let splits = random_fine_split(&train.coarse_labels, 2, num_trials, probe.seed)?;
    let trials: Vec<TrialResult> = splits
        .par_iter()
        .enumerate()
        .map(|(t, labels)| {
            let cfg = ProbeConfig { seed: probe.seed.wrapping_add(t as u64), ..probe.clone() };
            let fitted = fit_linear_probe(&features, labels, &cfg)?;
            let plain = top1_accuracy(&fitted.predict(&features)?, labels)?;
            let hierarchy: HashMap<u32, u32> = fitted.classes.iter().map(|&s| (s, s / 2)).collect();
            let conditioned: Vec<u32> = fitted
                .scores(&features)?
                .iter()
                .zip(&coarse_post)
                .map(|(scores, post)| Ok(argmax(&coarse_conditioned_classify(scores, post, &hierarchy)?).expect("nonempty")))
                .collect::<Result<_>>()?;
            Ok(TrialResult { accuracy_plain: plain, accuracy_conditioned: top1_accuracy(&conditioned, labels)? })
        })
        .collect::<Result<_>>()?;
    let (mean_plain, std_plain) = mean_std(&trials.iter().map(|t| t.accuracy_plain).collect::<Vec<_>>());
    let (mean_conditioned, std_conditioned) = mean_std(&trials.iter().map(|t| t.accuracy_conditioned).collect::<Vec<_>>());
    Ok(SeparabilityReport { trials, mean_plain, std_plain, mean_conditioned, std_conditioned })
}

/// One-sided p-value of the paired t-test for `mean(a - b) > 0`.
pub fn paired_t_test_greater(a: &[f64], b: &[f64]) -> Result<f64> {
    contract!(a.len() == b.len() && a.len() >= 2, "paired test needs two equal samples of size >= 2");
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, sd) = mean_std(&diffs);
    if sd == 0.0 {
        return Ok(if mean > 0.0 { 0.0 } else { 1.0 });
    }
    let n = diffs.len() as f64;
    let t = mean / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| GrafitError::Degenerate(e.to_string()))?;
    Ok(1.0 - dist.cdf(t))
}

/// `select_k` over the memory itself (leave-one-out).
pub fn select_k_loo(memory: &EmbeddingMemory, level: LabelLevel, cfg: &KnnConfig) -> Result<usize> {
    let val = ValidationSet::leave_one_out(memory, level)?;
    crate::classify::select_k(memory, &val, level, cfg)
}
