//! Training objectives: the kNN (soft nearest-neighbour) loss against the
//! embedding memory, the instance loss against the EMA target, their
//! weighted sum, and the cross-entropy and triplet baselines.

use crate::autodiff::{Graph, Tensor};
use crate::error::{config_check, contract, GrafitError, Result};
use crate::matrix::{cosine, Matrix};
use crate::model::{Binding, ModelBundle};

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Temperature of the neighbour softmax.
    pub sigma: f64,
    /// Weight of the instance loss.
    pub lambda: f64,
    pub num_augmentations: usize,
    pub triplet_margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { sigma: 0.05, lambda: 1.0, num_augmentations: 4, triplet_margin: 0.2 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        config_check!(self.sigma > 0.0, "sigma must be positive, got {}", self.sigma);
        config_check!(self.lambda >= 0.0, "lambda must be non-negative, got {}", self.lambda);
        config_check!(self.num_augmentations >= 2, "need at least 2 augmentations, got {}", self.num_augmentations);
        config_check!(self.triplet_margin >= 0.0, "triplet margin must be non-negative");
        Ok(())
    }
}

/// Mean over the batch of `-log sum_{j != i, y_j = y_i} p_ij` where
/// `p_ij ∝ exp(cos(q_i, m_j) / sigma)` over all memory rows `j != i`.
///
/// `queries` are unit-norm `[B, d]` embeddings of memory entries
/// `query_indices`. Memory rows enter as constants, so gradients flow only
/// into the queries. Computed as `lse(all) - lse(same class)`.
pub fn knn_loss(
    g: &mut Graph,
    queries: Tensor,
    query_indices: &[usize],
    query_labels: &[u32],
    memory_rows: &Matrix,
    memory_labels: &[u32],
    sigma: f64,
) -> Result<Tensor> {
    config_check!(sigma > 0.0, "sigma must be positive, got {sigma}");
    let n = memory_rows.rows();
    contract!(n >= 2, "kNN loss needs at least 2 memory entries, got {n}");
    contract!(memory_labels.len() == n, "memory labels/rows length mismatch");
    let b = query_indices.len();
    contract!(query_labels.len() == b, "query labels/indices length mismatch");
    let shape = g.shape(queries).to_vec();
    if shape.len() != 2 || shape[0] != b || shape[1] != memory_rows.cols() {
        return Err(GrafitError::Shape { op: "knn_loss", left: shape, right: vec![b, memory_rows.cols()] });
    }

    let mut all = vec![true; b * n];
    let mut same = vec![false; b * n];
    for (k, (&i, &y)) in query_indices.iter().zip(query_labels).enumerate() {
        contract!(i < n, "query index {i} outside memory of {n} rows");
        all[k * n + i] = false;
        let mut any = false;
        for j in 0..n {
            if j != i && memory_labels[j] == y {
                same[k * n + j] = true;
                any = true;
            }
        }
        if !any {
            return Err(GrafitError::IsolatedClass { index: i, label: y });
        }
    }

    let keys = g.constant_matrix(&memory_rows.normalized_rows().transpose())?;
    let cos = g.matmul(queries, keys)?;
    let logits = g.scale(cos, 1.0 / sigma)?;
    let lse_all = g.logsumexp_rows_masked(logits, all)?;
    let lse_same = g.logsumexp_rows_masked(logits, same)?;
    let per_query = g.sub(lse_all, lse_same)?;
    g.mean(per_query)
}

/// Neighbour distribution `p_{i,.}` of one query over the memory, with
/// `p_{i,i} = 0`. Exposed for inspection; the loss never forms it.
pub fn knn_probabilities(query: &[f64], self_index: Option<usize>, memory_rows: &Matrix, sigma: f64) -> Vec<f64> {
    let logits: Vec<f64> = memory_rows.iter_rows().map(|m| cosine(query, m) / sigma).collect();
    let hi = logits.iter().enumerate().filter(|&(j, _)| Some(j) != self_index).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().enumerate().map(|(j, &v)| if Some(j) == self_index { 0.0 } else { (v - hi).exp() }).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

/// `-(1 / (T(T-1))) sum_{i != j} cos(pred_i, target_j)`, averaged over the
/// batch. `predictions[t]` and `targets[t]` are `[B, d]` views.
pub fn instance_loss_from_views(g: &mut Graph, predictions: &[Tensor], targets: &[Tensor]) -> Result<Tensor> {
    let t = predictions.len();
    config_check!(t >= 2, "instance loss needs at least 2 views, got {t}");
    contract!(targets.len() == t, "{} predictions but {} targets", t, targets.len());
    let mut acc: Option<Tensor> = None;
    for (i, &p) in predictions.iter().enumerate() {
        for (j, &y) in targets.iter().enumerate() {
            if i == j {
                continue;
            }
            let c = g.cosine_rows(p, y)?;
            acc = Some(match acc {
                None => c,
                Some(a) => g.add(a, c)?,
            });
        }
    }
    let summed = acc.expect("t >= 2 gives at least one pair");
    let per_sample = g.scale(summed, -1.0 / (t * (t - 1)) as f64)?;
    g.mean(per_sample)
}

pub struct InstanceBranch {
    pub loss: Tensor,
    /// Online unit-norm embeddings `g(t_v(x))`, one per view.
    pub online: Vec<Tensor>,
    /// Online trunk outputs, one per view.
    pub trunk_out: Vec<Tensor>,
}

/// Instance loss of a batch under `num_views` augmentations produced by
/// `augment(view, x)`. The target branch enters the graph as constants.
pub fn instance_loss(
    g: &mut Graph,
    bundle: &mut ModelBundle,
    x: &Matrix,
    mut augment: impl FnMut(usize, &Matrix) -> Matrix,
    num_views: usize,
    training: bool,
    mut binding: Option<&mut Binding>,
) -> Result<InstanceBranch> {
    config_check!(num_views >= 2, "instance loss needs at least 2 views, got {num_views}");
    let mut predictions = Vec::with_capacity(num_views);
    let mut targets = Vec::with_capacity(num_views);
    let mut online = Vec::with_capacity(num_views);
    let mut trunk_out = Vec::with_capacity(num_views);
    for v in 0..num_views {
        let view = augment(v, x);
        let xt = g.constant_matrix(&view)?;
        let f = bundle.online_forward(g, xt, training, binding.as_deref_mut())?;
        let p = bundle.predict(g, f.embedding, training, binding.as_deref_mut())?;
        let y = bundle.target_embed(g, xt, training)?;
        predictions.push(p);
        targets.push(y);
        online.push(f.embedding);
        trunk_out.push(f.trunk_out);
    }
    let loss = instance_loss_from_views(g, &predictions, &targets)?;
    Ok(InstanceBranch { loss, online, trunk_out })
}

/// `knn + lambda * inst`.
pub fn total_loss(g: &mut Graph, knn: Tensor, inst: Tensor, lambda: f64) -> Result<Tensor> {
    contract!(g.value(knn).len() == 1 && g.value(inst).len() == 1, "total_loss expects scalar inputs");
    let weighted = g.scale(inst, lambda)?;
    g.add(knn, weighted)
}

/// Mean negative log-softmax of the true class.
pub fn cross_entropy_loss(g: &mut Graph, logits: Tensor, labels: &[u32]) -> Result<Tensor> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(GrafitError::Shape { op: "cross_entropy_loss", left: shape, right: vec![labels.len()] });
    }
    let classes = shape[1];
    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= classes) {
        return Err(GrafitError::LabelOutOfRange { label: bad, classes });
    }
    let lse = g.logsumexp_rows(logits)?;
    let picked = g.gather(logits, labels.iter().map(|&y| y as usize).collect())?;
    let nll = g.sub(lse, picked)?;
    g.mean(nll)
}

/// Mean of `max(0, margin - cos(a, p) + cos(a, n))`.
pub fn triplet_loss(g: &mut Graph, anchor: Tensor, positive: Tensor, negative: Tensor, margin: f64) -> Result<Tensor> {
    let ap = g.cosine_rows(anchor, positive)?;
    let an = g.cosine_rows(anchor, negative)?;
    let diff = g.sub(an, ap)?;
    let shifted = g.add_scalar(diff, margin)?;
    let hinge = g.relu(shifted)?;
    g.mean(hinge)
}
