//! The optimization loop: Nesterov SGD under a cosine schedule, per-mode loss
//! assembly, then the EMA and memory updates after every step.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Graph, Tensor};
use crate::data::{augment_batch, AugmentationConfig, SplitView};
use crate::error::{config_check, contract, GrafitError, Result};
use crate::losses::{cross_entropy_loss, instance_loss, knn_loss, total_loss, triplet_loss, LossConfig};
use crate::matrix::Matrix;
use crate::memory::{EmbeddingMemory, LabelLevel};
use crate::model::{Binding, EmbeddingSource, ModelBundle, ModelConfig, Param, ProjectorKind, TestModel};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainMode {
    /// kNN loss plus weighted instance loss, MLP projector.
    Grafit,
    /// As `Grafit` with a single linear projector.
    GrafitFc,
    /// kNN loss only.
    SncaPlus,
    /// Cross-entropy head on the trunk.
    CeBaseline,
    CePlusTriplet,
    InstOnly,
}

impl TrainMode {
    pub const ALL: [TrainMode; 6] =
        [TrainMode::Grafit, TrainMode::GrafitFc, TrainMode::SncaPlus, TrainMode::CeBaseline, TrainMode::CePlusTriplet, TrainMode::InstOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Grafit => "grafit",
            TrainMode::GrafitFc => "grafit-fc",
            TrainMode::SncaPlus => "snca-plus",
            TrainMode::CeBaseline => "ce",
            TrainMode::CePlusTriplet => "ce-triplet",
            TrainMode::InstOnly => "inst-only",
        }
    }

    pub fn uses_knn(self) -> bool {
        matches!(self, TrainMode::Grafit | TrainMode::GrafitFc | TrainMode::SncaPlus)
    }

    pub fn uses_inst(self) -> bool {
        matches!(self, TrainMode::Grafit | TrainMode::GrafitFc | TrainMode::InstOnly)
    }

    pub fn uses_ce(self) -> bool {
        matches!(self, TrainMode::CeBaseline | TrainMode::CePlusTriplet)
    }

    pub fn uses_triplet(self) -> bool {
        self == TrainMode::CePlusTriplet
    }

    /// Architecture this mode trains: FC projector for `GrafitFc`, and a
    /// classification head with trunk embeddings for the CE modes.
    pub fn model_config(self, input_dim: usize, num_classes: usize, seed: u64) -> ModelConfig {
        let mut cfg = ModelConfig::new(input_dim);
        cfg.seed = seed;
        if self == TrainMode::GrafitFc {
            cfg.projector_kind = ProjectorKind::Fc;
        }
        if self.uses_ce() {
            cfg.classifier_classes = Some(num_classes);
            cfg.embedding_source = EmbeddingSource::Trunk;
        }
        cfg
    }
}

impl std::str::FromStr for TrainMode {
    type Err = GrafitError;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| GrafitError::Config(format!("unknown training mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Overrides the `0.1 / 256 * batch_size` rule when set.
    pub base_lr: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: LossConfig,
    pub augmentation: AugmentationConfig,
    /// Labels supervising the kNN and cross-entropy losses.
    pub label_level: LabelLevel,
    pub seed: u64,
    /// Epochs between checkpoint callbacks; 0 disables them.
    pub snapshot_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            base_lr: None,
            momentum: 0.9,
            weight_decay: 1e-4,
            loss: LossConfig::default(),
            augmentation: AugmentationConfig::default(),
            label_level: LabelLevel::Coarse,
            seed: 7,
            snapshot_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn base_lr(&self) -> f64 {
        self.base_lr.unwrap_or(lr_for_batch(self.batch_size))
    }

    pub fn validate(&self) -> Result<()> {
        config_check!(self.epochs >= 1, "epochs must be at least 1");
        config_check!(self.batch_size >= 2, "batch_size must be at least 2");
        config_check!(self.base_lr() >= 0.0 && self.base_lr().is_finite(), "learning rate must be finite and non-negative");
        config_check!((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1)");
        config_check!(self.weight_decay >= 0.0, "weight decay must be non-negative");
        self.loss.validate()?;
        self.augmentation.validate()
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }
}

/// `0.1 / 256 * batch_size`.
pub fn lr_for_batch(batch_size: usize) -> f64 {
    0.1 / 256.0 * batch_size as f64
}

/// `base_lr * (1 + cos(pi * step / total_steps)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    contract!(step < total_steps, "step {step} outside schedule of {total_steps} steps");
    let t = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// SGD with Nesterov momentum and coupled weight decay. Velocities are kept
/// per parameter name.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: HashMap::new() }
    }

    /// `v <- mu v + (g + wd p); p <- p - lr (g + wd p + mu v)`. Parameters
    /// without a gradient are skipped. A non-finite gradient aborts the
    /// whole step before anything is written.
    pub fn step(&mut self, params: Vec<&mut Param>, grads: &HashMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        for p in &params {
            if let Some(g) = grads.get(&p.name) {
                contract!(g.len() == p.values.len(), "gradient for {} has the wrong length", p.name);
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(GrafitError::NonFinite { op: "sgd_step" });
                }
            }
        }
        let (mu, wd) = (self.momentum, self.weight_decay);
        for p in params {
            let Some(g) = grads.get(&p.name) else { continue };
            let v = self.velocity.entry(p.name.clone()).or_insert_with(|| vec![0.0; p.values.len()]);
            for ((w, &gi), vi) in p.values.iter_mut().zip(g).zip(v.iter_mut()) {
                let d = gi + wd * *w;
                *vi = mu * *vi + d;
                *w -= lr * (d + mu * *vi);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_knn: Option<f64>,
    pub loss_inst: Option<f64>,
    pub loss_ce: Option<f64>,
    pub loss_triplet: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

pub const LOG_HEADER: &str = "step,epoch,lr,loss_total,loss_knn,loss_inst,loss_ce,loss_triplet";

/// Fixed 17-significant-digit rendering used by every CSV output.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Mean of a loss column over one epoch's entries.
    pub fn epoch_mean(&self, epoch: usize, column: impl Fn(&LogEntry) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = self.entries.iter().filter(|e| e.epoch == epoch).filter_map(column).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Absent components are empty cells.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for e in &self.entries {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                e.step,
                e.epoch,
                fmt_f64(e.lr),
                fmt_f64(e.loss_total),
                opt(e.loss_knn),
                opt(e.loss_inst),
                opt(e.loss_ce),
                opt(e.loss_triplet)
            )
            .expect("writing to a String cannot fail");
        }
        out
    }
}

pub struct TrainOutcome {
    pub log: TrainLog,
    pub test_model: TestModel,
}

/// Trains `bundle` on the training split. `memory` must hold one row per
/// training sample in split order; it is rebuilt exactly at the end.
pub fn train(
    bundle: &mut ModelBundle,
    data: &SplitView,
    memory: &mut EmbeddingMemory,
    cfg: &TrainConfig,
    mode: TrainMode,
) -> Result<TrainOutcome> {
    train_with_callback(bundle, data, memory, cfg, mode, |_, _| Ok(()))
}

/// As [`train`], calling `on_snapshot(epoch, bundle)` after every
/// `cfg.snapshot_every`-th epoch (1-based).
pub fn train_with_callback(
    bundle: &mut ModelBundle,
    data: &SplitView,
    memory: &mut EmbeddingMemory,
    cfg: &TrainConfig,
    mode: TrainMode,
    mut on_snapshot: impl FnMut(usize, &ModelBundle) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = data.len();
    contract!(n >= 2, "training needs at least 2 samples, got {n}");
    contract!(memory.len() == n, "memory has {} rows for {n} training samples", memory.len());
    contract!(memory.labels(cfg.label_level)? == data.labels(cfg.label_level), "memory labels do not match the training split");
    contract!(!mode.uses_ce() || bundle.classifier.is_some(), "mode {} needs a classification head", mode.as_str());
    let labels = data.labels(cfg.label_level).to_vec();
    let per_epoch = cfg.steps_per_epoch(n);
    let total = cfg.epochs * per_epoch;
    let base_lr = cfg.base_lr();
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream(cfg.seed, "shuffle", epoch as u64));
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch * per_epoch + b;
            let lr = cosine_lr(step, total, base_lr)?;
            let entry = train_step(bundle, data, memory, &labels, batch, cfg, mode, &mut sgd, step, lr).map_err(|e| e.at_step(step))?;
            log.entries.push(LogEntry { epoch, ..entry });
        }
        if cfg.snapshot_every > 0 && (epoch + 1) % cfg.snapshot_every == 0 {
            on_snapshot(epoch + 1, bundle)?;
        }
    }
    let test_model = bundle.snapshot_test_model();
    memory.rebuild(&test_model, &data.features)?;
    Ok(TrainOutcome { log, test_model })
}

/// For each anchor, a random batch member with a different label (any other
/// member when the batch is single-class).
fn pick_negatives(labels: &[u32], seed: u64, step: usize) -> Vec<usize> {
    let b = labels.len();
    let mut rng = stream(seed, "triplet", step as u64);
    (0..b)
        .map(|i| {
            let others: Vec<usize> = (0..b).filter(|&j| labels[j] != labels[i]).collect();
            if others.is_empty() {
                (i + 1 + rng.random_range(0..b - 1)) % b
            } else {
                others[rng.random_range(0..others.len())]
            }
        })
        .collect()
}

fn selection_matrix(g: &mut Graph, picks: &[usize], n: usize) -> Result<Tensor> {
    let mut m = vec![0.0; picks.len() * n];
    for (r, &c) in picks.iter().enumerate() {
        m[r * n + c] = 1.0;
    }
    g.constant(m, &[picks.len(), n])
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    bundle: &mut ModelBundle,
    data: &SplitView,
    memory: &mut EmbeddingMemory,
    labels: &[u32],
    batch: &[usize],
    cfg: &TrainConfig,
    mode: TrainMode,
    sgd: &mut Sgd,
    step: usize,
    lr: f64,
) -> Result<LogEntry> {
    let x = data.features.select_rows(batch);
    let batch_labels: Vec<u32> = batch.iter().map(|&i| labels[i]).collect();
    let mut g = Graph::new();
    let mut binding = Binding::new();

    let aug = &cfg.augmentation;
    let seed = cfg.seed;
    let view = |v: usize, x: &Matrix| -> Matrix {
        if v == 0 {
            x.clone()
        } else {
            augment_batch(x, aug, seed, step as u64, v as u64)
        }
    };

    let mut loss_inst = None;
    let (embedding, trunk_out) = if mode.uses_inst() {
        let branch = instance_loss(&mut g, bundle, &x, view, cfg.loss.num_augmentations, true, Some(&mut binding))?;
        loss_inst = Some(branch.loss);
        (branch.online[0], branch.trunk_out[0])
    } else {
        let xt = g.constant_matrix(&x)?;
        let f = bundle.online_forward(&mut g, xt, true, Some(&mut binding))?;
        (f.embedding, f.trunk_out)
    };

    let loss_knn = if mode.uses_knn() {
        Some(knn_loss(&mut g, embedding, batch, &batch_labels, memory.rows(), memory.labels(cfg.label_level)?, cfg.loss.sigma)?)
    } else {
        None
    };

    let loss_ce = if mode.uses_ce() {
        let logits = bundle.classifier_logits(&mut g, trunk_out, Some(&mut binding))?;
        Some(cross_entropy_loss(&mut g, logits, &batch_labels)?)
    } else {
        None
    };

    let loss_triplet = if mode.uses_triplet() {
        let xp = view(1, &x);
        let xp = g.constant_matrix(&xp)?;
        let positive = bundle.online_forward(&mut g, xp, true, Some(&mut binding))?.embedding;
        let picks = pick_negatives(&batch_labels, seed, step);
        let sel = selection_matrix(&mut g, &picks, batch.len())?;
        let negative = g.matmul(sel, embedding)?;
        Some(triplet_loss(&mut g, embedding, positive, negative, cfg.loss.triplet_margin)?)
    } else {
        None
    };

    let total = match mode {
        TrainMode::Grafit | TrainMode::GrafitFc => total_loss(&mut g, loss_knn.expect("knn"), loss_inst.expect("inst"), cfg.loss.lambda)?,
        TrainMode::SncaPlus => loss_knn.expect("knn"),
        TrainMode::InstOnly => loss_inst.expect("inst"),
        TrainMode::CeBaseline => loss_ce.expect("ce"),
        TrainMode::CePlusTriplet => g.add(loss_ce.expect("ce"), loss_triplet.expect("triplet"))?,
    };

    g.backward(total)?;
    let grads = binding.grads(&g);
    sgd.step(bundle.trainable_mut(), &grads, lr)?;
    bundle.ema_update();
    let fresh = g.to_matrix(embedding);
    memory.update_minibatch(batch, &fresh)?;

    let value = |t: Option<Tensor>| t.map(|t| g.scalar(t));
    Ok(LogEntry {
        step,
        epoch: 0,
        lr,
        loss_total: g.scalar(total),
        loss_knn: value(loss_knn),
        loss_inst: value(loss_inst),
        loss_ce: value(loss_ce),
        loss_triplet: value(loss_triplet),
    })
}
