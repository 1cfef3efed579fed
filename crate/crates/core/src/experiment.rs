//! End-to-end runs: build a model for a mode, initialize the memory, train,
//! and evaluate retrieval and kNN classification on the test split.

use crate::classify::KnnConfig;
use crate::data::HierarchicalDataset;
use crate::error::Result;
use crate::eval::{knn_top1, retrieval_map, Queries};
use crate::memory::{EmbeddingMemory, LabelLevel};
use crate::model::{ModelBundle, ModelConfig, TestModel};
use crate::retrieval::{RankingMode, DEFAULT_EPSILON};
use crate::trainer::{train_with_callback, TrainConfig, TrainLog, TrainMode};

pub struct TrainedRun {
    pub bundle: ModelBundle,
    pub test_model: TestModel,
    /// Rebuilt memory over the training split, both label levels.
    pub memory: EmbeddingMemory,
    pub log: TrainLog,
}

/// Model configuration `mode` trains on `dataset` under `cfg`.
pub fn model_config_for(dataset: &HierarchicalDataset, cfg: &TrainConfig, mode: TrainMode) -> ModelConfig {
    let classes = match cfg.label_level {
        LabelLevel::Coarse => dataset.num_coarse(),
        LabelLevel::Fine => dataset.num_fine(),
    };
    mode.model_config(dataset.dim(), classes, cfg.seed)
}

pub fn run_training(dataset: &HierarchicalDataset, cfg: &TrainConfig, mode: TrainMode) -> Result<TrainedRun> {
    run_training_with_callback(dataset, cfg, mode, |_, _| Ok(()))
}

pub fn run_training_with_callback(
    dataset: &HierarchicalDataset,
    cfg: &TrainConfig,
    mode: TrainMode,
    on_snapshot: impl FnMut(usize, &ModelBundle) -> Result<()>,
) -> Result<TrainedRun> {
    let mut bundle = ModelBundle::new(&model_config_for(dataset, cfg, mode))?;
    let train = dataset.train();
    let mut memory = EmbeddingMemory::init(
        &bundle.snapshot_test_model(),
        &train.features,
        train.coarse_labels.clone(),
        Some(train.fine_labels.clone()),
    )?;
    let out = train_with_callback(&mut bundle, &train, &mut memory, cfg, mode, on_snapshot)?;
    Ok(TrainedRun { bundle, test_model: out.test_model, memory, log: out.log })
}

/// Test-split metrics of a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub map_cosine: f64,
    pub map_conditional: f64,
    pub map_oracle: f64,
    pub top1_fine: f64,
    pub top1_coarse: f64,
}

pub fn evaluate(model: &TestModel, memory: &EmbeddingMemory, dataset: &HierarchicalDataset, knn: &KnnConfig) -> Result<Evaluation> {
    let test = dataset.test();
    let embeddings = model.embed(&test.features)?;
    let queries =
        Queries { embeddings: &embeddings, coarse_labels: &test.coarse_labels, fine_labels: &test.fine_labels, memory_indices: None };
    let map = |mode| retrieval_map(memory, &queries, mode, knn, DEFAULT_EPSILON).map(|r| r.value);
    Ok(Evaluation {
        map_cosine: map(RankingMode::Cosine)?,
        map_conditional: map(RankingMode::Conditional)?,
        map_oracle: map(RankingMode::Oracle)?,
        top1_fine: knn_top1(memory, &queries, LabelLevel::Fine, knn)?,
        top1_coarse: knn_top1(memory, &queries, LabelLevel::Coarse, knn)?,
    })
}
