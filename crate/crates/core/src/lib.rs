//! Coarse-to-fine metric learning.
//!
//! Embedding models are trained with a supervised kNN loss on coarse labels
//! plus a self-supervised instance loss against an EMA target network. A
//! memory of training-set embeddings backs both the kNN loss and test-time
//! category-level retrieval and on-the-fly kNN classification at a finer
//! granularity than the training labels.

pub mod analysis;
pub mod autodiff;
pub mod classify;
mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod matrix;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod retrieval;
pub mod rng;
pub mod trainer;

pub use autodiff::{Graph, Tensor};
pub use classify::{KnnConfig, Posterior};
pub use data::{AugmentationConfig, HierarchicalDataset, Split, SynthConfig};
pub use error::{GrafitError, Result};
pub use losses::LossConfig;
pub use matrix::Matrix;
pub use memory::{EmbeddingMemory, EmbeddingStore, LabelLevel};
pub use metrics::EvalReport;
pub use model::{EmbeddingSource, ModelBundle, ModelConfig, ProjectorKind, TestModel};
pub use retrieval::{RankingMode, RankingResult};
pub use trainer::{TrainConfig, TrainLog, TrainMode};
