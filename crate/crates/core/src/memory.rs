//! Training-set embedding memory with the running ½-average update and the
//! exact test-time rebuild, plus the `GEMB` embedding-store file.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::error::{contract, GrafitError, Result};
use crate::matrix::Matrix;
use crate::model::TestModel;

pub const STORE_MAGIC: &[u8; 4] = b"GEMB";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabelLevel {
    Coarse,
    Fine,
}

impl LabelLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelLevel::Coarse => "coarse",
            LabelLevel::Fine => "fine",
        }
    }
}

impl std::str::FromStr for LabelLevel {
    type Err = GrafitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(LabelLevel::Coarse),
            "fine" => Ok(LabelLevel::Fine),
            other => Err(GrafitError::Config(format!("unknown label level {other:?}"))),
        }
    }
}

/// Checks that every fine label has a single coarse parent.
pub fn check_refinement(coarse: &[u32], fine: &[u32]) -> Result<HashMap<u32, u32>> {
    contract!(coarse.len() == fine.len(), "label lengths differ: {} vs {}", coarse.len(), fine.len());
    let mut parent = HashMap::new();
    for (&c, &f) in coarse.iter().zip(fine) {
        match parent.insert(f, c) {
            Some(prev) if prev != c => {
                return Err(GrafitError::Hierarchy(format!("fine label {f} maps to coarse {prev} and {c}")));
            }
            _ => {}
        }
    }
    Ok(parent)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMemory {
    rows: Matrix,
    coarse_labels: Vec<u32>,
    fine_labels: Option<Vec<u32>>,
    generation: u64,
}

impl EmbeddingMemory {
    pub fn new(rows: Matrix, coarse_labels: Vec<u32>, fine_labels: Option<Vec<u32>>) -> Result<Self> {
        contract!(rows.rows() == coarse_labels.len(), "memory has {} rows but {} labels", rows.rows(), coarse_labels.len());
        if let Some(fine) = &fine_labels {
            check_refinement(&coarse_labels, fine)?;
        }
        Ok(Self { rows, coarse_labels, fine_labels, generation: 0 })
    }

    /// Memory initialized with the evaluation-mode embeddings of `features`.
    pub fn init(model: &TestModel, features: &Matrix, coarse_labels: Vec<u32>, fine_labels: Option<Vec<u32>>) -> Result<Self> {
        let rows = if features.rows() == 0 { Matrix::zeros(0, model.embed_dim) } else { model.embed(features)? };
        Self::new(rows, coarse_labels, fine_labels)
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn rows(&self) -> &Matrix {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn coarse_labels(&self) -> &[u32] {
        &self.coarse_labels
    }

    pub fn fine_labels(&self) -> Option<&[u32]> {
        self.fine_labels.as_deref()
    }

    pub fn labels(&self, level: LabelLevel) -> Result<&[u32]> {
        match level {
            LabelLevel::Coarse => Ok(&self.coarse_labels),
            LabelLevel::Fine => self.fine_labels().ok_or_else(|| GrafitError::Contract("memory holds no fine labels".into())),
        }
    }

    /// `m_i <- (m_i + g_i) / 2` for each batch index; rows are not
    /// renormalized.
    pub fn update_minibatch(&mut self, indices: &[usize], fresh: &Matrix) -> Result<()> {
        contract!(
            fresh.rows() == indices.len() && fresh.cols() == self.dim(),
            "fresh batch is {}x{}, expected {}x{}",
            fresh.rows(),
            fresh.cols(),
            indices.len(),
            self.dim()
        );
        let mut seen = HashSet::with_capacity(indices.len());
        for &i in indices {
            contract!(i < self.len(), "memory index {i} out of range ({} rows)", self.len());
            contract!(seen.insert(i), "duplicate memory index {i} in one batch");
        }
        for (k, &i) in indices.iter().enumerate() {
            for (m, g) in self.rows.row_mut(i).iter_mut().zip(fresh.row(k)) {
                *m = 0.5 * (*m + g);
            }
        }
        self.generation += 1;
        Ok(())
    }

    /// Replaces every row with the evaluation-mode embedding under `model`.
    pub fn rebuild(&mut self, model: &TestModel, features: &Matrix) -> Result<()> {
        if features.rows() != self.len() {
            return Err(GrafitError::Shape {
                op: "rebuild",
                left: vec![self.len(), self.dim()],
                right: vec![features.rows(), features.cols()],
            });
        }
        if features.rows() > 0 {
            self.rows = model.embed(features)?;
        }
        Ok(())
    }

    pub fn to_store(&self) -> EmbeddingStore {
        let mut levels = vec![self.coarse_labels.clone()];
        if let Some(f) = &self.fine_labels {
            levels.push(f.clone());
        }
        EmbeddingStore { rows: self.rows.clone(), levels }
    }

    pub fn from_store(store: EmbeddingStore) -> Result<Self> {
        let mut levels = store.levels.into_iter();
        let coarse = levels.next().ok_or_else(|| GrafitError::Contract("embedding store carries no labels".into()))?;
        Self::new(store.rows, coarse, levels.next())
    }
}

/// Embeddings plus zero, one (coarse) or two (coarse, fine) label levels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub rows: Matrix,
    pub levels: Vec<Vec<u32>>,
}

impl EmbeddingStore {
    pub fn level(&self, level: LabelLevel) -> Option<&[u32]> {
        let i = match level {
            LabelLevel::Coarse => 0,
            LabelLevel::Fine => 1,
        };
        self.levels.get(i).map(Vec::as_slice)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(STORE_MAGIC);
        w.u32(STORE_VERSION);
        w.u64(self.rows.rows() as u64);
        w.u32(self.rows.cols() as u32);
        w.u8(self.levels.len() as u8);
        w.f64s(self.rows.as_slice());
        for level in &self.levels {
            w.u32s(level);
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(STORE_MAGIC)?;
        r.expect_version(STORE_VERSION)?;
        let n = r.u64()? as usize;
        let dim = r.u32()? as usize;
        let at = r.offset();
        let num_levels = r.u8()? as usize;
        if num_levels > 2 {
            return Err(GrafitError::Format { offset: at, msg: format!("{num_levels} label levels, at most 2 supported") });
        }
        let rows = Matrix::from_vec(n, dim, r.f64s(n.checked_mul(dim).ok_or_else(|| r.format_error("size overflow"))?)?);
        let mut levels = Vec::with_capacity(num_levels);
        for _ in 0..num_levels {
            levels.push(r.u32s(n)?);
        }
        r.finish()?;
        if levels.len() == 2 {
            check_refinement(&levels[0], &levels[1])?;
        }
        Ok(Self { rows, levels })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
