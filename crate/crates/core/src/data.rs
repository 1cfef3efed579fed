//! Hierarchical datasets: the synthetic Gaussian generator, vector
//! augmentations, random even sub-splits of coarse classes, and the `GDAT`
//! file format plus CSV import.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::codec::{Reader, Writer};
use crate::error::{config_check, contract, GrafitError, Result};
use crate::matrix::{norm, Matrix};
use crate::memory::{check_refinement, LabelLevel};
use crate::rng::stream;

pub const DATASET_MAGIC: &[u8; 4] = b"GDAT";
pub const DATASET_VERSION: u32 = 1;

/// Fraction of each fine class held out for testing.
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalDataset {
    pub features: Matrix,
    pub coarse_labels: Vec<u32>,
    pub fine_labels: Vec<u32>,
    /// Fine label to coarse parent.
    pub hierarchy: BTreeMap<u32, u32>,
    pub split: Vec<Split>,
    pub seed: u64,
}

/// Features and labels of one split, with indices into the full dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitView {
    pub indices: Vec<usize>,
    pub features: Matrix,
    pub coarse_labels: Vec<u32>,
    pub fine_labels: Vec<u32>,
}

impl SplitView {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn labels(&self, level: LabelLevel) -> &[u32] {
        match level {
            LabelLevel::Coarse => &self.coarse_labels,
            LabelLevel::Fine => &self.fine_labels,
        }
    }
}

impl HierarchicalDataset {
    /// Validates the hierarchy and the two-training-samples-per-fine-class
    /// requirement.
    pub fn new(
        features: Matrix,
        coarse_labels: Vec<u32>,
        fine_labels: Vec<u32>,
        hierarchy: BTreeMap<u32, u32>,
        split: Vec<Split>,
        seed: u64,
    ) -> Result<Self> {
        let ds = Self { features, coarse_labels, fine_labels, hierarchy, split, seed };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        contract!(
            self.coarse_labels.len() == n && self.fine_labels.len() == n && self.split.len() == n,
            "dataset has {n} rows but {} coarse labels, {} fine labels and {} split flags",
            self.coarse_labels.len(),
            self.fine_labels.len(),
            self.split.len()
        );
        for (&c, &f) in self.coarse_labels.iter().zip(&self.fine_labels) {
            match self.hierarchy.get(&f) {
                None => return Err(GrafitError::MissingParent(f)),
                Some(&p) if p != c => {
                    return Err(GrafitError::Hierarchy(format!(
                        "sample with fine label {f} has coarse label {c}, but the hierarchy says {p}"
                    )))
                }
                _ => {}
            }
        }
        let mut train_counts: HashMap<u32, usize> = HashMap::new();
        for (&f, &s) in self.fine_labels.iter().zip(&self.split) {
            if s == Split::Train {
                *train_counts.entry(f).or_default() += 1;
            }
        }
        for &f in self.hierarchy.keys() {
            let count = train_counts.get(&f).copied().unwrap_or(0);
            contract!(count >= 2, "fine class {f} has {count} training samples, need at least 2");
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_coarse(&self) -> usize {
        let mut parents: Vec<u32> = self.hierarchy.values().copied().collect();
        parents.sort_unstable();
        parents.dedup();
        parents.len()
    }

    pub fn num_fine(&self) -> usize {
        self.hierarchy.len()
    }

    pub fn hierarchy_map(&self) -> HashMap<u32, u32> {
        self.hierarchy.iter().map(|(&f, &c)| (f, c)).collect()
    }

    pub fn view(&self, which: Split) -> SplitView {
        let indices: Vec<usize> = (0..self.len()).filter(|&i| self.split[i] == which).collect();
        SplitView {
            features: self.features.select_rows(&indices),
            coarse_labels: indices.iter().map(|&i| self.coarse_labels[i]).collect(),
            fine_labels: indices.iter().map(|&i| self.fine_labels[i]).collect(),
            indices,
        }
    }

    pub fn train(&self) -> SplitView {
        self.view(Split::Train)
    }

    pub fn test(&self) -> SplitView {
        self.view(Split::Test)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.u64(self.len() as u64);
        w.u32(self.dim() as u32);
        w.u64(self.seed);
        w.f64s(self.features.as_slice());
        w.u32s(&self.coarse_labels);
        w.u32s(&self.fine_labels);
        for &s in &self.split {
            w.u8(u8::from(s == Split::Test));
        }
        w.u32(self.hierarchy.len() as u32);
        for (&f, &c) in &self.hierarchy {
            w.u32(f);
            w.u32(c);
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(DATASET_MAGIC)?;
        r.expect_version(DATASET_VERSION)?;
        let n = r.u64()? as usize;
        let dim = r.u32()? as usize;
        let seed = r.u64()?;
        let count = n.checked_mul(dim).ok_or_else(|| r.format_error("size overflow"))?;
        let features = Matrix::from_vec(n, dim, r.f64s(count)?);
        let coarse_labels = r.u32s(n)?;
        let fine_labels = r.u32s(n)?;
        let mut split = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.offset();
            split.push(match r.u8()? {
                0 => Split::Train,
                1 => Split::Test,
                other => return Err(GrafitError::Format { offset: at, msg: format!("split flag {other}, expected 0 or 1") }),
            });
        }
        let pairs = r.u32()? as usize;
        let mut hierarchy = BTreeMap::new();
        for _ in 0..pairs {
            let f = r.u32()?;
            let c = r.u32()?;
            if let Some(prev) = hierarchy.insert(f, c) {
                if prev != c {
                    return Err(GrafitError::Hierarchy(format!("fine label {f} maps to coarse {prev} and {c}")));
                }
                return Err(r.format_error(format!("duplicate hierarchy entry for fine label {f}")));
            }
        }
        r.finish()?;
        Self::new(features, coarse_labels, fine_labels, hierarchy, split, seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Assigns `round(TEST_FRACTION * n)` members of each fine class to the test
/// split, never leaving fewer than two for training.
pub fn stratified_split(fine_labels: &[u32], seed: u64) -> Vec<Split> {
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &f) in fine_labels.iter().enumerate() {
        by_class.entry(f).or_default().push(i);
    }
    let mut split = vec![Split::Train; fine_labels.len()];
    let mut rng = stream(seed, "split", 0);
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        let n = members.len();
        let n_test = ((n as f64 * TEST_FRACTION).round() as usize).min(n.saturating_sub(2));
        for &i in &members[..n_test] {
            split[i] = Split::Test;
        }
    }
    split
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_coarse: usize,
    pub fine_per_coarse: usize,
    pub dim: usize,
    pub coarse_separation: f64,
    pub fine_separation: f64,
    pub samples_per_fine: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { num_coarse: 10, fine_per_coarse: 4, dim: 32, coarse_separation: 6.0, fine_separation: 5.0, samples_per_fine: 30, seed: 7 }
    }
}

fn random_direction<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Gaussian clusters in a two-level hierarchy. Coarse centers lie on the
/// sphere of radius `coarse_separation`; each fine center sits at distance
/// `fine_separation` from its coarse center; samples add unit isotropic
/// noise. Fine label `f` belongs to coarse label `f / fine_per_coarse`.
pub fn synth_gaussian_hierarchy(cfg: &SynthConfig) -> Result<HierarchicalDataset> {
    config_check!(
        cfg.num_coarse >= 1 && cfg.fine_per_coarse >= 1 && cfg.dim >= 1,
        "num_coarse, fine_per_coarse and dim must be at least 1"
    );
    config_check!(
        cfg.samples_per_fine >= 2,
        "samples_per_fine = {} leaves fewer than 2 training samples per fine class",
        cfg.samples_per_fine
    );
    config_check!(
        cfg.coarse_separation.is_finite() && cfg.fine_separation.is_finite() && cfg.fine_separation >= 0.0,
        "separations must be finite and non-negative"
    );
    config_check!(
        cfg.fine_separation < cfg.coarse_separation,
        "fine_separation {} must be below coarse_separation {}",
        cfg.fine_separation,
        cfg.coarse_separation
    );
    let mut centers_rng = stream(cfg.seed, "centers", 0);
    let mut noise_rng = stream(cfg.seed, "noise", 0);
    let n_total = cfg.num_coarse * cfg.fine_per_coarse * cfg.samples_per_fine;
    let mut data = Vec::with_capacity(n_total * cfg.dim);
    let mut coarse_labels = Vec::with_capacity(n_total);
    let mut fine_labels = Vec::with_capacity(n_total);
    let mut hierarchy = BTreeMap::new();
    for c in 0..cfg.num_coarse {
        let coarse_center: Vec<f64> = random_direction(cfg.dim, &mut centers_rng).into_iter().map(|x| x * cfg.coarse_separation).collect();
        for j in 0..cfg.fine_per_coarse {
            let fine = (c * cfg.fine_per_coarse + j) as u32;
            hierarchy.insert(fine, c as u32);
            let offset = random_direction(cfg.dim, &mut centers_rng);
            let center: Vec<f64> = coarse_center.iter().zip(&offset).map(|(a, o)| a + cfg.fine_separation * o).collect();
            for _ in 0..cfg.samples_per_fine {
                data.extend(center.iter().map(|&m| m + noise_rng.sample::<f64, _>(StandardNormal)));
                coarse_labels.push(c as u32);
                fine_labels.push(fine);
            }
        }
    }
    let split = stratified_split(&fine_labels, cfg.seed);
    HierarchicalDataset::new(Matrix::from_vec(n_total, cfg.dim, data), coarse_labels, fine_labels, hierarchy, split, cfg.seed)
}

/// Reads `d0,..,d{D-1},coarse,fine` rows and applies the stratified split.
pub fn import_csv(path: &Path, seed: u64) -> Result<HierarchicalDataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_error)?;
    let headers = reader.headers().map_err(csv_error)?.clone();
    let cols = headers.len();
    contract!(cols >= 3, "CSV needs at least one feature column plus coarse and fine");
    let dim = cols - 2;
    for (i, h) in headers.iter().take(dim).enumerate() {
        contract!(h == format!("d{i}"), "CSV header column {i} is {h:?}, expected \"d{i}\"");
    }
    contract!(&headers[dim] == "coarse" && &headers[dim + 1] == "fine", "CSV header must end with coarse,fine");
    let mut data = Vec::new();
    let mut coarse = Vec::new();
    let mut fine = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(csv_error)?;
        let bad = |what: &str| GrafitError::Contract(format!("CSV data row {}: bad {what}", line + 1));
        for v in record.iter().take(dim) {
            let x: f64 = v.parse().map_err(|_| bad("feature"))?;
            contract!(x.is_finite(), "CSV data row {}: non-finite feature", line + 1);
            data.push(x);
        }
        coarse.push(record[dim].parse().map_err(|_| bad("coarse label"))?);
        fine.push(record[dim + 1].parse().map_err(|_| bad("fine label"))?);
    }
    let hierarchy = check_refinement(&coarse, &fine)?.into_iter().collect();
    let split = stratified_split(&fine, seed);
    HierarchicalDataset::new(Matrix::from_vec(coarse.len(), dim, data), coarse, fine, hierarchy, split, seed)
}

fn csv_error(e: csv::Error) -> GrafitError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => GrafitError::Io(io),
        other => GrafitError::Contract(format!("CSV parse error: {other:?}")),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    pub jitter_sigma: f64,
    pub scale_range: (f64, f64),
    pub mask_prob: f64,
    /// Sub-stream id for [`augment_with_stream`].
    pub stream: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self { jitter_sigma: 0.1, scale_range: (0.9, 1.1), mask_prob: 0.05, stream: 0 }
    }
}

impl AugmentationConfig {
    /// The identity view.
    pub fn neutral() -> Self {
        Self { jitter_sigma: 0.0, scale_range: (1.0, 1.0), mask_prob: 0.0, stream: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        config_check!(lo <= hi && lo.is_finite() && hi.is_finite(), "scale range [{lo}, {hi}] is invalid");
        config_check!((0.0..1.0).contains(&self.mask_prob), "mask_prob {} outside [0, 1)", self.mask_prob);
        config_check!(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite(), "jitter_sigma must be finite and non-negative");
        Ok(())
    }
}

/// `mask(scale * (x + noise))`, with one scale draw per vector and an
/// independent keep/drop draw per coordinate.
pub fn augment<R: Rng>(x: &[f64], cfg: &AugmentationConfig, rng: &mut R) -> Vec<f64> {
    let (lo, hi) = cfg.scale_range;
    let scale = if lo < hi { rng.random_range(lo..hi) } else { lo };
    x.iter()
        .map(|&v| {
            let noisy = if cfg.jitter_sigma > 0.0 { v + cfg.jitter_sigma * rng.sample::<f64, _>(StandardNormal) } else { v };
            let keep = cfg.mask_prob == 0.0 || rng.random::<f64>() >= cfg.mask_prob;
            if keep {
                scale * noisy
            } else {
                0.0
            }
        })
        .collect()
}

/// [`augment`] drawing from sub-stream `cfg.stream` of `seed`.
pub fn augment_with_stream(x: &[f64], cfg: &AugmentationConfig, seed: u64) -> Vec<f64> {
    augment(x, cfg, &mut stream(seed, "augment", cfg.stream))
}

/// Augments every row of a batch. The stream is addressed by
/// `(step, view)`, so views are reproducible regardless of call order.
pub fn augment_batch(x: &Matrix, cfg: &AugmentationConfig, seed: u64, step: u64, view: u64) -> Matrix {
    let mut rng = stream(seed, "augment", (step << 16) | view);
    let mut out = Vec::with_capacity(x.rows() * x.cols());
    for row in x.iter_rows() {
        out.extend(augment(row, cfg, &mut rng));
    }
    Matrix::from_vec(x.rows(), x.cols(), out)
}

/// Random even partitions of each coarse class into `splits_per_coarse`
/// synthetic sub-classes. Each trial labels the given samples with
/// `coarse * splits_per_coarse + part`.
pub fn random_fine_split(coarse_labels: &[u32], splits_per_coarse: usize, num_trials: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    config_check!(splits_per_coarse >= 1, "splits_per_coarse must be at least 1");
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &c) in coarse_labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    for (&c, members) in &by_class {
        contract!(
            members.len() >= splits_per_coarse,
            "coarse class {c} has {} samples, cannot split into {splits_per_coarse}",
            members.len()
        );
    }
    let k = splits_per_coarse as u32;
    Ok((0..num_trials)
        .map(|trial| {
            let mut rng = stream(seed, "fine_split", trial as u64);
            let mut labels = vec![0u32; coarse_labels.len()];
            for (&c, members) in &by_class {
                let mut order = members.clone();
                order.shuffle(&mut rng);
                for (pos, &i) in order.iter().enumerate() {
                    labels[i] = c * k + pos as u32 % k;
                }
            }
            labels
        })
        .collect())
}
