//! Trunk `f`, projector `P`, predictor `q` and the EMA target copies, plus
//! the reduced test-time model and the `GFIT` checkpoint format.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Graph, Tensor};
use crate::codec::{Reader, Writer};
use crate::error::{config_check, GrafitError, Result};
use crate::matrix::Matrix;
use crate::rng;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GFIT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Running-statistics momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Param {
    fn new(name: String, shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self { name, shape, values }
    }

    fn renamed(&self, from: &str, to: &str) -> Self {
        Self { name: self.name.replacen(from, to, 1), ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Param,
    pub bias: Param,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
}

/// Every batch norm is followed by a ReLU, so the layer pair is one unit.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(Linear),
    BatchNormRelu(BatchNorm),
}

/// `Linear (BN ReLU Linear)*` stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub name: String,
    pub layers: Vec<Layer>,
}

/// Leaf tensors created for trainable parameters during one graph build,
/// keyed by parameter name so repeated forwards share leaves.
#[derive(Debug, Default)]
pub struct Binding {
    leaves: HashMap<String, Tensor>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    fn bind(&mut self, g: &mut Graph, p: &Param) -> Result<Tensor> {
        if let Some(&t) = self.leaves.get(&p.name) {
            return Ok(t);
        }
        let t = g.param(p.values.clone(), &p.shape)?;
        self.leaves.insert(p.name.clone(), t);
        Ok(t)
    }

    /// Gradients of every bound parameter after a backward pass.
    pub fn grads(&self, g: &Graph) -> HashMap<String, Vec<f64>> {
        self.leaves.iter().filter_map(|(name, &t)| g.grad(t).map(|gr| (name.clone(), gr.to_vec()))).collect()
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        self.leaves.get(name).copied()
    }
}

pub struct MlpOutput {
    pub out: Tensor,
    /// Training-mode batch-norm nodes, in layer order.
    pub bn_nodes: Vec<Tensor>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`; hidden widths get BN + ReLU.
    pub fn new<R: Rng>(name: &str, dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut uniform = |n: usize| (0..n).map(|_| rng.random_range(-bound..=bound)).collect::<Vec<_>>();
            let idx = 2 * i;
            layers.push(Layer::Linear(Linear {
                weight: Param::new(format!("{name}.{idx}.linear.weight"), vec![fan_in, fan_out], uniform(fan_in * fan_out)),
                bias: Param::new(format!("{name}.{idx}.linear.bias"), vec![fan_out], uniform(fan_out)),
            }));
            if i + 2 < dims.len() {
                let p = |field: &str, v: f64| Param::new(format!("{name}.{}.bn.{field}", idx + 1), vec![fan_out], vec![v; fan_out]);
                layers.push(Layer::BatchNormRelu(BatchNorm {
                    gamma: p("gamma", 1.0),
                    beta: p("beta", 0.0),
                    running_mean: p("running_mean", 0.0),
                    running_var: p("running_var", 1.0),
                }));
            }
        }
        Self { name: name.to_string(), layers }
    }

    pub fn input_dim(&self) -> usize {
        match self.layers.first() {
            Some(Layer::Linear(l)) => l.weight.shape[0],
            _ => 0,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Linear(l) => Some(l.weight.shape[1]),
                _ => None,
            })
            .unwrap_or(0)
    }

    /// Forward pass. With `binding`, trainable parameters become gradient
    /// leaves; without, everything enters the graph as constants.
    pub fn forward(&self, g: &mut Graph, x: Tensor, training: bool, mut binding: Option<&mut Binding>) -> Result<MlpOutput> {
        let mut h = x;
        let mut bn_nodes = Vec::new();
        let leaf = |g: &mut Graph, p: &Param, binding: &mut Option<&mut Binding>| match binding {
            Some(b) => b.bind(g, p),
            None => g.constant(p.values.clone(), &p.shape),
        };
        for layer in &self.layers {
            match layer {
                Layer::Linear(l) => {
                    let w = leaf(g, &l.weight, &mut binding)?;
                    let b = leaf(g, &l.bias, &mut binding)?;
                    let xw = g.matmul(h, w)?;
                    h = g.add_bias(xw, b)?;
                }
                Layer::BatchNormRelu(bn) => {
                    let gamma = leaf(g, &bn.gamma, &mut binding)?;
                    let beta = leaf(g, &bn.beta, &mut binding)?;
                    let y = if training {
                        let y = g.batch_norm_train(h, gamma, beta)?;
                        bn_nodes.push(y);
                        y
                    } else {
                        g.batch_norm_eval(h, gamma, beta, &bn.running_mean.values, &bn.running_var.values)?
                    };
                    h = g.relu(y)?;
                }
            }
        }
        Ok(MlpOutput { out: h, bn_nodes })
    }

    /// Folds batch statistics from a training-mode forward into the running
    /// estimates (unbiased variance).
    pub fn absorb_batch_stats(&mut self, g: &Graph, bn_nodes: &[Tensor]) {
        let mut nodes = bn_nodes.iter();
        for layer in &mut self.layers {
            let Layer::BatchNormRelu(bn) = layer else { continue };
            let Some(&t) = nodes.next() else { return };
            let Some((mean, var)) = g.batch_stats(t) else { continue };
            let n = g.shape(t)[0] as f64;
            let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for j in 0..mean.len() {
                let rm = &mut bn.running_mean.values[j];
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[j];
                let rv = &mut bn.running_var.values[j];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[j] * correction;
            }
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Linear(l) => out.extend([&l.weight, &l.bias]),
                Layer::BatchNormRelu(bn) => out.extend([&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]),
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(l) => out.extend([&mut l.weight, &mut l.bias]),
                Layer::BatchNormRelu(bn) => out.extend([&mut bn.gamma, &mut bn.beta, &mut bn.running_mean, &mut bn.running_var]),
            }
        }
        out
    }

    /// Parameters that receive gradients (running statistics excluded).
    pub fn trainable_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(l) => out.extend([&mut l.weight, &mut l.bias]),
                Layer::BatchNormRelu(bn) => out.extend([&mut bn.gamma, &mut bn.beta]),
            }
        }
        out
    }

    fn renamed(&self, to: &str) -> Mlp {
        let from = format!("{}.", self.name);
        let to_prefix = format!("{to}.");
        let mut out = self.clone();
        out.name = to.to_string();
        for p in out.params_mut() {
            *p = p.renamed(&from, &to_prefix);
        }
        out
    }

    /// Rebuilds an MLP from named records (`<name>.<idx>.<kind>.<field>`).
    fn from_records(name: &str, records: &BTreeMap<String, Param>) -> Result<Option<Mlp>> {
        let prefix = format!("{name}.");
        let mut by_index: BTreeMap<usize, HashMap<String, Param>> = BTreeMap::new();
        for (key, p) in records.range(prefix.clone()..) {
            let Some(rest) = key.strip_prefix(&prefix) else { break };
            let Some((idx, field)) = rest.split_once('.') else {
                return Err(GrafitError::Format { offset: 0, msg: format!("bad parameter name {key}") });
            };
            let idx: usize = idx.parse().map_err(|_| GrafitError::Format { offset: 0, msg: format!("bad layer index in {key}") })?;
            by_index.entry(idx).or_default().insert(field.to_string(), p.clone());
        }
        if by_index.is_empty() {
            return Ok(None);
        }
        let missing = |field: &str| GrafitError::Format { offset: 0, msg: format!("{name}: missing {field}") };
        let mut layers = Vec::new();
        for (_, mut fields) in by_index {
            let is_linear = fields.contains_key("linear.weight");
            let mut take = |f: &str| fields.remove(f).ok_or_else(|| missing(f));
            if is_linear {
                layers.push(Layer::Linear(Linear { weight: take("linear.weight")?, bias: take("linear.bias")? }));
            } else {
                layers.push(Layer::BatchNormRelu(BatchNorm {
                    gamma: take("bn.gamma")?,
                    beta: take("bn.beta")?,
                    running_mean: take("bn.running_mean")?,
                    running_var: take("bn.running_var")?,
                }));
            }
        }
        Ok(Some(Mlp { name: name.to_string(), layers }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectorKind {
    /// Single linear map.
    Fc,
    /// Linear, BN, ReLU, linear.
    Mlp,
}

/// Which representation serves as the retrieval embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    /// `normalize(P(f(x)))`
    Projector,
    /// `normalize(f(x))`, used by the cross-entropy baselines.
    Trunk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub trunk_hidden: Vec<usize>,
    pub trunk_out_dim: usize,
    pub projector_kind: ProjectorKind,
    pub projector_hidden: usize,
    pub embed_dim: usize,
    pub tau: f64,
    /// Adds a linear classification head on the trunk output.
    pub classifier_classes: Option<usize>,
    pub embedding_source: EmbeddingSource,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            trunk_hidden: vec![64, 64],
            trunk_out_dim: 64,
            projector_kind: ProjectorKind::Mlp,
            projector_hidden: 128,
            embed_dim: 32,
            tau: 0.99,
            classifier_classes: None,
            embedding_source: EmbeddingSource::Projector,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub trunk: Mlp,
    pub projector: Mlp,
    pub predictor: Mlp,
    pub target_trunk: Mlp,
    pub target_projector: Mlp,
    pub classifier: Option<Mlp>,
    pub projector_kind: ProjectorKind,
    pub embedding_source: EmbeddingSource,
    pub embed_dim: usize,
    pub tau: f64,
}

/// Graph handles produced by one online forward.
pub struct OnlineForward {
    pub trunk_out: Tensor,
    /// Unit-norm embedding (per the bundle's embedding source).
    pub embedding: Tensor,
}

impl ModelBundle {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        config_check!((0.0..=1.0).contains(&cfg.tau), "tau must lie in [0, 1], got {}", cfg.tau);
        config_check!(cfg.input_dim > 0 && cfg.embed_dim > 0, "dimensions must be positive");
        let mut rng = rng::stream(cfg.seed, "model-init", 0);
        let mut trunk_dims = vec![cfg.input_dim];
        trunk_dims.extend(&cfg.trunk_hidden);
        trunk_dims.push(cfg.trunk_out_dim);
        let trunk = Mlp::new("trunk", &trunk_dims, &mut rng);
        let projector = match cfg.projector_kind {
            ProjectorKind::Fc => Mlp::new("projector", &[cfg.trunk_out_dim, cfg.embed_dim], &mut rng),
            ProjectorKind::Mlp => Mlp::new("projector", &[cfg.trunk_out_dim, cfg.projector_hidden, cfg.embed_dim], &mut rng),
        };
        let predictor = Mlp::new("predictor", &[cfg.embed_dim, cfg.projector_hidden, cfg.embed_dim], &mut rng);
        let classifier = cfg.classifier_classes.map(|c| Mlp::new("classifier", &[cfg.trunk_out_dim, c], &mut rng));
        Ok(Self {
            target_trunk: trunk.renamed("target_trunk"),
            target_projector: projector.renamed("target_projector"),
            trunk,
            projector,
            predictor,
            classifier,
            projector_kind: cfg.projector_kind,
            embedding_source: cfg.embedding_source,
            embed_dim: cfg.embed_dim,
            tau: cfg.tau,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    /// Online forward on the graph. With `binding`, parameters are tracked
    /// for gradients; in training mode the online running statistics are
    /// updated.
    pub fn online_forward(&mut self, g: &mut Graph, x: Tensor, training: bool, mut binding: Option<&mut Binding>) -> Result<OnlineForward> {
        check_input(g, x, self.input_dim())?;
        let f = self.trunk.forward(g, x, training, binding.as_deref_mut())?;
        self.trunk.absorb_batch_stats(g, &f.bn_nodes);
        let embedding = match self.embedding_source {
            EmbeddingSource::Trunk => g.l2_normalize_rows(f.out)?,
            EmbeddingSource::Projector => {
                let p = self.projector.forward(g, f.out, training, binding)?;
                self.projector.absorb_batch_stats(g, &p.bn_nodes);
                g.l2_normalize_rows(p.out)?
            }
        };
        Ok(OnlineForward { trunk_out: f.out, embedding })
    }

    /// `q(z)`, not re-normalized.
    pub fn predict(&mut self, g: &mut Graph, z: Tensor, training: bool, binding: Option<&mut Binding>) -> Result<Tensor> {
        let p = self.predictor.forward(g, z, training, binding)?;
        self.predictor.absorb_batch_stats(g, &p.bn_nodes);
        Ok(p.out)
    }

    /// Unit-norm target embedding `g_xi(x)`; parameters enter as constants.
    pub fn target_embed(&self, g: &mut Graph, x: Tensor, training: bool) -> Result<Tensor> {
        check_input(g, x, self.input_dim())?;
        let f = self.target_trunk.forward(g, x, training, None)?;
        let p = self.target_projector.forward(g, f.out, training, None)?;
        g.l2_normalize_rows(p.out)
    }

    pub fn classifier_logits(&self, g: &mut Graph, trunk_out: Tensor, binding: Option<&mut Binding>) -> Result<Tensor> {
        let head = self.classifier.as_ref().ok_or_else(|| GrafitError::Config("model has no classification head".into()))?;
        Ok(head.forward(g, trunk_out, true, binding)?.out)
    }

    /// Online parameters that receive gradients.
    pub fn trainable_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.trunk.trainable_mut();
        out.extend(self.projector.trainable_mut());
        out.extend(self.predictor.trainable_mut());
        if let Some(c) = self.classifier.as_mut() {
            out.extend(c.trainable_mut());
        }
        out
    }

    /// `xi <- tau * xi + (1 - tau) * theta` over every target tensor,
    /// running statistics included.
    pub fn ema_update(&mut self) {
        let tau = self.tau;
        let pairs = [(&mut self.target_trunk, &self.trunk), (&mut self.target_projector, &self.projector)];
        for (target, online) in pairs {
            for (t, o) in target.params_mut().into_iter().zip(online.params()) {
                for (tv, ov) in t.values.iter_mut().zip(&o.values) {
                    *tv = tau * *tv + (1.0 - tau) * ov;
                }
            }
        }
    }

    /// `forward_embed` over a feature batch, outside any training graph.
    pub fn forward_embed(&mut self, x: &Matrix, use_target: bool, training: bool) -> Result<Matrix> {
        let mut g = Graph::new();
        let xt = g.constant_matrix(x)?;
        let z =
            if use_target { self.target_embed(&mut g, xt, training)? } else { self.online_forward(&mut g, xt, training, None)?.embedding };
        Ok(g.to_matrix(z))
    }

    pub fn snapshot_test_model(&self) -> TestModel {
        TestModel {
            trunk: self.trunk.clone(),
            projector: self.projector.clone(),
            projector_kind: self.projector_kind,
            embedding_source: self.embedding_source,
            embed_dim: self.embed_dim,
        }
    }

    fn records(&self) -> Vec<Param> {
        let mut out: Vec<Param> = meta_records(self.projector_kind, self.embedding_source, self.embed_dim);
        out.push(Param::new("meta.tau".into(), vec![], vec![self.tau]));
        for mlp in [&self.trunk, &self.projector, &self.predictor, &self.target_trunk, &self.target_projector] {
            out.extend(mlp.params().into_iter().cloned());
        }
        if let Some(c) = &self.classifier {
            out.extend(c.params().into_iter().cloned());
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_records(&self.records())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let records = decode_records(bytes)?;
        let (projector_kind, embedding_source, embed_dim) = decode_meta(&records)?;
        let tau = meta_scalar(&records, "meta.tau")?;
        let mlp = |name: &str| {
            Mlp::from_records(name, &records)?.ok_or_else(|| GrafitError::Format { offset: 0, msg: format!("checkpoint lacks {name}") })
        };
        Ok(Self {
            trunk: mlp("trunk")?,
            projector: mlp("projector")?,
            predictor: mlp("predictor")?,
            target_trunk: mlp("target_trunk")?,
            target_projector: mlp("target_projector")?,
            classifier: Mlp::from_records("classifier", &records)?,
            projector_kind,
            embedding_source,
            embed_dim,
            tau,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn check_input(g: &Graph, x: Tensor, input_dim: usize) -> Result<()> {
    let shape = g.shape(x);
    if shape.len() != 2 || shape[1] != input_dim {
        return Err(GrafitError::Shape { op: "forward_embed", left: shape.to_vec(), right: vec![input_dim] });
    }
    Ok(())
}

/// Test-time model: online trunk and projector only.
#[derive(Debug, Clone, PartialEq)]
pub struct TestModel {
    pub trunk: Mlp,
    pub projector: Mlp,
    pub projector_kind: ProjectorKind,
    pub embedding_source: EmbeddingSource,
    pub embed_dim: usize,
}

impl TestModel {
    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    /// Unit-norm evaluation-mode embeddings.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let xt = g.constant_matrix(x)?;
        check_input(&g, xt, self.input_dim())?;
        let f = self.trunk.forward(&mut g, xt, false, None)?.out;
        let z = match self.embedding_source {
            EmbeddingSource::Trunk => f,
            EmbeddingSource::Projector => self.projector.forward(&mut g, f, false, None)?.out,
        };
        let z = g.l2_normalize_rows(z)?;
        Ok(g.to_matrix(z))
    }

    /// Raw evaluation-mode trunk output `f(x)`.
    pub fn trunk_features(&self, x: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let xt = g.constant_matrix(x)?;
        check_input(&g, xt, self.input_dim())?;
        let f = self.trunk.forward(&mut g, xt, false, None)?.out;
        Ok(g.to_matrix(f))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut records = meta_records(self.projector_kind, self.embedding_source, self.embed_dim);
        for mlp in [&self.trunk, &self.projector] {
            records.extend(mlp.params().into_iter().cloned());
        }
        encode_records(&records)
    }

    /// Accepts snapshots and full checkpoints; training-only records are
    /// ignored.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let records = decode_records(bytes)?;
        let (projector_kind, embedding_source, embed_dim) = decode_meta(&records)?;
        let mlp = |name: &str| {
            Mlp::from_records(name, &records)?.ok_or_else(|| GrafitError::Format { offset: 0, msg: format!("checkpoint lacks {name}") })
        };
        Ok(Self { trunk: mlp("trunk")?, projector: mlp("projector")?, projector_kind, embedding_source, embed_dim })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn meta_records(kind: ProjectorKind, source: EmbeddingSource, embed_dim: usize) -> Vec<Param> {
    let kind = match kind {
        ProjectorKind::Fc => 0.0,
        ProjectorKind::Mlp => 1.0,
    };
    let source = match source {
        EmbeddingSource::Projector => 0.0,
        EmbeddingSource::Trunk => 1.0,
    };
    vec![
        Param::new("meta.projector_kind".into(), vec![], vec![kind]),
        Param::new("meta.embedding_source".into(), vec![], vec![source]),
        Param::new("meta.embed_dim".into(), vec![], vec![embed_dim as f64]),
    ]
}

fn meta_scalar(records: &BTreeMap<String, Param>, name: &str) -> Result<f64> {
    records
        .get(name)
        .and_then(|p| p.values.first().copied())
        .ok_or_else(|| GrafitError::Format { offset: 0, msg: format!("missing {name}") })
}

fn decode_meta(records: &BTreeMap<String, Param>) -> Result<(ProjectorKind, EmbeddingSource, usize)> {
    let kind = if meta_scalar(records, "meta.projector_kind")? == 0.0 { ProjectorKind::Fc } else { ProjectorKind::Mlp };
    let source = if meta_scalar(records, "meta.embedding_source")? == 0.0 { EmbeddingSource::Projector } else { EmbeddingSource::Trunk };
    Ok((kind, source, meta_scalar(records, "meta.embed_dim")? as usize))
}

fn encode_records(records: &[Param]) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    for p in records {
        w.u32(p.name.len() as u32);
        w.bytes(p.name.as_bytes());
        w.u32(p.shape.len() as u32);
        for &d in &p.shape {
            w.u32(d as u32);
        }
        w.f64s(&p.values);
    }
    w.into_inner()
}

fn decode_records(bytes: &[u8]) -> Result<BTreeMap<String, Param>> {
    let mut r = Reader::new(bytes);
    r.expect_magic(CHECKPOINT_MAGIC)?;
    r.expect_version(CHECKPOINT_VERSION)?;
    let mut out = BTreeMap::new();
    while !r.is_at_end() {
        let at = r.offset();
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| GrafitError::Format { offset: at, msg: "parameter name is not UTF-8".into() })?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = r.u32s(rank)?.into_iter().map(|d| d as usize).collect::<Vec<_>>();
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| r.format_error("shape overflow"))?;
        let values = r.f64s(n)?;
        if out.insert(name.clone(), Param::new(name.clone(), shape, values)).is_some() {
            return Err(GrafitError::Format { offset: at, msg: format!("duplicate record {name}") });
        }
    }
    Ok(out)
}
