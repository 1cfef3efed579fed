use std::path::{Path, PathBuf};

use grafit_core::analysis::{mean_std, pca_energy, select_k_loo, separability_run, ProbeConfig};
use grafit_core::classify::{argmax, knn_classify};
use grafit_core::data::{import_csv, synth_gaussian_hierarchy};
use grafit_core::experiment::{evaluate, run_training, run_training_with_callback};
use grafit_core::metrics::{mean_average_precision, top1_accuracy};
use grafit_core::retrieval::{rank_conditional, rank_cosine, rank_oracle, RankingMode, RankingResult};
use grafit_core::trainer::fmt_f64;
use grafit_core::{EmbeddingMemory, EmbeddingStore, GrafitError, HierarchicalDataset, KnnConfig, LabelLevel, Matrix, TestModel};
use rayon::prelude::*;

use crate::args::*;
use crate::config::Invocation;
use crate::manifest::RunManifest;
use crate::output::{flag, write_csv};
use crate::{CliError, CliResult};

/// Bookkeeping for one run directory: inputs are recorded as they are
/// opened, and no artifact may overwrite an input.
struct Run {
    dir: PathBuf,
    manifest: RunManifest,
    inputs: Vec<PathBuf>,
}

impl Run {
    fn start(inv: &Invocation) -> CliResult<Self> {
        let common = inv.cli.command.common();
        std::fs::create_dir_all(&common.out)?;
        Ok(Self {
            dir: common.out.clone(),
            manifest: RunManifest::new(inv.cli.command.name(), common.seed, inv.resolved.clone()),
            inputs: Vec::new(),
        })
    }

    fn input(&mut self, role: &str, path: &Path) -> CliResult<PathBuf> {
        if !path.is_file() {
            return Err(GrafitError::Contract(format!("{role} file {} does not exist", path.display())).into());
        }
        self.manifest.add_input(role, path, &self.dir)?;
        self.inputs.push(std::fs::canonicalize(path)?);
        Ok(path.to_path_buf())
    }

    /// Path for a new artifact named `name` inside the run directory.
    fn artifact(&self, name: &str) -> CliResult<PathBuf> {
        let path = self.dir.join(name);
        if let Ok(canonical) = std::fs::canonicalize(&path) {
            if self.inputs.contains(&canonical) {
                return Err(GrafitError::Contract(format!("refusing to overwrite input {}", path.display())).into());
            }
        }
        Ok(path)
    }

    fn record(&mut self, role: &str, path: &Path) -> CliResult<()> {
        self.manifest.add_artifact(role, path, &self.dir)
    }

    fn finish(self) -> CliResult<()> {
        self.manifest.write(&self.dir)
    }
}

pub fn execute(inv: &Invocation) -> CliResult<()> {
    match &inv.cli.command {
        Command::GenData(a) => gen_data(inv, a),
        Command::Train(a) => train(inv, a),
        Command::EvalKnn(a) => eval_knn(inv, a),
        Command::EvalMap(a) => eval_map(inv, a),
        Command::Retrieve(a) => retrieve(inv, a),
        Command::AnalyzePca(a) => analyze_pca(inv, a),
        Command::Separability(a) => separability(inv, a),
        Command::SweepLambda(a) => sweep_lambda(inv, a),
    }
}

fn gen_data(inv: &Invocation, a: &GenDataArgs) -> CliResult<()> {
    let mut run = Run::start(inv)?;
    let ds = match &a.from_csv {
        Some(csv) => import_csv(&run.input("csv", csv)?, a.common.seed)?,
        None => synth_gaussian_hierarchy(&a.synth_config())?,
    };
    let path = run.artifact("dataset.gdat")?;
    ds.save(&path)?;
    run.record("dataset", &path)?;
    println!("dataset: {} samples, {} coarse, {} fine, dim {}", ds.len(), ds.num_coarse(), ds.num_fine(), ds.dim());
    run.finish()
}

fn train(inv: &Invocation, a: &TrainArgs) -> CliResult<()> {
    let mut run = Run::start(inv)?;
    let ds = HierarchicalDataset::load(&run.input("dataset", &a.training.dataset)?)?;
    let mut cfg = a.training.train_config(a.common.seed, a.lambda);
    cfg.snapshot_every = a.snapshot_every;
    let mut snapshots = Vec::new();
    let trained = run_training_with_callback(&ds, &cfg, a.training.mode, |epoch, bundle| {
        let path = run.dir.join(format!("snapshot_epoch{epoch:04}.gfit"));
        bundle.save(&path)?;
        snapshots.push((epoch, path));
        Ok(())
    })?;
    for (epoch, path) in &snapshots {
        run.record(&format!("snapshot_epoch{epoch:04}"), path)?;
    }
    let ckpt = run.artifact("checkpoint.gfit")?;
    trained.bundle.save(&ckpt)?;
    run.record("checkpoint", &ckpt)?;
    let store = run.artifact("memory.gemb")?;
    trained.memory.to_store().save(&store)?;
    run.record("embedding_store", &store)?;
    let log = run.artifact("train_log.csv")?;
    std::fs::write(&log, trained.log.to_csv())?;
    run.record("train_log", &log)?;
    if let Some(last) = trained.log.entries.last() {
        println!("trained {} steps; final loss {}", trained.log.len(), fmt_f64(last.loss_total));
    }
    run.finish()
}

/// Query embeddings and whatever labels came with them.
struct QuerySet {
    embeddings: Matrix,
    coarse: Option<Vec<u32>>,
    fine: Option<Vec<u32>>,
}

impl QuerySet {
    fn labels(&self, level: LabelLevel) -> Option<&[u32]> {
        match level {
            LabelLevel::Coarse => self.coarse.as_deref(),
            LabelLevel::Fine => self.fine.as_deref(),
        }
    }

    fn require(&self, level: LabelLevel, why: &str) -> CliResult<&[u32]> {
        self.labels(level)
            .ok_or_else(|| CliError::Usage(format!("{why} needs {} query labels, which the query store lacks", level.as_str())))
    }
}

fn load_sources(run: &mut Run, s: &SourceOptions) -> CliResult<(EmbeddingMemory, QuerySet)> {
    let model = match &s.checkpoint {
        Some(p) => Some(TestModel::load(&run.input("checkpoint", p)?)?),
        None => None,
    };
    let dataset = match &s.dataset {
        Some(p) => Some(HierarchicalDataset::load(&run.input("dataset", p)?)?),
        None => None,
    };
    let memory = match (&s.store, &model, &dataset) {
        (Some(p), _, _) => EmbeddingMemory::from_store(EmbeddingStore::load(&run.input("store", p)?)?)?,
        (None, Some(m), Some(ds)) => {
            let train = ds.train();
            EmbeddingMemory::init(m, &train.features, train.coarse_labels.clone(), Some(train.fine_labels.clone()))?
        }
        _ => return Err(CliError::Usage("a memory needs --store, or --checkpoint together with --dataset".into())),
    };
    let queries = match (&s.query_store, &model, &dataset) {
        (Some(p), _, _) => {
            let store = EmbeddingStore::load(&run.input("query_store", p)?)?;
            let coarse = store.level(LabelLevel::Coarse).map(<[u32]>::to_vec);
            let fine = store.level(LabelLevel::Fine).map(<[u32]>::to_vec);
            QuerySet { embeddings: store.rows, coarse, fine }
        }
        (None, Some(m), Some(ds)) => {
            let test = ds.test();
            QuerySet { embeddings: m.embed(&test.features)?, coarse: Some(test.coarse_labels), fine: Some(test.fine_labels) }
        }
        _ => return Err(CliError::Usage("queries need --query-store, or --checkpoint together with --dataset".into())),
    };
    if queries.embeddings.cols() != memory.dim() {
        return Err(GrafitError::Shape {
            op: "queries vs memory",
            left: vec![queries.embeddings.rows(), queries.embeddings.cols()],
            right: vec![memory.len(), memory.dim()],
        }
        .into());
    }
    Ok((memory, queries))
}

/// kNN settings with `k` fixed by the flag or picked by leave-one-out
/// accuracy over the memory at `level`.
fn knn_config(opts: &KnnOptions, memory: &EmbeddingMemory, level: LabelLevel) -> CliResult<KnnConfig> {
    let mut cfg = base_knn(opts);
    if opts.k.is_none() {
        cfg.k = select_k_loo(memory, level, &cfg)?;
    }
    Ok(cfg)
}

fn base_knn(opts: &KnnOptions) -> KnnConfig {
    KnnConfig { k: opts.k.unwrap_or(KnnConfig::default().k), sigma: opts.sigma, k_grid: opts.k_grid.clone() }
}

fn rank_all(
    memory: &EmbeddingMemory,
    queries: &QuerySet,
    mode: RankingMode,
    knn: &KnnConfig,
    epsilon: f64,
) -> CliResult<Vec<RankingResult>> {
    let coarse = match mode {
        RankingMode::Oracle => Some(queries.require(LabelLevel::Coarse, "oracle ranking")?),
        _ => None,
    };
    let rankings = (0..queries.embeddings.rows())
        .into_par_iter()
        .map(|i| {
            let q = queries.embeddings.row(i);
            let r = match mode {
                RankingMode::Cosine => rank_cosine(q, memory, None),
                RankingMode::Conditional => {
                    let post = knn_classify(q, memory, LabelLevel::Coarse, knn, None)?;
                    rank_conditional(q, memory, &post, epsilon, None)
                }
                RankingMode::Oracle => rank_oracle(q, coarse.expect("checked above")[i], memory, None),
            }?;
            Ok(r.with_query_id(i))
        })
        .collect::<grafit_core::Result<Vec<_>>>()?;
    Ok(rankings)
}

fn eval_knn(inv: &Invocation, a: &EvalKnnArgs) -> CliResult<()> {
    let mut run = Run::start(inv)?;
    let (memory, queries) = load_sources(&mut run, &a.source)?;
    let mut rows = Vec::new();
    for &level in &a.level {
        let truths = queries.require(level, "kNN evaluation")?;
        let cfg = knn_config(&a.knn, &memory, level)?;
        let preds = (0..queries.embeddings.rows())
            .into_par_iter()
            .map(|i| {
                let post = knn_classify(queries.embeddings.row(i), &memory, level, &cfg, None)?;
                Ok(argmax(&post).expect("k >= 1 gives a nonempty posterior"))
            })
            .collect::<grafit_core::Result<Vec<u32>>>()?;
        let acc = top1_accuracy(&preds, truths)?;
        println!("{} top-1 {:.4} (k = {})", level.as_str(), acc, cfg.k);
        rows.push(vec![level.as_str().into(), cfg.k.to_string(), fmt_f64(cfg.sigma), fmt_f64(acc)]);
    }
    let path = run.artifact("eval_knn.csv")?;
    write_csv(&path, &["label_level", "k", "sigma", "accuracy"], rows)?;
    run.record("eval_knn", &path)?;
    run.finish()
}

fn eval_map(inv: &Invocation, a: &EvalMapArgs) -> CliResult<()> {
    let mut run = Run::start(inv)?;
    let (memory, queries) = load_sources(&mut run, &a.source)?;
    let query_fine = queries.require(LabelLevel::Fine, "retrieval mAP")?;
    let memory_fine = memory.labels(LabelLevel::Fine)?;
    if a.mode.contains(&RankingMode::Oracle) {
        queries.require(LabelLevel::Coarse, "oracle ranking")?;
    }
    let knn = knn_config(&a.knn, &memory, LabelLevel::Coarse)?;
    let mut rows = Vec::new();
    for &mode in &a.mode {
        let rankings = rank_all(&memory, &queries, mode, &knn, a.epsilon)?;
        let report = mean_average_precision(&rankings, query_fine, memory_fine)?;
        println!("{} mAP {:.4}", mode.as_str(), report.value);
        rows.push(vec![
            report.level.as_str().into(),
            mode.as_str().into(),
            fmt_f64(report.value),
            report.num_queries.to_string(),
            report.num_skipped.to_string(),
        ]);
    }
    let path = run.artifact("eval_map.csv")?;
    write_csv(&path, &["level", "mode", "mAP", "num_queries", "num_skipped"], rows)?;
    run.record("eval_map", &path)?;
    run.finish()
}

fn retrieve(inv: &Invocation, a: &RetrieveArgs) -> CliResult<()> {
    let mut run = Run::start(inv)?;
    let (memory, queries) = load_sources(&mut run, &a.source)?;
    let knn = knn_config(&a.knn, &memory, LabelLevel::Coarse)?;
    let rankings = rank_all(&memory, &queries, a.mode, &knn, a.epsilon)?;
    let memory_fine = memory.fine_labels();
    let keep = if a.top == 0 { memory.len() } else { a.top };
    let mut rows = Vec::new();
    for r in &rankings {
        let q = r.query_id;
        for (rank, &(j, score)) in r.entries.iter().take(keep).enumerate() {
            let coarse_match = queries.coarse.as_ref().map(|c| flag(c[q] == memory.coarse_labels()[j]));
            let fine_match = match (&queries.fine, memory_fine) {
                (Some(f), Some(mf)) => Some(flag(f[q] == mf[j])),
                _ => None,
            };
            rows.push(vec![
                q.to_string(),
                (rank + 1).to_string(),
                j.to_string(),
                fmt_f64(score),
                coarse_match.unwrap_or_default(),
                fine_match.unwrap_or_default(),
            ]);
        }
    }
    let path = run.artifact("rankings.csv")?;
    write_csv(&path, &["query_id", "rank", "memory_index", "score", "coarse_match", "fine_match"], rows)?;
    run.record("rankings", &path)?;
    println!("ranked {} queries ({} mode)", rankings.len(), a.mode.as_str());
    run.finish()
}

fn analyze_pca(inv: &Invocation, a: &AnalyzePcaArgs) -> CliResult<()> {
    let mut run = Run::start(inv)?;
    let rows = match (&a.store, &a.checkpoint, &a.dataset) {
        (Some(p), _, _) => EmbeddingStore::load(&run.input("store", p)?)?.rows,
        (None, Some(c), Some(d)) => {
            let model = TestModel::load(&run.input("checkpoint", c)?)?;
            let ds = HierarchicalDataset::load(&run.input("dataset", d)?)?;
            model.embed(&ds.train().features)?
        }
        _ => return Err(CliError::Usage("analyze-pca needs --store, or --checkpoint with --dataset".into())),
    };
    let curve = pca_energy(&rows)?;
    let path = run.artifact("pca.csv")?;
    // component_index is 1-based: row i holds the energy of the top i components
    let table = curve
        .eigenvalues
        .iter()
        .zip(&curve.cumulative_energy)
        .enumerate()
        .map(|(i, (&ev, &ce))| vec![(i + 1).to_string(), fmt_f64(ev), fmt_f64(ce)]);
    write_csv(&path, &["component_index", "eigenvalue", "cumulative_energy"], table)?;
    run.record("pca", &path)?;
    println!("pca over {} rows of dimension {}", rows.rows(), curve.dim);
    run.finish()
}

fn separability(inv: &Invocation, a: &SeparabilityArgs) -> CliResult<()> {
    let mut run = Run::start(inv)?;
    let model = TestModel::load(&run.input("checkpoint", &a.checkpoint)?)?;
    let ds = HierarchicalDataset::load(&run.input("dataset", &a.dataset)?)?;
    let knn = match a.knn.k {
        Some(_) => base_knn(&a.knn),
        None => {
            let train = ds.train();
            let memory = EmbeddingMemory::init(&model, &train.features, train.coarse_labels.clone(), None)?;
            knn_config(&a.knn, &memory, LabelLevel::Coarse)?
        }
    };
    let probe = ProbeConfig {
        epochs: a.probe_epochs,
        lr: a.probe_lr,
        batch_size: a.probe_batch_size,
        seed: a.common.seed,
        ..ProbeConfig::default()
    };
    let report = separability_run(&model, &ds, a.trials, &probe, &knn)?;
    let path = run.artifact("separability.csv")?;
    let rows =
        report.trials.iter().enumerate().map(|(t, r)| vec![t.to_string(), fmt_f64(r.accuracy_plain), fmt_f64(r.accuracy_conditioned)]);
    write_csv(&path, &["trial", "accuracy_plain", "accuracy_conditioned"], rows)?;
    run.record("separability", &path)?;
    println!(
        "plain {:.4} ± {:.4}, conditioned {:.4} ± {:.4} (sample std over {} trials)",
        report.mean_plain,
        report.std_plain,
        report.mean_conditioned,
        report.std_conditioned,
        report.trials.len()
    );
    run.finish()
}

fn sweep_lambda(inv: &Invocation, a: &SweepLambdaArgs) -> CliResult<()> {
    let mut run = Run::start(inv)?;
    let ds = HierarchicalDataset::load(&run.input("dataset", &a.training.dataset)?)?;
    if a.grid.is_empty() {
        return Err(CliError::Usage("--grid needs at least one value".into()));
    }
    let mut rows = Vec::new();
    let mut maps = Vec::new();
    for &lambda in &a.grid {
        let cfg = a.training.train_config(a.common.seed, lambda);
        let trained = run_training(&ds, &cfg, a.training.mode)?;
        let knn = knn_config(&a.knn, &trained.memory, LabelLevel::Fine)?;
        let ev = evaluate(&trained.test_model, &trained.memory, &ds, &knn)?;
        println!("lambda {lambda}: mAP {:.4}, fine top-1 {:.4}", ev.map_cosine, ev.top1_fine);
        maps.push(ev.map_cosine);
        rows.push(vec![
            fmt_f64(lambda),
            fmt_f64(ev.map_cosine),
            fmt_f64(ev.map_conditional),
            fmt_f64(ev.map_oracle),
            fmt_f64(ev.top1_fine),
            fmt_f64(ev.top1_coarse),
        ]);
    }
    let (mean, std) = mean_std(&maps);
    println!("mAP across the grid: {mean:.4} ± {std:.4}");
    let path = run.artifact("sweep_lambda.csv")?;
    write_csv(&path, &["lambda", "map_cosine", "map_conditional", "map_oracle", "top1_fine", "top1_coarse"], rows)?;
    run.record("sweep_lambda", &path)?;
    run.finish()
}
