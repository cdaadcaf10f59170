//! The subcommands. Each one has a fully validated `RunConfig` by the time
//! it runs, checks its own inputs, and only then writes.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use neuralkit::init::seeded_rng;
use serde::Serialize;
use thiserror::Error;

use voxscreen::checkpoint::Checkpoint;
use voxscreen::clustering::{extract_features, kmeans, ClusterReport};
use voxscreen::corpus::{load_manifest, make_folds, Corpus, FoldPlan, IndexedSpeaker};
use voxscreen::evaluation::{
    aggregate_folds, evaluate, pr_curve, pr_curve_csv, render_report, roc_curve, roc_curve_csv, MetricsReport,
    SeverityRow,
};
use voxscreen::experiments::{
    config_hash, grid_search, rank_configs, CellOutcome, CellRecord, CellStore, ResultTable, TrainingRunner,
};
use voxscreen::synth::synth_corpus;
use voxscreen::training::{derive_seed, score_speakers, train_with_progress};

use crate::config::{ConfigError, RunConfig};

/// Stream tags for seeds the CLI derives itself.
const EVAL_STREAM: u64 = 0xE7A1;
const CLUSTER_STREAM: u64 = 0xC1A5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Domain(String),
}

fn domain(e: impl Display) -> CliError {
    CliError::Domain(e.to_string())
}

fn flag_error(flag: &str, msg: impl ToString) -> CliError {
    ConfigError::Invalid { key: flag.to_string(), msg: msg.to_string() }.into()
}

/// Provenance written next to a command's outputs. Deterministic: wall
/// clock times go to `run.log` only.
#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: String,
    seed: u64,
    derived_seeds: BTreeMap<&'static str, u64>,
    corpus_fingerprint: Option<String>,
    outputs: Vec<String>,
}

/// Collects the files a command writes under one directory.
struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn create(dir: PathBuf) -> Result<Self, CliError> {
        fs::create_dir_all(&dir).map_err(|e| domain(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self { dir, written: Vec::new() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| domain(format!("cannot write {}: {e}", path.display())))?;
        self.note(name);
        Ok(())
    }

    /// Records a file some library call wrote.
    fn note(&mut self, name: &str) {
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
    }

    fn finish(
        mut self,
        command: &str,
        cfg: &RunConfig,
        derived_seeds: BTreeMap<&'static str, u64>,
        corpus_fingerprint: Option<String>,
    ) -> Result<(), CliError> {
        self.written.sort();
        let manifest = RunManifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            derived_seeds,
            corpus_fingerprint,
            outputs: self.written.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        self.write(&format!("{command}.manifest.json"), text + "\n")?;
        log_line(&self.dir, &format!("{command} finished, config {}", cfg.hash()));
        Ok(())
    }
}

/// Appends a timestamped line to the `run.log` sidecar; failures to log
/// never fail a run.
fn log_line(dir: &Path, msg: &str) {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(dir.join("run.log")) {
        let _ = writeln!(f, "{secs} {msg}");
    }
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus, CliError> {
    let records = load_manifest(cfg.manifest()?).map_err(domain)?;
    match &cfg.paths.cache_dir {
        Some(dir) if dir.is_dir() => Corpus::from_cache(&records, dir, cfg.frame.frame_rate()).map_err(domain),
        _ => Corpus::index(&records, &cfg.frame).map_err(domain),
    }
}

fn fold_plan(cfg: &RunConfig, corpus: &Corpus) -> Result<FoldPlan, CliError> {
    make_folds(&corpus.records(), cfg.folds, cfg.seed).map_err(domain)
}

fn fold_speakers<'a>(corpus: &'a Corpus, plan: &FoldPlan, fold: usize) -> Vec<&'a IndexedSpeaker> {
    corpus.usable().filter(|s| plan.fold_of(s.speaker_id()) == Some(fold)).collect()
}

fn seeds(pairs: &[(&'static str, u64)]) -> BTreeMap<&'static str, u64> {
    pairs.iter().copied().collect()
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let mut out = Outputs::create(cfg.output_dir())?;
    log_line(&out.dir, "synth started");
    let corpus = synth_corpus(&cfg.synth, &out.dir).map_err(domain)?;
    out.note("manifest.csv");
    for r in &corpus.records {
        for p in &r.audio_paths {
            if let Ok(rel) = p.strip_prefix(&out.dir) {
                out.note(&rel.to_string_lossy());
            }
        }
    }
    let depressed = corpus.records.iter().filter(|r| r.label == 1).count();
    println!("wrote {} speakers ({depressed} depressed) to {}", corpus.records.len(), corpus.manifest.display());
    out.finish("synth", cfg, seeds(&[("synth", cfg.synth.seed)]), None)
}

pub fn featurize(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = cfg
        .paths
        .cache_dir
        .clone()
        .ok_or_else(|| flag_error("paths.cache_dir", "required by featurize"))?;
    let records = load_manifest(cfg.manifest()?).map_err(domain)?;
    let corpus = Corpus::index(&records, &cfg.frame).map_err(domain)?;
    let mut out = Outputs::create(dir)?;
    log_line(&out.dir, "featurize started");
    let files = corpus.write_cache(&out.dir).map_err(domain)?;
    for s in &corpus.speakers {
        for r in &s.recordings {
            let stem = r.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            out.note(&format!("{}/{stem}.frag", s.speaker_id()));
        }
    }
    println!("wrote {files} fragment caches to {}", out.dir.display());
    out.finish("featurize", cfg, BTreeMap::new(), Some(corpus.fingerprint()))
}

pub fn train(cfg: &RunConfig, fold: Option<usize>) -> Result<(), CliError> {
    if let Some(f) = fold {
        if f >= cfg.folds {
            return Err(flag_error("--fold", format!("{f} is out of range for {} folds", cfg.folds)));
        }
    }
    let corpus = load_corpus(cfg)?;
    let plan = fold_plan(cfg, &corpus)?;
    let folds: Vec<usize> = fold.map_or_else(|| (0..cfg.folds).collect(), |f| vec![f]);
    let mut out = Outputs::create(cfg.output_dir())?;
    log_line(&out.dir, "train started");
    out.write("folds.json", plan.to_json() + "\n")?;

    let tag = cfg.model.tag();
    let mut reports = Vec::new();
    for &f in &folds {
        let outcome = train_with_progress(&cfg.model, &corpus, &plan, f, &cfg.train, |e| {
            eprintln!(
                "fold {f} epoch {:>3}  loss {:.5}  val pr-auc {:.4}  best {:.4}",
                e.epoch, e.train_loss, e.val_pr_auc, e.best_so_far
            );
        })
        .map_err(domain)?;
        let stem = format!("{tag}-fold{f}");
        outcome.checkpoint.save(out.path(&format!("{stem}.ckpt"))).map_err(domain)?;
        out.note(&format!("{stem}.ckpt"));
        out.write(&format!("{stem}-history.csv"), outcome.history.to_csv())?;
        let report = evaluate(&outcome.val_scores, Some(f)).map_err(domain)?;
        out.write(&format!("{stem}-metrics.json"), to_json(&report))?;
        print!("{}", render_report(&report));
        println!("best epoch {}", outcome.checkpoint.meta.epoch);
        reports.push(report);
    }
    if reports.len() > 1 {
        let agg = aggregate_folds(&reports).map_err(domain)?;
        println!("PR-AUC over {} folds: {}", agg.folds, agg.pr_auc.percent());
        out.write(&format!("{tag}-summary.json"), to_json(&agg))?;
    }
    out.finish("train", cfg, seeds(&[("fold_plan", plan.seed), ("train", cfg.train.seed)]), Some(corpus.fingerprint()))
}

fn to_json(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}

pub fn grid(cfg: &RunConfig, jobs: usize, keep_checkpoints: bool) -> Result<(), CliError> {
    if jobs == 0 {
        return Err(flag_error("--jobs", "must be at least 1"));
    }
    let spec = cfg.grid_spec();
    let corpus = load_corpus(cfg)?;
    let plan = fold_plan(cfg, &corpus)?;
    let mut out = Outputs::create(cfg.output_dir())?;
    log_line(&out.dir, &format!("grid started, {jobs} job(s)"));
    out.write("folds.json", plan.to_json() + "\n")?;

    let journal = out.path("cells.jsonl");
    let mut store = CellStore::open(&journal).map_err(domain)?;
    let runner = TrainingRunner {
        corpus: &corpus,
        plan: &plan,
        checkpoint_dir: keep_checkpoints.then(|| out.path("checkpoints")),
    };
    let table = grid_search(&spec, cfg.folds, &runner, &mut store, jobs, |r| match &r.outcome {
        CellOutcome::Done(m) => eprintln!(
            "{}/k{}/N{} fold {}: pr-auc {:.4} (best epoch {})",
            r.encoder, r.kernel_size, r.sample_size, r.key.fold, m.pr_auc, m.best_epoch
        ),
        CellOutcome::Failed(e) => {
            eprintln!("{}/k{}/N{} fold {}: failed: {e}", r.encoder, r.kernel_size, r.sample_size, r.key.fold)
        }
    })
    .map_err(domain)?;
    drop(store);
    rewrite_journal(&journal, cfg)?;
    out.note("cells.jsonl");
    if keep_checkpoints {
        for c in spec.configs() {
            for f in 0..cfg.folds {
                let name = format!("checkpoints/{}-fold{f}.ckpt", c.tag());
                if out.path(&name).exists() {
                    out.note(&name);
                }
            }
        }
    }

    out.write("table_s1.csv", table.aggregate_csv())?;
    out.write("table_s1_folds.csv", table.fold_csv())?;
    out.write("table_s1.txt", table.render())?;
    let top = ResultTable { rows: rank_configs(&table, 5) };
    out.write("top5.txt", top.render())?;
    print!("{}", top.render());

    let failed: usize = table.rows.iter().map(|r| r.folds.iter().filter(|f| f.is_none()).count()).sum();
    out.finish("grid", cfg, seeds(&[("fold_plan", plan.seed), ("grid", spec.seed)]), Some(corpus.fingerprint()))?;
    if failed > 0 {
        return Err(domain(format!("{failed} grid cell(s) failed; see cells.jsonl")));
    }
    Ok(())
}

/// Rewrites the append-only cell journal in grid order, so its bytes do not
/// depend on which worker finished first.
fn rewrite_journal(path: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.grid_spec();
    let train_cfg = spec.cell_train_config();
    let order: BTreeMap<String, usize> =
        spec.configs().iter().enumerate().map(|(i, c)| (config_hash(c, &train_cfg), i)).collect();
    let store = CellStore::open(path).map_err(domain)?;
    let mut records: Vec<&CellRecord> = store.records().collect();
    records.sort_by_key(|r| {
        (order.get(&r.key.config_hash).copied().unwrap_or(usize::MAX), r.key.config_hash.clone(), r.key.fold, r.key.seed)
    });
    let mut text = String::new();
    for r in records {
        text += &serde_json::to_string(r).expect("records serialize");
        text.push('\n');
    }
    let tmp = path.with_extension("jsonl.tmp");
    fs::write(&tmp, text).and_then(|()| fs::rename(&tmp, path)).map_err(|e| domain(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize)]
struct BestF1 {
    threshold: f64,
    f1: f64,
    precision: f64,
    recall: f64,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    model: String,
    fold: usize,
    repeats: usize,
    n_subjects: usize,
    pr_auc: f64,
    roc_auc: f64,
    best_f1: BestF1,
    severity_rows: Vec<SeverityRow>,
}

impl EvalReport {
    fn new(model: String, fold: usize, repeats: usize, r: MetricsReport) -> Self {
        Self {
            model,
            fold,
            repeats,
            n_subjects: r.n_subjects,
            pr_auc: r.pr_auc,
            roc_auc: r.roc_auc,
            best_f1: BestF1 { threshold: r.best_threshold, f1: r.f1, precision: r.precision, recall: r.recall },
            severity_rows: r.severity_rows,
        }
    }
}

fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<Checkpoint, CliError> {
    if !path.is_file() {
        return Err(flag_error("--checkpoint", format!("{} does not exist", path.display())));
    }
    let ck = Checkpoint::load(path).map_err(domain)?;
    if ck.meta.seed != cfg.seed {
        return Err(flag_error(
            "seed",
            format!("checkpoint was trained with seed {}, so its fold plan differs from seed {}", ck.meta.seed, cfg.seed),
        ));
    }
    Ok(ck)
}

fn check_corpus(ck: &Checkpoint, corpus: &Corpus) -> Result<(), CliError> {
    let fp = corpus.fingerprint();
    if !ck.meta.corpus_fingerprint.is_empty() && ck.meta.corpus_fingerprint != fp {
        return Err(domain(format!(
            "checkpoint was trained on corpus {}, this corpus is {fp}",
            ck.meta.corpus_fingerprint
        )));
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, fold: Option<usize>) -> Result<(), CliError> {
    let ck = load_checkpoint(checkpoint, cfg)?;
    let fold = fold
        .or(ck.meta.fold)
        .ok_or_else(|| flag_error("--fold", "checkpoint records no fold; pass --fold"))?;
    if fold >= cfg.folds {
        return Err(flag_error("--fold", format!("{fold} is out of range for {} folds", cfg.folds)));
    }
    let corpus = load_corpus(cfg)?;
    check_corpus(&ck, &corpus)?;
    let plan = fold_plan(cfg, &corpus)?;
    let speakers = fold_speakers(&corpus, &plan, fold);
    let repeats = cfg.train.eval_repeats;
    let seed = derive_seed(cfg.seed, &[EVAL_STREAM, fold as u64]);
    let scored = score_speakers(&ck.model, speakers, repeats, seed).map_err(domain)?;
    let metrics = evaluate(&scored, Some(fold)).map_err(domain)?;
    let pr = pr_curve(&scored).map_err(domain)?;
    let roc = roc_curve(&scored).map_err(domain)?;

    let mut out = Outputs::create(cfg.output_dir())?;
    log_line(&out.dir, "eval started");
    let tag = ck.config().tag();
    let stem = format!("eval-{tag}-fold{fold}");
    print!("{}", render_report(&metrics));
    out.write(&format!("{stem}.json"), to_json(&EvalReport::new(tag, fold, repeats, metrics)))?;
    out.write(&format!("{stem}-pr.csv"), pr_curve_csv(&pr))?;
    out.write(&format!("{stem}-roc.csv"), roc_curve_csv(&roc))?;
    out.finish("eval", cfg, seeds(&[("fold_plan", plan.seed), ("scoring", seed)]), Some(corpus.fingerprint()))
}

pub fn cluster(cfg: &RunConfig, checkpoint: &Path) -> Result<(), CliError> {
    let ck = load_checkpoint(checkpoint, cfg)?;
    let corpus = load_corpus(cfg)?;
    check_corpus(&ck, &corpus)?;
    let sample_seed = derive_seed(cfg.seed, &[CLUSTER_STREAM]);
    let features = extract_features(&ck.model, corpus.usable(), cfg.cluster.fragments, &mut seeded_rng(sample_seed))
        .map_err(domain)?;
    let km = cfg.kmeans();
    let result = kmeans(&features.as_f64(), features.dim, &km).map_err(domain)?;
    let report = ClusterReport::new(&result, &features.labels, &km).map_err(domain)?;

    let mut out = Outputs::create(cfg.output_dir())?;
    log_line(&out.dir, "cluster started");
    out.write("features.csv", features.to_csv())?;
    out.write("cluster_report.json", report.to_json() + "\n")?;
    print!("{}", report.render());
    out.finish("cluster", cfg, seeds(&[("fragment_sampling", sample_seed), ("kmeans", km.seed)]), Some(corpus.fingerprint()))
}
