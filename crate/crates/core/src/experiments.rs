//! Grid search over encoder type, kernel size and sample size under k-fold
//! cross-validation, with a resumable per-cell store and ranked tables.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, FoldPlan, SAMPLE_SIZES};
use crate::evaluation::mean_se;
use crate::model::{EncoderType, ModelConfig, ModelError, KERNEL_SIZES};
use crate::training::{train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed cell store {path} line {line}: {detail}")]
    CorruptStore { path: String, line: usize, detail: String },
    #[error("malformed result table: {0}")]
    Table(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub sample_sizes: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub encoder_types: Vec<EncoderType>,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            sample_sizes: SAMPLE_SIZES.to_vec(),
            kernel_sizes: KERNEL_SIZES.to_vec(),
            encoder_types: EncoderType::ALL.to_vec(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl GridSpec {
    /// Rejects empty or repeated axes and values outside the searched domain.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidGrid(m));
        fn distinct<T: PartialEq>(v: &[T]) -> bool {
            v.iter().enumerate().all(|(i, x)| !v[..i].contains(x))
        }
        if self.sample_sizes.is_empty() || self.kernel_sizes.is_empty() || self.encoder_types.is_empty() {
            return bad("every grid axis needs at least one value".into());
        }
        if !distinct(&self.sample_sizes) || !distinct(&self.kernel_sizes) || !distinct(&self.encoder_types) {
            return bad("grid axes must not repeat values".into());
        }
        for c in self.configs() {
            c.validate_grid().map_err(|e| ExperimentError::InvalidGrid(e.to_string()))?;
        }
        self.train.validate()?;
        Ok(())
    }

    /// Configurations in table order: sample size, then kernel, then encoder.
    pub fn configs(&self) -> Vec<ModelConfig> {
        let mut out = Vec::new();
        for &n in &self.sample_sizes {
            for &k in &self.kernel_sizes {
                for &e in &self.encoder_types {
                    out.push(ModelConfig::new(e, k, n));
                }
            }
        }
        out
    }

    /// Training config handed to every cell; the grid seed wins.
    pub fn cell_train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }
}

/// Stable hex digest of everything that determines a cell's result apart
/// from fold and seed.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let train = TrainConfig { seed: 0, ..train.clone() };
    let text = serde_json::to_string(&(model, &train)).expect("configs serialize");
    format!("{:08x}", crc32fast::hash(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub config_hash: String,
    pub fold: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub pr_auc: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellOutcome {
    Done(CellMetrics),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub key: CellKey,
    pub encoder: EncoderType,
    pub kernel_size: usize,
    pub sample_size: usize,
    pub outcome: CellOutcome,
}

impl CellRecord {
    pub fn pr_auc(&self) -> Option<f64> {
        match &self.outcome {
            CellOutcome::Done(m) => Some(m.pr_auc),
            CellOutcome::Failed(_) => None,
        }
    }
}

/// Append-only JSON-lines store of finished cells. A line cut short by an
/// interruption is ignored on reload; anything else malformed is an error.
#[derive(Debug)]
pub struct CellStore {
    path: Option<PathBuf>,
    cells: BTreeMap<CellKey, CellRecord>,
}

impl CellStore {
    pub fn in_memory() -> Self {
        Self { path: None, cells: BTreeMap::new() }
    }

    pub fn open(path: impl Into<PathBuf>) -> Result<Self, ExperimentError> {
        let path = path.into();
        let mut cells = BTreeMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(io_err(&path))?;
            let lines: Vec<String> =
                BufReader::new(file).lines().collect::<Result<_, _>>().map_err(io_err(&path))?;
            let last = lines.len();
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CellRecord>(line) {
                    Ok(r) => {
                        cells.insert(r.key.clone(), r);
                    }
                    Err(_) if i + 1 == last => {}
                    Err(e) => {
                        return Err(ExperimentError::CorruptStore {
                            path: path.display().to_string(),
                            line: i + 1,
                            detail: e.to_string(),
                        })
                    }
                }
            }
        }
        Ok(Self { path: Some(path), cells })
    }

    pub fn get(&self, key: &CellKey) -> Option<&CellRecord> {
        self.cells.get(key)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &CellRecord> {
        self.cells.values()
    }

    pub fn insert(&mut self, record: CellRecord) -> Result<(), ExperimentError> {
        if let Some(path) = &self.path {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
            let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
            let mut line = serde_json::to_string(&record).expect("records serialize");
            line.push('\n');
            file.write_all(line.as_bytes()).map_err(io_err(path))?;
        }
        self.cells.insert(record.key.clone(), record);
        Ok(())
    }
}

/// Trains and scores one configuration on one fold.
pub trait CellRunner: Sync {
    fn run(&self, config: &ModelConfig, fold: usize, train: &TrainConfig) -> Result<CellMetrics, String>;
}

/// Runs real training on an indexed corpus; best validation PR-AUC is the
/// cell's score.
pub struct TrainingRunner<'a> {
    pub corpus: &'a Corpus,
    pub plan: &'a FoldPlan,
    /// When set, each cell's best checkpoint is written as
    /// `<dir>/<tag>-fold<f>.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
}

impl CellRunner for TrainingRunner<'_> {
    fn run(&self, config: &ModelConfig, fold: usize, train_cfg: &TrainConfig) -> Result<CellMetrics, String> {
        let out = train(config, self.corpus, self.plan, fold, train_cfg).map_err(|e| e.to_string())?;
        if let Some(dir) = &self.checkpoint_dir {
            fs::create_dir_all(dir).map_err(|e| e.to_string())?;
            out.checkpoint
                .save(dir.join(format!("{}-fold{fold}.ckpt", config.tag())))
                .map_err(|e| e.to_string())?;
        }
        let best = out.history.best().ok_or("training ran no epochs")?;
        Ok(CellMetrics { pr_auc: best.val_pr_auc, best_epoch: best.epoch, epochs_run: out.history.epochs.len() })
    }
}

/// Runs every (config, fold) cell not already in `store`, `jobs` at a time,
/// and aggregates the store into a table. Cell failures are recorded and
/// the search continues.
pub fn grid_search(
    spec: &GridSpec,
    folds: usize,
    runner: &dyn CellRunner,
    store: &mut CellStore,
    jobs: usize,
    mut on_cell: impl FnMut(&CellRecord) + Send,
) -> Result<ResultTable, ExperimentError> {
    spec.validate()?;
    if folds == 0 {
        return Err(ExperimentError::InvalidGrid("need at least one fold".into()));
    }
    let train_cfg = spec.cell_train_config();
    let mut pending = Vec::new();
    for config in spec.configs() {
        let hash = config_hash(&config, &train_cfg);
        for fold in 0..folds {
            let key = CellKey { config_hash: hash.clone(), fold, seed: spec.seed };
            if store.get(&key).is_none() {
                pending.push((config.clone(), key));
            }
        }
    }

    let next = AtomicUsize::new(0);
    let shared = Mutex::new((store, Ok::<(), ExperimentError>(()), &mut on_cell));
    let work = || loop {
        let i = next.fetch_add(1, AtomicOrdering::SeqCst);
        let Some((config, key)) = pending.get(i) else { break };
        let outcome = match runner.run(config, key.fold, &train_cfg) {
            Ok(m) => CellOutcome::Done(m),
            Err(e) => CellOutcome::Failed(e),
        };
        let record = CellRecord {
            key: key.clone(),
            encoder: config.encoder_type,
            kernel_size: config.kernel_size,
            sample_size: config.n_fragments,
            outcome,
        };
        let mut guard = shared.lock().expect("no worker panicked");
        let (store, status, on_cell) = &mut *guard;
        if status.is_err() {
            break;
        }
        match store.insert(record.clone()) {
            Ok(()) => on_cell(&record),
            Err(e) => *status = Err(e),
        }
    };
    if jobs <= 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(work);
            }
        });
    }
    let (store, status, _) = shared.into_inner().expect("no worker panicked");
    status?;
    Ok(ResultTable::from_store(spec, folds, store))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub sample_size: usize,
    pub kernel_size: usize,
    pub encoder: EncoderType,
    /// `None` when every fold failed.
    pub pr_auc_mean: Option<f64>,
    /// `None` with fewer than two successful folds.
    pub pr_auc_stderr: Option<f64>,
    /// Indexed by fold; `None` for failed or missing cells.
    pub folds: Vec<Option<f64>>,
}

impl ResultRow {
    fn from_folds(config: &ModelConfig, folds: Vec<Option<f64>>) -> Self {
        let ok: Vec<f64> = folds.iter().flatten().copied().collect();
        let (mean, stderr) = match mean_se(&ok) {
            Ok(m) => (Some(m.mean), Some(m.stderr)),
            Err(_) => (ok.first().copied(), None),
        };
        Self {
            sample_size: config.n_fragments,
            kernel_size: config.kernel_size,
            encoder: config.encoder_type,
            pr_auc_mean: mean,
            pr_auc_stderr: stderr,
            folds,
        }
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig::new(self.encoder, self.kernel_size, self.sample_size)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(s: &str) -> Result<Option<f64>, ExperimentError> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| ExperimentError::Table(format!("not a number: `{s}`")))
}

impl ResultTable {
    /// One row per grid configuration, in grid order.
    pub fn from_store(spec: &GridSpec, folds: usize, store: &CellStore) -> Self {
        let train_cfg = spec.cell_train_config();
        let rows = spec
            .configs()
            .iter()
            .map(|config| {
                let hash = config_hash(config, &train_cfg);
                let values = (0..folds)
                    .map(|fold| {
                        store.get(&CellKey { config_hash: hash.clone(), fold, seed: spec.seed }).and_then(CellRecord::pr_auc)
                    })
                    .collect();
                ResultRow::from_folds(config, values)
            })
            .collect();
        Self { rows }
    }

    /// `sample_size,kernel_size,encoder,fold,pr_auc`, successful cells only.
    pub fn fold_csv(&self) -> String {
        let mut out = String::from("sample_size,kernel_size,encoder,fold,pr_auc\n");
        for r in &self.rows {
            for (fold, v) in r.folds.iter().enumerate() {
                if let Some(v) = v {
                    out.push_str(&format!("{},{},{},{fold},{v}\n", r.sample_size, r.kernel_size, r.encoder));
                }
            }
        }
        out
    }

    /// `sample_size,kernel_size,encoder,pr_auc_mean,pr_auc_stderr,folds_ok`.
    pub fn aggregate_csv(&self) -> String {
        let mut out = String::from("sample_size,kernel_size,encoder,pr_auc_mean,pr_auc_stderr,folds_ok\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.sample_size,
                r.kernel_size,
                r.encoder,
                fmt_opt(r.pr_auc_mean),
                fmt_opt(r.pr_auc_stderr),
                r.folds.iter().flatten().count()
            ));
        }
        out
    }

    /// Reads the aggregated layout; `pr_auc_stderr` and `folds_ok` may be
    /// blank or absent.
    pub fn from_aggregate_csv(text: &str) -> Result<Self, ExperimentError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| ExperimentError::Table(e.to_string()))?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let need = |name: &str| col(name).ok_or_else(|| ExperimentError::Table(format!("missing column `{name}`")));
        let (n_col, k_col, e_col, m_col) =
            (need("sample_size")?, need("kernel_size")?, need("encoder")?, need("pr_auc_mean")?);
        let s_col = col("pr_auc_stderr");
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| ExperimentError::Table(e.to_string()))?;
            let int = |i: usize| {
                rec[i].parse::<usize>().map_err(|_| ExperimentError::Table(format!("not an integer: `{}`", &rec[i])))
            };
            rows.push(ResultRow {
                sample_size: int(n_col)?,
                kernel_size: int(k_col)?,
                encoder: rec[e_col].parse().map_err(ExperimentError::Table)?,
                pr_auc_mean: parse_opt(&rec[m_col])?,
                pr_auc_stderr: match s_col {
                    Some(i) => parse_opt(&rec[i])?,
                    None => None,
                },
                folds: Vec::new(),
            });
        }
        Ok(Self { rows })
    }

    /// Text layout with the usual column order; values shown as percent.
    pub fn render(&self) -> String {
        let mut out = format!("{:<12} {:<12} {:<14} {}\n", "Sample Size", "Kernel Size", "Encoder Type", "PR-AUC");
        for r in &self.rows {
            let value = match (r.pr_auc_mean, r.pr_auc_stderr) {
                (Some(m), Some(s)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s),
                (Some(m), None) => format!("{:.2}", 100.0 * m),
                (None, _) => "failed".to_string(),
            };
            out.push_str(&format!("{:<12} {:<12} {:<14} {value}\n", r.sample_size, r.kernel_size, r.encoder.to_string()));
        }
        out
    }
}

/// Orders rows by mean PR-AUC (descending), then standard error
/// (ascending), then config tag. Missing values sort last.
pub fn rank_configs(table: &ResultTable, top_n: usize) -> Vec<ResultRow> {
    fn desc(a: Option<f64>, b: Option<f64>) -> Ordering {
        match (a, b) {
            (Some(x), Some(y)) => y.total_cmp(&x),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        }
    }
    fn asc(a: Option<f64>, b: Option<f64>) -> Ordering {
        match (a, b) {
            (Some(x), Some(y)) => x.total_cmp(&y),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        }
    }
    let mut rows = table.rows.clone();
    rows.sort_by(|a, b| {
        desc(a.pr_auc_mean, b.pr_auc_mean)
            .then_with(|| asc(a.pr_auc_stderr, b.pr_auc_stderr))
            .then_with(|| a.config().tag().cmp(&b.config().tag()))
    });
    rows.truncate(top_n);
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    /// Deterministic stand-in: score depends only on the config and fold.
    struct FakeRunner {
        calls: AtomicUsize,
        fail_tag: Option<String>,
    }

    impl FakeRunner {
        fn new() -> Self {
            Self { calls: AtomicUsize::new(0), fail_tag: None }
        }
    }

    impl CellRunner for FakeRunner {
        fn run(&self, c: &ModelConfig, fold: usize, _: &TrainConfig) -> Result<CellMetrics, String> {
            self.calls.fetch_add(1, AtomicOrdering::SeqCst);
            if self.fail_tag.as_deref() == Some(c.tag().as_str()) && fold == 1 {
                return Err("diverged".into());
            }
            let base = match c.encoder_type {
                EncoderType::Cnn => 0.5,
                EncoderType::CnnLstm => 0.6,
                EncoderType::CnnGru => 0.7,
            };
            let pr_auc = base + c.kernel_size as f64 / 100.0 + c.n_fragments as f64 / 1000.0 + fold as f64 / 1e4;
            Ok(CellMetrics { pr_auc, best_epoch: 1, epochs_run: 1 })
        }
    }

    #[test]
    fn full_grid_has_45_configs() {
        let spec = GridSpec::default();
        spec.validate().unwrap();
        let configs = spec.configs();
        assert_eq!(configs.len(), 45);
        let tags: std::collections::BTreeSet<String> = configs.iter().map(|c| c.tag()).collect();
        assert_eq!(tags.len(), 45);
    }

    #[test]
    fn invalid_axes_rejected() {
        for spec in [
            GridSpec { kernel_sizes: vec![4], ..Default::default() },
            GridSpec { sample_sizes: vec![], ..Default::default() },
            GridSpec { sample_sizes: vec![5, 5], ..Default::default() },
        ] {
            assert!(matches!(spec.validate(), Err(ExperimentError::InvalidGrid(_))));
        }
    }

    #[test]
    fn hash_ignores_seed_but_not_settings() {
        let c = ModelConfig::new(EncoderType::CnnGru, 5, 15);
        let t = TrainConfig::default();
        assert_eq!(config_hash(&c, &t), config_hash(&c, &TrainConfig { seed: 9, ..t.clone() }));
        assert_ne!(config_hash(&c, &t), config_hash(&c, &TrainConfig { lr: 1e-3, ..t.clone() }));
        assert_ne!(config_hash(&c, &t), config_hash(&ModelConfig::new(EncoderType::CnnGru, 3, 15), &t));
    }

    #[test]
    fn grid_fills_every_cell() {
        let runner = FakeRunner::new();
        let mut store = CellStore::in_memory();
        let table = grid_search(&GridSpec::default(), 3, &runner, &mut store, 1, |_| {}).unwrap();
        assert_eq!(table.rows.len(), 45);
        assert_eq!(runner.calls.load(AtomicOrdering::SeqCst), 135);
        assert!(table.rows.iter().all(|r| r.folds.iter().all(Option::is_some)));
        assert_eq!(table.aggregate_csv().lines().count(), 46);
        assert_eq!(table.fold_csv().lines().count(), 136);
    }

    #[test]
    fn resume_skips_finished_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cells.jsonl");
        let spec = GridSpec::default();

        // interrupt after 20 cells by keeping only the first 20 lines
        let mut store = CellStore::open(&path).unwrap();
        grid_search(&spec, 3, &FakeRunner::new(), &mut store, 1, |_| {}).unwrap();
        let full = fs::read_to_string(&path).unwrap();
        let first: String = full.lines().take(20).map(|l| format!("{l}\n")).collect();
        fs::write(&path, &first).unwrap();

        let runner = FakeRunner::new();
        let mut store = CellStore::open(&path).unwrap();
        assert_eq!(store.len(), 20);
        let table = grid_search(&spec, 3, &runner, &mut store, 1, |_| {}).unwrap();
        assert_eq!(runner.calls.load(AtomicOrdering::SeqCst), 115);
        assert!(fs::read_to_string(&path).unwrap().starts_with(&first));
        let again = grid_search(&spec, 3, &FakeRunner::new(), &mut CellStore::in_memory(), 1, |_| {}).unwrap();
        assert_eq!(table, again);
    }

    #[test]
    fn truncated_last_line_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cells.jsonl");
        let mut store = CellStore::open(&path).unwrap();
        let spec = GridSpec { sample_sizes: vec![5], kernel_sizes: vec![3], ..Default::default() };
        grid_search(&spec, 2, &FakeRunner::new(), &mut store, 1, |_| {}).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{\"key\":{\"config_ha");
        fs::write(&path, &text).unwrap();
        assert_eq!(CellStore::open(&path).unwrap().len(), 6);

        fs::write(&path, format!("garbage\n{text}")).unwrap();
        assert!(matches!(CellStore::open(&path), Err(ExperimentError::CorruptStore { line: 1, .. })));
    }

    #[test]
    fn failures_are_recorded_and_search_continues() {
        let runner = FakeRunner { fail_tag: Some("CNN-k3-n5".into()), ..FakeRunner::new() };
        let mut store = CellStore::in_memory();
        let spec = GridSpec { sample_sizes: vec![5], ..Default::default() };
        let table = grid_search(&spec, 3, &runner, &mut store, 1, |_| {}).unwrap();
        assert_eq!(store.len(), 27);
        let failed: Vec<_> = store.records().filter(|r| r.pr_auc().is_none()).collect();
        assert_eq!(failed.len(), 1);
        assert_eq!(failed[0].outcome, CellOutcome::Failed("diverged".into()));
        let row = &table.rows[0];
        assert_eq!(row.config().tag(), "CNN-k3-n5");
        assert_eq!(row.folds[1], None);
        assert!(row.pr_auc_mean.is_some());
    }

    #[test]
    fn parallel_jobs_match_serial() {
        let spec = GridSpec { sample_sizes: vec![5, 10], ..Default::default() };
        let serial = grid_search(&spec, 3, &FakeRunner::new(), &mut CellStore::in_memory(), 1, |_| {}).unwrap();
        let parallel = grid_search(&spec, 3, &FakeRunner::new(), &mut CellStore::in_memory(), 4, |_| {}).unwrap();
        assert_eq!(serial, parallel);
    }

    fn row(n: usize, k: usize, e: EncoderType, mean: f64, se: Option<f64>) -> ResultRow {
        ResultRow { sample_size: n, kernel_size: k, encoder: e, pr_auc_mean: Some(mean), pr_auc_stderr: se, folds: vec![] }
    }

    #[test]
    fn ranking_tie_rules() {
        let table = ResultTable {
            rows: vec![
                row(5, 3, EncoderType::Cnn, 0.7, Some(0.02)),
                row(5, 5, EncoderType::Cnn, 0.7, Some(0.01)),
                row(10, 3, EncoderType::CnnGru, 0.8, None),
                ResultRow { pr_auc_mean: None, ..row(60, 7, EncoderType::Cnn, 0.0, None) },
                row(5, 7, EncoderType::Cnn, 0.7, Some(0.01)),
            ],
        };
        let ranked = rank_configs(&table, 5);
        let tags: Vec<String> = ranked.iter().map(|r| r.config().tag()).collect();
        assert_eq!(tags, ["CNN_GRU-k3-n10", "CNN-k5-n5", "CNN-k7-n5", "CNN-k3-n5", "CNN-k7-n60"]);
        assert_eq!(rank_configs(&table, 2).len(), 2);
    }

    #[test]
    fn aggregate_csv_round_trips() {
        let spec = GridSpec { sample_sizes: vec![15], ..Default::default() };
        let table = grid_search(&spec, 3, &FakeRunner::new(), &mut CellStore::in_memory(), 1, |_| {}).unwrap();
        let back = ResultTable::from_aggregate_csv(&table.aggregate_csv()).unwrap();
        assert_eq!(back.rows.len(), 9);
        for (a, b) in table.rows.iter().zip(&back.rows) {
            assert_eq!((a.sample_size, a.kernel_size, a.encoder), (b.sample_size, b.kernel_size, b.encoder));
            assert_eq!(a.pr_auc_mean, b.pr_auc_mean);
            assert_eq!(a.pr_auc_stderr, b.pr_auc_stderr);
        }
        assert!(table.render().contains("CNN_GRU"));
    }
}
