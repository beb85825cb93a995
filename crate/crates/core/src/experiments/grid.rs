use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::prepare::{prepare_data, DataConfig, PreparedData};
use crate::data::LengthBucket;
use crate::error::{Error, Result};
use crate::model::{
    cell_name, ModelConfig, ModelRow, QuestionDetector, Regularizer, CELLS, DEFAULT_DROPOUT, DEFAULT_WIDTH,
};
use crate::recurrent::CellKind;
use crate::training::{
    evaluate_scores, fit, score_examples, EvalReport, ScoredExample, TrainConfig, TrainLog, DEFAULT_THRESHOLD,
};

pub const MODEL_FILE: &str = "model.qdm";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const RESULT_FILE: &str = "result.json";
pub const ERROR_FILE: &str = "error.txt";
pub const CELLS_DIR: &str = "cells";
pub const GRID_RESULT_FILE: &str = "grid_result.json";

/// One of the 42 grid candidates, independent of seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridCell {
    pub row: ModelRow,
    pub cell: CellKind,
    pub regularizer: Regularizer,
}

impl GridCell {
    /// Rows in table order, then GRU before LSTM, then none, dropout, BN.
    pub fn all() -> Vec<GridCell> {
        ModelRow::ALL
            .into_iter()
            .flat_map(|row| {
                CELLS.into_iter().flat_map(move |cell| {
                    Regularizer::ALL.into_iter().map(move |regularizer| GridCell {
                        row,
                        cell,
                        regularizer,
                    })
                })
            })
            .collect()
    }

    /// Directory name of this cell's artifacts for `seed`.
    pub fn dir_name(&self, seed: u64) -> String {
        format!("{}_{}_{}_s{seed}", self.row.name(), cell_name(self.cell), self.regularizer.name())
    }
}

impl fmt::Display for GridCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.row.name(), cell_name(self.cell), self.regularizer.name())
    }
}

/// Layer widths shared by every cell of a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSizes {
    pub hidden: usize,
    pub embed_dim: usize,
    pub attention_width: usize,
    pub dropout: f64,
    pub orthogonal_init: bool,
}

impl Default for ModelSizes {
    fn default() -> Self {
        ModelSizes {
            hidden: DEFAULT_WIDTH,
            embed_dim: DEFAULT_WIDTH,
            attention_width: DEFAULT_WIDTH,
            dropout: DEFAULT_DROPOUT,
            orthogonal_init: false,
        }
    }
}

impl ModelSizes {
    pub fn model_config(&self, cell: GridCell, vocab_size: usize, audio_dim: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            dropout: self.dropout,
            audio_dim,
            orthogonal_init: self.orthogonal_init,
            ..ModelConfig::new(cell.row, cell.cell, cell.regularizer, vocab_size)
                .with_sizes(self.hidden, self.embed_dim, self.attention_width)
                .with_seed(seed)
        }
    }
}

/// Settings of one training run: a grid spec without dataset and seeds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelSizes,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.data.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Dataset directory; relative paths resolve against the grid spec file.
    pub dataset: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Cell type of the models behind the length and declarative tables.
    #[serde(default = "default_analysis_cell")]
    pub analysis_cell: CellKind,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelSizes,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_analysis_cell() -> CellKind {
    CellKind::Gru
}

impl GridSpec {
    pub fn new(dataset: impl Into<PathBuf>) -> Self {
        GridSpec {
            dataset: dataset.into(),
            seeds: default_seeds(),
            analysis_cell: default_analysis_cell(),
            data: DataConfig::default(),
            model: ModelSizes::default(),
            train: TrainConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: GridSpec = toml::from_str(text).map_err(|e| Error::Config(format!("grid spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = Self::from_toml(&text)?;
        if spec.dataset.is_relative() {
            if let Some(parent) = path.parent() {
                spec.dataset = parent.join(&spec.dataset);
            }
        }
        Ok(spec)
    }

    /// Checks seeds and settings, and that every one of the 42 cells maps to
    /// a valid model configuration.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("grid needs at least one seed".into()));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::Config(format!("duplicate seeds in {:?}", self.seeds)));
        }
        self.data.validate()?;
        self.train.validate()?;
        let audio_dim = self.data.mfcc.feature_dim();
        for cell in GridCell::all() {
            self.model.model_config(cell, 3, audio_dim, 0).validate()?;
        }
        Ok(())
    }

    /// Every (cell, seed) pair, seed-major.
    pub fn jobs(&self) -> Vec<(GridCell, u64)> {
        self.seeds
            .iter()
            .flat_map(|&s| GridCell::all().into_iter().map(move |c| (c, s)))
            .collect()
    }

    /// Per-cell training settings: the grid's with the cell's seed.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

/// Everything one trained cell contributes to the tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: String,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub valid_f1: f64,
    pub test: EvalReport,
    /// Test-set scores in split order.
    pub scores: Vec<ScoredExample>,
}

impl CellResult {
    pub fn test_f1(&self) -> f64 {
        self.test.f1()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CellOutcome {
    Done(Box<CellResult>),
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell: GridCell,
    pub seed: u64,
    pub outcome: CellOutcome,
}

impl CellRecord {
    pub fn result(&self) -> Option<&CellResult> {
        match &self.outcome {
            CellOutcome::Done(r) => Some(r),
            CellOutcome::Failed { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub seeds: Vec<u64>,
    pub analysis_cell: CellKind,
    /// One record per (cell, seed), in `GridSpec::jobs` order.
    pub records: Vec<CellRecord>,
    /// Text of every test example by id, for the declarative table.
    pub texts: BTreeMap<String, String>,
}

impl GridResult {
    fn results_for(&self, cell: GridCell) -> impl Iterator<Item = (u64, &CellResult)> {
        self.records
            .iter()
            .filter(move |r| r.cell == cell)
            .filter_map(|r| r.result().map(|res| (r.seed, res)))
    }

    /// Test F1 of each seed that completed, in the grid spec's seed order.
    pub fn seed_f1s(&self, cell: GridCell) -> Vec<(u64, f64)> {
        self.results_for(cell).map(|(s, r)| (s, r.test_f1())).collect()
    }

    /// Mean test F1 over completed seeds; `None` when every seed failed.
    pub fn mean_f1(&self, cell: GridCell) -> Option<f64> {
        mean(self.results_for(cell).map(|(_, r)| r.test_f1()))
    }

    /// Mean over seeds of the F1 within one length bucket.
    pub fn bucket_f1(&self, cell: GridCell, bucket: LengthBucket) -> Option<f64> {
        mean(self.results_for(cell).filter_map(|(_, r)| r.test.buckets.get(&bucket).map(|m| m.f1)))
    }

    /// Test scores averaged per example over completed seeds, in the order
    /// of the first completed seed.
    pub fn mean_scores(&self, cell: GridCell) -> Vec<ScoredExample> {
        let runs: Vec<&CellResult> = self.results_for(cell).map(|(_, r)| r).collect();
        let Some(first) = runs.first() else {
            return Vec::new();
        };
        let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for r in &runs {
            for s in &r.scores {
                let e = sums.entry(s.id.as_str()).or_default();
                e.0 += s.score;
                e.1 += 1;
            }
        }
        first
            .scores
            .iter()
            .map(|s| {
                let (sum, n) = sums[s.id.as_str()];
                ScoredExample {
                    score: sum / n as f64,
                    ..s.clone()
                }
            })
            .collect()
    }

    pub fn failures(&self) -> Vec<(GridCell, u64, &str)> {
        self.records
            .iter()
            .filter_map(|r| match &r.outcome {
                CellOutcome::Failed { error } => Some((r.cell, r.seed, error.as_str())),
                CellOutcome::Done(_) => None,
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Content hash over everything that determines a cell's trained weights.
pub fn cache_key(model: &ModelConfig, train: &TrainConfig, data: &DataConfig, dataset_hash: &str) -> Result<String> {
    #[derive(Serialize)]
    struct Key<'a> {
        model: &'a ModelConfig,
        train: &'a TrainConfig,
        data: &'a DataConfig,
        dataset: &'a str,
    }
    let json = serde_json::to_vec(&Key {
        model,
        train,
        data,
        dataset: dataset_hash,
    })?;
    Ok(hex::encode(Sha256::digest(json)))
}

/// Output of training one model.
#[derive(Clone, Debug)]
pub struct TrainedCell {
    pub model: QuestionDetector<f64>,
    pub log: TrainLog,
    pub test: EvalReport,
    pub scores: Vec<ScoredExample>,
}

/// Builds the model for `config`, attaches the vocabulary, fits it on the
/// prepared splits and scores the test split.
pub fn train_cell(data: &PreparedData, config: ModelConfig, train: &TrainConfig) -> Result<TrainedCell> {
    let mut model = QuestionDetector::build(config)?.with_vocab(data.vocab.clone())?;
    let log = fit(&mut model, &data.train, &data.valid, train)?;
    let scores = score_examples(&model, &data.test)?;
    let test = evaluate_scores(&scores, DEFAULT_THRESHOLD)?;
    Ok(TrainedCell {
        model,
        log,
        test,
        scores,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GridOptions {
    /// Worker threads; 0 uses one per core.
    pub jobs: usize,
    /// Reuse cells whose stored cache key matches.
    pub resume: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GridStats {
    pub trained: usize,
    pub cached: usize,
    pub failed: usize,
}

/// Trains every (cell, seed) of `spec` under `out/cells/`, then writes
/// `grid_result.json`. A failing cell is recorded and the grid continues; a
/// missing or unreadable dataset aborts before any training.
pub fn run_grid(spec: &GridSpec, out: &Path, options: GridOptions) -> Result<(GridResult, GridStats)> {
    spec.validate()?;
    let data = prepare_data(&spec.dataset, &spec.data)?;
    let cells_dir = out.join(CELLS_DIR);
    std::fs::create_dir_all(&cells_dir).map_err(|e| Error::io(&cells_dir, e))?;
    let jobs = spec.jobs();
    log::info!(
        "grid: {} cells x {} seeds, {} train / {} valid / {} test examples",
        GridCell::all().len(),
        spec.seeds.len(),
        data.train.len(),
        data.valid.len(),
        data.test.len()
    );

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", options.jobs)))?;
    let outcomes: Vec<(CellRecord, Status)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(cell, seed)| run_one(spec, &data, &cells_dir, cell, seed, options.resume))
            .collect()
    });

    let mut stats = GridStats::default();
    let mut records = Vec::with_capacity(outcomes.len());
    for (record, status) in outcomes {
        match status {
            Status::Trained => stats.trained += 1,
            Status::Cached => stats.cached += 1,
            Status::Failed => stats.failed += 1,
        }
        records.push(record);
    }
    let test_ids: BTreeSet<&str> = data.test.iter().map(|e| e.id.as_str()).collect();
    let result = GridResult {
        seeds: spec.seeds.clone(),
        analysis_cell: spec.analysis_cell,
        records,
        texts: data
            .texts
            .iter()
            .filter(|(id, _)| test_ids.contains(id.as_str()))
            .map(|(id, t)| (id.clone(), t.clone()))
            .collect(),
    };
    result.save(&out.join(GRID_RESULT_FILE))?;
    log::info!(
        "grid done: {} trained, {} cached, {} failed",
        stats.trained,
        stats.cached,
        stats.failed
    );
    Ok((result, stats))
}

enum Status {
    Trained,
    Cached,
    Failed,
}

fn run_one(
    spec: &GridSpec,
    data: &PreparedData,
    cells_dir: &Path,
    cell: GridCell,
    seed: u64,
    resume: bool,
) -> (CellRecord, Status) {
    let dir = cells_dir.join(cell.dir_name(seed));
    let model_cfg = spec.model.model_config(cell, data.vocab.len(), data.audio_dim, seed);
    let train_cfg = spec.train_config(seed);
    let record = |outcome| CellRecord { cell, seed, outcome };
    let key = match cache_key(&model_cfg, &train_cfg, &spec.data, &data.dataset_hash) {
        Ok(k) => k,
        Err(e) => return (record(CellOutcome::Failed { error: e.to_string() }), Status::Failed),
    };
    if resume {
        if let Some(cached) = load_cached(&dir, &key) {
            log::info!("{cell} seed {seed}: cached");
            return (record(CellOutcome::Done(Box::new(cached))), Status::Cached);
        }
    }
    match train_and_store(data, &dir, model_cfg, &train_cfg, key) {
        Ok(r) => {
            log::info!("{cell} seed {seed}: test F1 {:.4}", r.test_f1());
            (record(CellOutcome::Done(Box::new(r))), Status::Trained)
        }
        Err(e) => {
            log::warn!("{cell} seed {seed} failed: {e}");
            let _ = std::fs::write(dir.join(ERROR_FILE), e.to_string());
            (record(CellOutcome::Failed { error: e.to_string() }), Status::Failed)
        }
    }
}

fn load_cached(dir: &Path, key: &str) -> Option<CellResult> {
    let text = std::fs::read_to_string(dir.join(RESULT_FILE)).ok()?;
    let r: CellResult = serde_json::from_str(&text).ok()?;
    (r.key == key).then_some(r)
}

fn train_and_store(
    data: &PreparedData,
    dir: &Path,
    model_cfg: ModelConfig,
    train_cfg: &TrainConfig,
    key: String,
) -> Result<CellResult> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let _ = std::fs::remove_file(dir.join(RESULT_FILE));
    let _ = std::fs::remove_file(dir.join(ERROR_FILE));
    let mut trained = train_cell(data, model_cfg, train_cfg)?;
    let model_path = dir.join(MODEL_FILE);
    trained.model.save(&model_path)?;
    trained.log.model_path = Some(model_path.display().to_string());
    trained.log.save(&dir.join(LOG_FILE))?;
    let result = CellResult {
        key,
        best_epoch: trained.log.best_epoch,
        epochs_run: trained.log.epochs.len(),
        valid_f1: trained.log.best_valid_f1,
        test: trained.test,
        scores: trained.scores,
    };
    // Written last: its presence marks the cell as complete.
    write_atomic(&dir.join(RESULT_FILE), serde_json::to_string(&result)?.as_bytes())?;
    Ok(result)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
