//! Multi-seed scoring runs and pruning sweeps.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::checkpoint::CheckpointStore;
use crate::data::{self, Dataset, InputSpace, Split};
use crate::error::{Error, Result};
use crate::nn::{Activation, Init, ModelSpec};
use crate::scores::{self, RunHandle, ScoreKind, ScoreTable, TableOptions};
use crate::seed;
use crate::train::{self, TrainConfig};

const RANDOM_SCORE_TAG: u64 = 0x52414e44; // "RAND"
const RETRAIN_TAG: u64 = 0x52545241; // "RTRA"
const SYNTH_TEST_TAG: u64 = 0x54455354; // "TEST"

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Synthetic,
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            "synthetic" => Ok(DatasetKind::Synthetic),
            _ => Err(Error::InvalidConfig(format!("unknown dataset '{s}'"))),
        }
    }
}

/// Which end of the score ranking survives pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Keep {
    #[default]
    Highest,
    Lowest,
}

impl FromStr for Keep {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "highest" => Ok(Keep::Highest),
            "lowest" => Ok(Keep::Lowest),
            _ => Err(Error::InvalidConfig(format!("keep must be highest|lowest, got '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticShape {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub synthetic: SyntheticShape,
    /// Hidden layer widths; input and class counts come from the dataset.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub init: Init,
    pub bias: bool,
    pub train: TrainConfig,
    pub score_runs: usize,
    pub score_epochs: BTreeSet<usize>,
    pub prune_fractions: Vec<f64>,
    pub retrain_trials: usize,
    pub keep: Keep,
    pub output_dir: PathBuf,
    pub master_seed: u64,
    pub input_space: InputSpace,
    pub el2n_squared: bool,
    /// Kinds to sweep; all available tables when `None`.
    pub sweep_kinds: Option<Vec<ScoreKind>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetKind::Mnist,
            data_dir: std::env::var_os("DATA_DIR").map_or_else(|| PathBuf::from("data"), PathBuf::from),
            train_limit: None,
            test_limit: None,
            synthetic: SyntheticShape {
                classes: 10,
                dim: 20,
                train_per_class: 100,
                test_per_class: 50,
            },
            hidden: vec![128],
            activation: Activation::Relu,
            init: Init::HeNormal,
            bias: true,
            train: TrainConfig::default(),
            score_runs: 4,
            score_epochs: [0, 1].into(),
            prune_fractions: vec![0.0, 0.3, 0.5, 0.7],
            retrain_trials: 3,
            keep: Keep::Highest,
            output_dir: PathBuf::from("runs/out"),
            master_seed: 0,
            input_space: InputSpace::Standardized,
            el2n_squared: true,
            sweep_kinds: None,
        }
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() || value.trim() == "none" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse '{v}'")))
        })
        .collect()
}

fn parse_one<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse '{value}'")))
}

/// Proportional epoch mapping: `round(0.1 · total)`, at least 1.
pub fn mid_epoch(total_epochs: usize) -> usize {
    ((0.1 * total_epochs as f64).round() as usize).max(1)
}

impl ExperimentConfig {
    /// Sets one field by its config-file key. CLI flags go through here too.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dataset" => self.dataset = v.parse()?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "train_limit" => self.train_limit = Some(parse_one(key, v)?),
            "test_limit" => self.test_limit = Some(parse_one(key, v)?),
            "synthetic_classes" => self.synthetic.classes = parse_one(key, v)?,
            "synthetic_dim" => self.synthetic.dim = parse_one(key, v)?,
            "synthetic_train_per_class" => self.synthetic.train_per_class = parse_one(key, v)?,
            "synthetic_test_per_class" => self.synthetic.test_per_class = parse_one(key, v)?,
            "hidden" => self.hidden = parse_list(key, v)?,
            "activation" => {
                self.activation = match v {
                    "relu" => Activation::Relu,
                    "identity" => Activation::Identity,
                    _ => return Err(Error::InvalidConfig(format!("unknown activation '{v}'"))),
                }
            }
            "init" => {
                self.init = match v {
                    "he_normal" => Init::HeNormal,
                    "glorot_uniform" => Init::GlorotUniform,
                    _ => return Err(Error::InvalidConfig(format!("unknown init '{v}'"))),
                }
            }
            "bias" => self.bias = parse_one(key, v)?,
            "epochs" => self.train.epochs = parse_one(key, v)?,
            "batch_size" => self.train.batch_size = parse_one(key, v)?,
            "lr" | "learning_rate" => self.train.learning_rate = parse_one(key, v)?,
            "momentum" => self.train.momentum = parse_one(key, v)?,
            "runs" | "score_runs" => self.score_runs = parse_one(key, v)?,
            "score_epochs" => self.score_epochs = parse_list(key, v)?.into_iter().collect(),
            "fractions" | "prune_fractions" => self.prune_fractions = parse_list(key, v)?,
            "retrain_trials" => self.retrain_trials = parse_one(key, v)?,
            "keep" => self.keep = v.parse()?,
            "out" | "output_dir" => self.output_dir = PathBuf::from(v),
            "seed" | "master_seed" => self.master_seed = parse_one(key, v)?,
            "input_space" => {
                self.input_space = match v {
                    "standardized" => InputSpace::Standardized,
                    "raw" => InputSpace::Raw,
                    _ => return Err(Error::InvalidConfig(format!("unknown input space '{v}'"))),
                }
            }
            "el2n" => {
                self.el2n_squared = match v {
                    "squared" => true,
                    "unsquared" => false,
                    _ => return Err(Error::InvalidConfig(format!("el2n must be squared|unsquared, got '{v}'"))),
                }
            }
            "kinds" => self.sweep_kinds = Some(parse_list(key, v)?),
            _ => return Err(Error::InvalidConfig(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_file_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected key = value", n + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ExperimentConfig::default();
        cfg.apply_file_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.train.validate()?;
        if self.score_runs == 0 {
            return bad("runs must be >= 1".into());
        }
        if self.retrain_trials == 0 {
            return bad("retrain_trials must be >= 1".into());
        }
        if let Some(&e) = self.score_epochs.iter().next_back() {
            if e > self.train.epochs {
                return bad(format!("score epoch {e} exceeds epochs {}", self.train.epochs));
            }
        }
        if self.prune_fractions.iter().any(|f| !(0.0..1.0).contains(f)) {
            return bad("prune fractions must lie in [0, 1)".into());
        }
        if self.prune_fractions.windows(2).any(|w| w[0] >= w[1]) {
            return bad("prune fractions must be strictly increasing".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be >= 1".into());
        }
        Ok(())
    }

    pub fn model_spec(&self, input_dim: usize, classes: usize) -> ModelSpec {
        let mut widths = vec![input_dim];
        widths.extend(&self.hidden);
        widths.push(classes);
        ModelSpec {
            layer_widths: widths,
            activation: self.activation,
            init: self.init,
            bias: self.bias,
        }
    }

    /// Every kind [`run_scoring`] produces, in table order.
    pub fn score_kinds(&self) -> Vec<ScoreKind> {
        let mut kinds: BTreeSet<ScoreKind> = BTreeSet::new();
        for &epoch in &self.score_epochs {
            kinds.insert(ScoreKind::Grand { epoch });
            kinds.insert(ScoreKind::El2n { epoch, squared: self.el2n_squared });
        }
        kinds.insert(ScoreKind::Forget { epoch: self.train.epochs });
        kinds.insert(ScoreKind::InputNorm);
        kinds.insert(ScoreKind::Random);
        kinds.into_iter().collect()
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.output_dir.join("runs")
    }
}

/// Loads (or synthesizes) the train and test splits named by the config.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match cfg.dataset {
        DatasetKind::Mnist => {
            let load = |split| {
                let (img, lab) = data::mnist_paths(&cfg.data_dir, split).ok_or_else(|| {
                    Error::io(
                        &cfg.data_dir,
                        std::io::Error::new(
                            std::io::ErrorKind::NotFound,
                            "MNIST idx files not found (set DATA_DIR)",
                        ),
                    )
                })?;
                data::load_mnist(&img, &lab, split)
            };
            (load(Split::Train)?, load(Split::Test)?)
        }
        DatasetKind::Cifar10 => (
            data::load_cifar10(&data::cifar10_paths(&cfg.data_dir, Split::Train), Split::Train)?,
            data::load_cifar10(&data::cifar10_paths(&cfg.data_dir, Split::Test), Split::Test)?,
        ),
        DatasetKind::Synthetic => {
            let s = &cfg.synthetic;
            (
                data::synthetic_gaussian(s.classes, s.dim, s.train_per_class, cfg.master_seed, Split::Train)?,
                data::synthetic_gaussian(
                    s.classes,
                    s.dim,
                    s.test_per_class,
                    seed::combine(cfg.master_seed, &[SYNTH_TEST_TAG]),
                    Split::Test,
                )?,
            )
        }
    };
    let train = match cfg.train_limit {
        Some(n) => train.head(n),
        None => train,
    };
    let test = match cfg.test_limit {
        Some(n) => test.head(n),
        None => test,
    };
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run: usize,
    pub seed: u64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct Scoring {
    pub tables: BTreeMap<ScoreKind, ScoreTable>,
    pub runs: Vec<RunSummary>,
}

fn runs_csv(runs: &[RunSummary]) -> String {
    let mut out = String::from("run,seed,train_accuracy,test_accuracy\n");
    for r in runs {
        out.push_str(&format!("{},{},{},{}\n", r.run, r.seed, r.train_accuracy, r.test_accuracy));
    }
    out
}

/// Trains `score_runs` models (seed `master_seed + i`), checkpointing at
/// `{0} ∪ score_epochs`, then computes every score table and writes
/// `scores_<kind>.csv` plus `runs.csv` into the output directory.
pub fn run_scoring(cfg: &ExperimentConfig) -> Result<Scoring> {
    cfg.validate()?;
    let (train_ds, test_ds) = load_datasets(cfg)?;
    run_scoring_on(cfg, &train_ds, &test_ds)
}

pub fn run_scoring_on(cfg: &ExperimentConfig, train_ds: &Dataset, test_ds: &Dataset) -> Result<Scoring> {
    cfg.validate()?;
    let spec = cfg.model_spec(train_ds.input_dim, train_ds.num_classes);
    let runs_dir = cfg.runs_dir();
    if runs_dir.exists() {
        fs::remove_dir_all(&runs_dir).map_err(|e| Error::io(&runs_dir, e))?;
    }
    let mut checkpoint_epochs = cfg.score_epochs.clone();
    checkpoint_epochs.insert(0);

    let trained: Vec<(RunHandle, RunSummary)> = (0..cfg.score_runs)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.master_seed.wrapping_add(i as u64);
            let store = CheckpointStore::for_run(&runs_dir, &format!("run_{i}"))?;
            let tcfg = TrainConfig {
                seed,
                checkpoint_epochs: checkpoint_epochs.clone(),
                ..cfg.train.clone()
            };
            let res = train::train(&spec, train_ds, test_ds, &tcfg, Some(&store))?;
            let summary = RunSummary {
                run: i,
                seed,
                train_accuracy: res.train_accuracy(),
                test_accuracy: res.test_accuracy,
            };
            Ok((
                RunHandle {
                    store,
                    correctness: Some(res.correctness),
                },
                summary,
            ))
        })
        .collect::<Result<_>>()?;
    let (handles, runs): (Vec<RunHandle>, Vec<RunSummary>) = trained.into_iter().unzip();

    let opts = TableOptions {
        random_trials: cfg.score_runs,
        random_seed: seed::combine(cfg.master_seed, &[RANDOM_SCORE_TAG]),
        input_space: cfg.input_space,
    };
    let mut tables = BTreeMap::new();
    for kind in cfg.score_kinds() {
        tables.insert(kind, scores::compute_table(kind, train_ds, &handles, &opts)?);
    }

    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    for t in tables.values() {
        t.write_csv(&cfg.output_dir.join(format!("scores_{}.csv", t.kind.slug())))?;
    }
    let runs_path = cfg.output_dir.join("runs.csv");
    fs::write(&runs_path, runs_csv(&runs)).map_err(|e| Error::io(&runs_path, e))?;
    Ok(Scoring { tables, runs })
}

/// Reads every `scores_<kind>.csv` in `dir`.
pub fn read_tables(dir: &Path) -> Result<BTreeMap<ScoreKind, ScoreTable>> {
    let mut tables = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(slug) = name.strip_prefix("scores_").and_then(|n| n.strip_suffix(".csv")) else {
            continue;
        };
        let kind = ScoreKind::from_slug(slug)?;
        tables.insert(kind, ScoreTable::read_csv(kind, &path)?);
    }
    Ok(tables)
}

/// Number of examples kept when pruning `fraction` of `n`:
/// `ceil((1 − fraction) · n)`, guarding against `0.7 → 0.30000000000000004`.
pub fn kept_count(n: usize, fraction: f64) -> usize {
    let exact = (1.0 - fraction) * n as f64;
    let nearest = exact.round();
    let k = if (exact - nearest).abs() < 1e-9 * (n.max(1) as f64) {
        nearest
    } else {
        exact.ceil()
    };
    (k as usize).min(n)
}

/// Keeps the `ceil((1 − fraction)·n)` highest- (or lowest-) scoring examples.
/// Equal scores prefer the lower example id; survivors keep dataset order.
pub fn prune(ds: &Dataset, scores: &[f64], fraction: f64, keep: Keep) -> Result<Dataset> {
    if scores.len() != ds.len() {
        return Err(Error::LengthMismatch {
            left: ds.len(),
            right: scores.len(),
        });
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!("prune fraction {fraction} outside [0, 1)")));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by(|&a, &b| {
        let by_score = match keep {
            Keep::Highest => scores[b].total_cmp(&scores[a]),
            Keep::Lowest => scores[a].total_cmp(&scores[b]),
        };
        by_score.then(ds.examples[a].id.cmp(&ds.examples[b].id))
    });
    let mut kept: Vec<usize> = order[..kept_count(ds.len(), fraction)].to_vec();
    kept.sort_unstable();
    Ok(ds.select(&kept))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub kind: ScoreKind,
    pub fraction: f64,
    pub trial: usize,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,fraction,trial,test_accuracy\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.kind, r.fraction, r.trial, r.test_accuracy));
        }
        out
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let err = |detail: String| Error::Csv {
            path: path.to_path_buf(),
            detail,
        };
        let mut lines = text.lines();
        if lines.next() != Some("kind,fraction,trial,test_accuracy") {
            return Err(err("unexpected header".into()));
        }
        let rows = lines
            .enumerate()
            .map(|(i, line)| {
                let f: Vec<&str> = line.split(',').collect();
                let bad = || err(format!("line {}", i + 2));
                if f.len() != 4 {
                    return Err(bad());
                }
                Ok(SweepRow {
                    kind: f[0].parse()?,
                    fraction: f[1].parse().map_err(|_| bad())?,
                    trial: f[2].parse().map_err(|_| bad())?,
                    test_accuracy: f[3].parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(SweepResult { rows })
    }

    pub fn kinds(&self) -> Vec<ScoreKind> {
        let set: BTreeSet<ScoreKind> = self.rows.iter().map(|r| r.kind).collect();
        set.into_iter().collect()
    }

    pub fn fractions(&self) -> Vec<f64> {
        let mut f: Vec<f64> = self.rows.iter().map(|r| r.fraction).collect();
        f.sort_by(f64::total_cmp);
        f.dedup();
        f
    }

    /// Mean test accuracy over trials for one (kind, fraction) cell.
    pub fn mean_accuracy(&self, kind: ScoreKind, fraction: f64) -> Option<f64> {
        let acc: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.kind == kind && r.fraction == fraction)
            .map(|r| r.test_accuracy)
            .collect();
        (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64)
    }
}

/// Seed for one retraining job. Depends on the master seed, fraction and trial
/// only; fraction-0 jobs are identical across score kinds.
pub fn retrain_seed(master_seed: u64, fraction: f64, trial: usize) -> u64 {
    seed::combine(master_seed, &[RETRAIN_TAG, fraction.to_bits(), trial as u64])
}

pub fn run_sweep(cfg: &ExperimentConfig, tables: &BTreeMap<ScoreKind, ScoreTable>) -> Result<SweepResult> {
    cfg.validate()?;
    let (train_ds, test_ds) = load_datasets(cfg)?;
    run_sweep_on(cfg, tables, &train_ds, &test_ds)
}

/// For each (kind, fraction, trial): prune by the table's mean (random uses
/// its own trial row), retrain from scratch and evaluate on `test_ds`.
pub fn run_sweep_on(
    cfg: &ExperimentConfig,
    tables: &BTreeMap<ScoreKind, ScoreTable>,
    train_ds: &Dataset,
    test_ds: &Dataset,
) -> Result<SweepResult> {
    cfg.validate()?;
    let kinds: Vec<ScoreKind> = match &cfg.sweep_kinds {
        Some(k) => k.clone(),
        None => tables.keys().copied().collect(),
    };
    let ids: Vec<usize> = train_ds.examples.iter().map(|e| e.id).collect();
    let spec = cfg.model_spec(train_ds.input_dim, train_ds.num_classes);

    // (kind, fraction, trial) → job index; identical (subset, seed) pairs share a job.
    let mut jobs: Vec<(Vec<usize>, u64)> = Vec::new();
    let mut job_of: HashMap<(Vec<usize>, u64), usize> = HashMap::new();
    let mut cells = Vec::new();
    for &kind in &kinds {
        let table = tables
            .get(&kind)
            .ok_or_else(|| Error::InvalidConfig(format!("no score table for {kind}")))?;
        if table.example_ids != ids {
            return Err(Error::InvalidConfig(format!(
                "score table {kind} does not match the training set"
            )));
        }
        for &fraction in &cfg.prune_fractions {
            for trial in 0..cfg.retrain_trials {
                let scores = match kind {
                    ScoreKind::Random => &table.trials[trial % table.n_trials()],
                    _ => &table.mean,
                };
                let kept: Vec<usize> = prune(train_ds, scores, fraction, cfg.keep)?
                    .examples
                    .iter()
                    .map(|e| e.id)
                    .collect();
                let key = (kept, retrain_seed(cfg.master_seed, fraction, trial));
                let job = *job_of.entry(key.clone()).or_insert_with(|| {
                    jobs.push(key);
                    jobs.len() - 1
                });
                cells.push((kind, fraction, trial, job));
            }
        }
    }

    let position: HashMap<usize, usize> = ids.iter().enumerate().map(|(p, &id)| (id, p)).collect();
    let accuracies: Vec<f64> = jobs
        .par_iter()
        .map(|(kept, seed)| {
            let positions: Vec<usize> = kept.iter().map(|id| position[id]).collect();
            let subset = train_ds.select(&positions);
            let tcfg = TrainConfig {
                seed: *seed,
                checkpoint_epochs: BTreeSet::new(),
                ..cfg.train.clone()
            };
            Ok(train::train(&spec, &subset, test_ds, &tcfg, None)?.test_accuracy)
        })
        .collect::<Result<_>>()?;

    let mut rows: Vec<SweepRow> = cells
        .into_iter()
        .map(|(kind, fraction, trial, job)| SweepRow {
            kind,
            fraction,
            trial,
            test_accuracy: accuracies[job],
        })
        .collect();
    rows.sort_by(|a, b| {
        a.kind
            .cmp(&b.kind)
            .then(a.fraction.total_cmp(&b.fraction))
            .then(a.trial.cmp(&b.trial))
    });
    Ok(SweepResult { rows })
}
