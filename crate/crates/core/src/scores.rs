//! Per-example importance scores and their aggregation over runs.
//!
//! * GraNd: `‖∇θ L(f(x; θ), y)‖₂` over all trainable parameters.
//! * EL2N: `‖softmax(f(x; θ)) − onehot(y)‖₂²` (or its square root).
//! * input norm, forgetting counts and uniform random scores.
//!
//! Model-based scores are evaluated once per independent run at a fixed epoch
//! and averaged over runs; a [`ScoreTable`] holds every trial row plus the
//! mean.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::checkpoint::CheckpointStore;
use crate::data::{self, Dataset, InputSpace};
use crate::error::{Error, Result};
use crate::nn::{Params, Trace};
use crate::oracle::residual_norm;
use crate::seed;
use crate::train::{forget_counts, CorrectnessMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScoreKind {
    Grand { epoch: usize },
    El2n { epoch: usize, squared: bool },
    InputNorm,
    Forget { epoch: usize },
    Random,
}

impl ScoreKind {
    pub fn grand(epoch: usize) -> Self {
        ScoreKind::Grand { epoch }
    }

    pub fn el2n(epoch: usize) -> Self {
        ScoreKind::El2n { epoch, squared: true }
    }

    pub fn score_epoch(&self) -> Option<usize> {
        match *self {
            ScoreKind::Grand { epoch }
            | ScoreKind::El2n { epoch, .. }
            | ScoreKind::Forget { epoch } => Some(epoch),
            ScoreKind::InputNorm | ScoreKind::Random => None,
        }
    }

    /// Filesystem-safe form of the label, used in `scores_<slug>.csv`.
    pub fn slug(&self) -> String {
        self.to_string().replace('@', "_ep")
    }

    pub fn from_slug(s: &str) -> Result<Self> {
        s.replacen("_ep", "@", 1).parse()
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreKind::Grand { epoch } => write!(f, "grand@{epoch}"),
            ScoreKind::El2n { epoch, squared: true } => write!(f, "el2n@{epoch}"),
            ScoreKind::El2n { epoch, squared: false } => write!(f, "el2nl2@{epoch}"),
            ScoreKind::Forget { epoch } => write!(f, "forget@{epoch}"),
            ScoreKind::InputNorm => f.write_str("input_norm"),
            ScoreKind::Random => f.write_str("random"),
        }
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("unknown score kind '{s}'"));
        match s {
            "input_norm" => return Ok(ScoreKind::InputNorm),
            "random" => return Ok(ScoreKind::Random),
            _ => {}
        }
        let (name, epoch) = s.split_once('@').ok_or_else(bad)?;
        let epoch: usize = epoch.parse().map_err(|_| bad())?;
        match name {
            "grand" => Ok(ScoreKind::Grand { epoch }),
            "el2n" => Ok(ScoreKind::El2n { epoch, squared: true }),
            "el2nl2" => Ok(ScoreKind::El2n { epoch, squared: false }),
            "forget" => Ok(ScoreKind::Forget { epoch }),
            _ => Err(bad()),
        }
    }
}

/// Scores for one kind: `trials[t][i]` is the score of example `i` under trial
/// `t`; `mean[i]` averages over trials.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub kind: ScoreKind,
    pub example_ids: Vec<usize>,
    pub trials: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

impl ScoreTable {
    pub fn from_trials(
        kind: ScoreKind,
        example_ids: Vec<usize>,
        trials: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if trials.is_empty() {
            return Err(Error::Empty("score trials"));
        }
        let n = example_ids.len();
        if let Some(bad) = trials.iter().find(|t| t.len() != n) {
            return Err(Error::LengthMismatch {
                left: n,
                right: bad.len(),
            });
        }
        let m = trials.len() as f64;
        let mean = (0..n)
            .map(|i| trials.iter().map(|t| t[i]).sum::<f64>() / m)
            .collect();
        Ok(ScoreTable {
            kind,
            example_ids,
            trials,
            mean,
        })
    }

    pub fn n_examples(&self) -> usize {
        self.example_ids.len()
    }

    pub fn n_trials(&self) -> usize {
        self.trials.len()
    }

    /// `example_id,trial_0,...,trial_{M-1},mean`, one row per example.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("example_id");
        for t in 0..self.n_trials() {
            out.push_str(&format!(",trial_{t}"));
        }
        out.push_str(",mean\n");
        for (i, id) in self.example_ids.iter().enumerate() {
            out.push_str(&id.to_string());
            for t in &self.trials {
                out.push_str(&format!(",{}", t[i]));
            }
            out.push_str(&format!(",{}\n", self.mean[i]));
        }
        out
    }

    pub fn from_csv(kind: ScoreKind, text: &str, path: &Path) -> Result<Self> {
        let err = |detail: String| Error::Csv {
            path: path.to_path_buf(),
            detail,
        };
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| err("empty file".into()))?.split(',').collect();
        let m = header.len().checked_sub(2).filter(|&m| m >= 1).ok_or_else(|| err("need at least one trial column".into()))?;
        let expected: Vec<String> = std::iter::once("example_id".to_string())
            .chain((0..m).map(|t| format!("trial_{t}")))
            .chain(std::iter::once("mean".to_string()))
            .collect();
        if header != expected {
            return Err(err(format!("unexpected header {header:?}")));
        }
        let mut ids = Vec::new();
        let mut trials = vec![Vec::new(); m];
        for (lineno, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != m + 2 {
                return Err(err(format!("line {}: {} fields", lineno + 2, fields.len())));
            }
            ids.push(fields[0].parse().map_err(|_| err(format!("line {}: bad id", lineno + 2)))?);
            for (t, f) in fields[1..=m].iter().enumerate() {
                trials[t].push(f.parse().map_err(|_| err(format!("line {}: bad value '{f}'", lineno + 2)))?);
            }
        }
        ScoreTable::from_trials(kind, ids, trials)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(kind: ScoreKind, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(kind, &text, path)
    }
}

/// Gradient norm of the loss for one example under one parameter draw.
pub fn grand_one(params: &Params, x: &[f64], y: usize) -> Result<f64> {
    Trace::new(params).grad_norm(params, x, y)
}

/// `Σ_c (p_c − onehot(y)_c)²`, or its square root when `squared` is false.
pub fn el2n_one(params: &Params, x: &[f64], y: usize, squared: bool) -> Result<f64> {
    let mut trace = Trace::new(params);
    trace.forward(params, x)?;
    let r = residual_norm(trace.probs(), y)?;
    Ok(if squared { r * r } else { r })
}

/// One trained (or merely initialized) model run that scores can be read from.
#[derive(Debug, Clone)]
pub struct RunHandle {
    pub store: CheckpointStore,
    pub correctness: Option<CorrectnessMatrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableOptions {
    pub random_trials: usize,
    pub random_seed: u64,
    pub input_space: InputSpace,
}

impl Default for TableOptions {
    fn default() -> Self {
        TableOptions {
            random_trials: 1,
            random_seed: 0,
            input_space: InputSpace::Standardized,
        }
    }
}

fn model_row(ds: &Dataset, params: &Params, kind: ScoreKind) -> Result<Vec<f64>> {
    let mut trace = Trace::new(params);
    ds.examples
        .iter()
        .map(|ex| match kind {
            ScoreKind::Grand { .. } => trace.grad_norm(params, &ex.x, ex.y),
            ScoreKind::El2n { squared, .. } => {
                trace.forward(params, &ex.x)?;
                let r = residual_norm(trace.probs(), ex.y)?;
                Ok(if squared { r * r } else { r })
            }
            _ => unreachable!("not a model-based score"),
        })
        .collect()
}

/// Builds the score table for `kind` over `ds`.
///
/// GraNd/EL2N restore each run's checkpoint at exactly the score epoch; a
/// missing checkpoint is an error. Rows are ordered by run index regardless of
/// evaluation order.
pub fn compute_table(
    kind: ScoreKind,
    ds: &Dataset,
    runs: &[RunHandle],
    opts: &TableOptions,
) -> Result<ScoreTable> {
    let ids: Vec<usize> = ds.examples.iter().map(|e| e.id).collect();
    let trials: Vec<Vec<f64>> = match kind {
        ScoreKind::Grand { epoch } | ScoreKind::El2n { epoch, .. } => {
            if runs.is_empty() {
                return Err(Error::Empty("runs"));
            }
            runs.par_iter()
                .map(|run| {
                    let params = run.store.restore(Some(epoch as u64))?;
                    model_row(ds, &params, kind)
                })
                .collect::<Result<_>>()?
        }
        ScoreKind::Forget { epoch } => {
            if runs.is_empty() {
                return Err(Error::Empty("runs"));
            }
            runs.iter()
                .map(|run| {
                    let m = run.correctness.as_ref().ok_or_else(|| {
                        Error::InvalidConfig("forget score needs a correctness matrix".into())
                    })?;
                    if m.n_examples() != ds.len() {
                        return Err(Error::LengthMismatch {
                            left: ds.len(),
                            right: m.n_examples(),
                        });
                    }
                    if epoch == 0 || epoch > m.epochs() {
                        return Err(Error::InvalidConfig(format!(
                            "forget epoch {epoch} outside 1..={}",
                            m.epochs()
                        )));
                    }
                    Ok(forget_counts(&m.truncate(epoch))?
                        .into_iter()
                        .map(f64::from)
                        .collect())
                })
                .collect::<Result<_>>()?
        }
        ScoreKind::InputNorm => vec![data::input_norms(ds, opts.input_space)],
        ScoreKind::Random => {
            if opts.random_trials == 0 {
                return Err(Error::Empty("random trials"));
            }
            (0..opts.random_trials)
                .map(|t| {
                    let mut rng = seed::rng(seed::combine(opts.random_seed, &[t as u64]));
                    (0..ds.len()).map(|_| rng.random::<f64>()).collect()
                })
                .collect()
        }
    };
    ScoreTable::from_trials(kind, ids, trials)
}

/// `(s − min) / (max − min)`; all zeros when the range is zero.
pub fn normalize(scores: &[f64]) -> Vec<f64> {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range.is_nan() || range <= 0.0 {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|s| (s - min) / range).collect()
}

/// Normalizes every trial row independently, then averages per example.
pub fn average_normalized(table: &ScoreTable) -> Vec<f64> {
    let rows: Vec<Vec<f64>> = table.trials.iter().map(|t| normalize(t)).collect();
    let m = rows.len() as f64;
    (0..table.n_examples())
        .map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / m)
        .collect()
}
