//! Minibatch SGD with momentum, epoch-boundary checkpoints and per-epoch
//! correctness tracking.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;

use crate::checkpoint::CheckpointStore;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, ModelSpec, Params, Trace};
use crate::seed;

const SHUFFLE_TAG: u64 = 0x5348_5546; // "SHUF"

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Epoch indices to checkpoint; 0 is the untrained initialization.
    pub checkpoint_epochs: BTreeSet<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
            checkpoint_epochs: BTreeSet::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must be in [0, 1)", self.momentum));
        }
        if let Some(&e) = self.checkpoint_epochs.iter().next_back() {
            if e > self.epochs {
                return bad(format!("checkpoint epoch {e} exceeds epochs {}", self.epochs));
            }
        }
        Ok(())
    }
}

/// `(example, epoch)` → correct at the end of that epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrectnessMatrix {
    n_examples: usize,
    epochs: usize,
    cells: Vec<bool>,
}

impl CorrectnessMatrix {
    pub fn new(n_examples: usize, epochs: usize) -> Self {
        CorrectnessMatrix {
            n_examples,
            epochs,
            cells: vec![false; n_examples * epochs],
        }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let epochs = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != epochs) {
            return Err(Error::InvalidConfig("ragged correctness rows".into()));
        }
        Ok(CorrectnessMatrix {
            n_examples: rows.len(),
            epochs,
            cells: rows.concat(),
        })
    }

    pub fn n_examples(&self) -> usize {
        self.n_examples
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn get(&self, example: usize, epoch: usize) -> bool {
        self.cells[example * self.epochs + epoch]
    }

    fn set(&mut self, example: usize, epoch: usize, v: bool) {
        self.cells[example * self.epochs + epoch] = v;
    }

    pub fn row(&self, example: usize) -> &[bool] {
        &self.cells[example * self.epochs..(example + 1) * self.epochs]
    }

    /// The first `epochs` columns.
    pub fn truncate(&self, epochs: usize) -> CorrectnessMatrix {
        let epochs = epochs.min(self.epochs);
        let cells = (0..self.n_examples)
            .flat_map(|i| self.row(i)[..epochs].iter().copied())
            .collect();
        CorrectnessMatrix {
            n_examples: self.n_examples,
            epochs,
            cells,
        }
    }

    pub fn column_accuracy(&self, epoch: usize) -> f64 {
        let hits = (0..self.n_examples).filter(|&i| self.get(i, epoch)).count();
        hits as f64 / self.n_examples.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub final_params: Params,
    pub test_accuracy: f64,
    pub correctness: CorrectnessMatrix,
    pub checkpoints_written: Vec<u64>,
    /// Mean minibatch loss per epoch.
    pub epoch_loss: Vec<f64>,
}

impl TrainResult {
    pub fn train_accuracy(&self) -> f64 {
        self.correctness.column_accuracy(self.correctness.epochs() - 1)
    }
}

fn check_dims(spec: &ModelSpec, ds: &Dataset) -> Result<()> {
    if ds.input_dim != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "dataset input dim vs model",
            expected: spec.input_dim(),
            got: ds.input_dim,
        });
    }
    if ds.num_classes != spec.num_classes() {
        return Err(Error::DimensionMismatch {
            context: "dataset classes vs model",
            expected: spec.num_classes(),
            got: ds.num_classes,
        });
    }
    Ok(())
}

/// Trains from `init_params(spec, cfg.seed)`.
///
/// The epoch-0 checkpoint is written before any update; epoch `e` is written
/// after the `e`-th pass. `store` may be `None` only when no checkpoints are
/// requested.
pub fn train(
    spec: &ModelSpec,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &TrainConfig,
    store: Option<&CheckpointStore>,
) -> Result<TrainResult> {
    spec.validate()?;
    cfg.validate()?;
    check_dims(spec, train_ds)?;
    check_dims(spec, test_ds)?;
    if train_ds.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if store.is_none() && !cfg.checkpoint_epochs.is_empty() {
        return Err(Error::InvalidConfig(
            "checkpoint epochs requested without a store".into(),
        ));
    }

    let mut params = nn::init_params(spec, cfg.seed)?;
    let mut written = Vec::new();
    let mut checkpoint = |epoch: usize, p: &Params| -> Result<()> {
        if let (true, Some(store)) = (cfg.checkpoint_epochs.contains(&epoch), store) {
            store.save(epoch as u64, p)?;
            written.push(epoch as u64);
        }
        Ok(())
    };
    checkpoint(0, &params)?;

    let n = train_ds.len();
    let mut grad = params.zeros_like();
    let mut velocity = params.zeros_like();
    let mut trace = Trace::new(&params);
    let mut correctness = CorrectnessMatrix::new(n, cfg.epochs);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        let mut rng = seed::rng(seed::combine(cfg.seed, &[SHUFFLE_TAG, epoch as u64]));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            grad.fill_zero();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &train_ds.examples[i];
                batch_loss += trace.accumulate_gradient(&params, &ex.x, ex.y, scale, &mut grad)?;
            }
            loss_sum += batch_loss * scale;
            batches += 1;
            // v ← μ v − η g ; θ ← θ + v
            for (v, g) in velocity.iter_flat_mut().zip(grad.iter_flat()) {
                *v = cfg.momentum * *v - cfg.learning_rate * g;
            }
            params.add_scaled(1.0, &velocity);
        }
        if !params.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "training diverged (non-finite parameters) in epoch {}",
                epoch + 1
            )));
        }
        epoch_loss.push(loss_sum / batches as f64);

        for (i, ex) in train_ds.examples.iter().enumerate() {
            trace.forward(&params, &ex.x)?;
            correctness.set(i, epoch, nn::argmax(trace.probs()) == ex.y);
        }
        checkpoint(epoch + 1, &params)?;
    }

    let test_accuracy = evaluate(&params, test_ds)?;
    Ok(TrainResult {
        final_params: params,
        test_accuracy,
        correctness,
        checkpoints_written: written,
        epoch_loss,
    })
}

/// Fraction of examples whose arg-max prediction (lowest index on ties)
/// equals the label.
pub fn evaluate(params: &Params, ds: &Dataset) -> Result<f64> {
    if ds.input_dim != params.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "dataset input dim vs params",
            expected: params.input_dim(),
            got: ds.input_dim,
        });
    }
    if ds.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut trace = Trace::new(params);
    let mut hits = 0usize;
    for ex in &ds.examples {
        trace.forward(params, &ex.x)?;
        if nn::argmax(trace.probs()) == ex.y {
            hits += 1;
        }
    }
    Ok(hits as f64 / ds.len() as f64)
}

/// Number of correct→incorrect transitions between consecutive epochs per
/// example. Examples never classified correctly get `epochs + 1`.
pub fn forget_counts(correctness: &CorrectnessMatrix) -> Result<Vec<u32>> {
    if correctness.epochs() == 0 || correctness.n_examples() == 0 {
        return Err(Error::Empty("correctness matrix"));
    }
    let never = correctness.epochs() as u32 + 1;
    Ok((0..correctness.n_examples())
        .map(|i| {
            let row = correctness.row(i);
            if !row.iter().any(|&c| c) {
                return never;
            }
            row.windows(2).filter(|w| w[0] && !w[1]).count() as u32
        })
        .collect())
}
