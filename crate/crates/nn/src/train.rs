//! Mini-batch training with early stopping on validation loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::{Mode, ModelGraph, Named};
use crate::optim::{adam_step, DEFAULT_LR};
use crate::scalar::Scalar;

/// A dataset the training loop can draw mini-batches from.
pub trait BatchSource<S: Scalar> {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inputs and head targets for the given example indices.
    fn batch(&self, indices: &[usize]) -> Result<(Named<S>, Named<S>)>;

    /// Partition of `0..len()` into batches for one epoch. The default
    /// shuffles and chunks; sources with variable-length examples override it
    /// to keep each batch homogeneous.
    fn plan(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }

    /// Batches for evaluation, in a fixed order.
    fn eval_plan(&self, batch_size: usize) -> Vec<Vec<usize>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            max_epochs: 100,
            patience: 8,
            learning_rate: DEFAULT_LR,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Entry 0 is the untrained model (train loss evaluated, no update).
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl History {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs[self.best_epoch].val_loss
    }
}

/// Mean inference-mode loss over a whole dataset.
pub fn evaluate<S: Scalar>(
    model: &ModelGraph<S>,
    data: &dyn BatchSource<S>,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for idx in data.eval_plan(batch_size) {
        let (inputs, targets) = data.batch(&idx)?;
        total += model.evaluate_loss(&inputs, &targets)? * idx.len() as f64;
        count += idx.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Trains until validation loss has not improved for `patience` epochs or
/// `max_epochs` is reached, then restores the best-validation weights.
pub fn train_loop<S: Scalar>(
    model: &mut ModelGraph<S>,
    train: &dyn BatchSource<S>,
    val: &dyn BatchSource<S>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    if train.is_empty() || val.is_empty() {
        return Err(NnError::Input("training and validation sets must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    model.reseed(cfg.seed.wrapping_add(1));
    let initial = EpochRecord {
        epoch: 0,
        train_loss: evaluate(model, train, cfg.batch_size)?,
        val_loss: evaluate(model, val, cfg.batch_size)?,
    };
    on_epoch(&initial);
    let mut history = History {
        epochs: vec![initial],
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best = model.clone();
    for epoch in 1..=cfg.max_epochs {
        let mut total = 0.0;
        let mut count = 0usize;
        for idx in train.plan(cfg.batch_size, &mut rng) {
            let (inputs, targets) = train.batch(&idx)?;
            let (loss, mut grads) = model.backward_weights(&inputs, &targets, Mode::Train)?;
            grads.clip_global_norm(cfg.clip_norm);
            adam_step(model, &grads, cfg.learning_rate);
            total += loss * idx.len() as f64;
            count += idx.len();
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / count.max(1) as f64,
            val_loss: evaluate(model, val, cfg.batch_size)?,
        };
        on_epoch(&record);
        if record.val_loss < history.best_val_loss() {
            history.best_epoch = epoch;
            best = model.clone();
        }
        history.epochs.push(record);
        if epoch - history.best_epoch >= cfg.patience {
            history.stopped_early = true;
            break;
        }
    }
    *model = best;
    Ok(history)
}
