//! Training protocol and evaluation metrics.
//!
//! Training is plain SGD with momentum over shuffled mini-batches, the last
//! partial batch included. Evaluation reduces everything to a 3x3 confusion
//! matrix (rows are true levels, columns predictions) from which accuracy,
//! per-class recall, and macro-F1 are derived. Argmax ties resolve to the
//! lowest class index.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::EngineError;
use crate::models::{Model, ModelError};
use crate::pamap2::IntensityLevel;
use crate::preprocess::WindowSet;

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid hyperparameter: {0}")]
    Param(String),
    #[error("empty example set")]
    EmptySet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            learning_rate: 0.01,
            epochs: 15,
            batch_size: 10,
            momentum: 0.9,
            seed: 42,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(TrainError::Param(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Param("batch_size must be at least 1".into()));
        }
        if !self.momentum.is_finite() || self.momentum < 0.0 {
            return Err(TrainError::Param(format!(
                "momentum must be non-negative, got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Trains in place and returns the mean loss per epoch (length = epochs).
/// Epoch means are example-weighted so the partial final batch does not
/// distort them.
pub fn train(
    model: &mut Model,
    train_set: &WindowSet,
    hp: &Hyperparams,
) -> Result<Vec<f64>, TrainError> {
    hp.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySet);
    }
    let n = train_set.len();
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(hp.epochs);
    for _ in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(hp.batch_size) {
            let batch = train_set.batch_tensor(chunk);
            let labels = train_set.labels(chunk);
            let (mut tape, logits) = model.forward(&batch, true)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            loss_sum += tape.value(loss).data()[0] * chunk.len() as f64;
            model.store_mut().zero_grads();
            tape.backward(loss, model.store_mut())?;
            model
                .store_mut()
                .sgd_momentum_step(hp.learning_rate, hp.momentum);
        }
        history.push(loss_sum / n as f64);
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    counts: [[u64; 3]; 3],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: [[u64; 3]; 3]) -> Self {
        ConfusionMatrix { counts }
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth][pred] += 1;
    }

    pub fn counts(&self) -> &[[u64; 3]; 3] {
        &self.counts
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (mine, theirs) in self.counts.iter_mut().zip(&other.counts) {
            for (m, t) in mine.iter_mut().zip(theirs) {
                *m += t;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let trace: u64 = (0..3).map(|i| self.counts[i][i]).sum();
        trace as f64 / total as f64
    }

    pub fn per_class_recall(&self) -> [f64; 3] {
        let mut recall = [0.0; 3];
        for (i, row) in self.counts.iter().enumerate() {
            let truth: u64 = row.iter().sum();
            if truth > 0 {
                recall[i] = row[i] as f64 / truth as f64;
            }
        }
        recall
    }

    /// Unweighted mean of per-class F1; a class with no true or predicted
    /// examples contributes 0.
    pub fn macro_f1(&self) -> f64 {
        let mut sum = 0.0;
        for c in 0..3 {
            let tp = self.counts[c][c] as f64;
            let truth: u64 = self.counts[c].iter().sum();
            let pred: u64 = (0..3).map(|r| self.counts[r][c]).sum();
            let denom = truth as f64 + pred as f64;
            if denom > 0.0 {
                sum += 2.0 * tp / denom;
            }
        }
        sum / 3.0
    }

    /// Each nonempty row rescaled to sum to 100; empty rows stay all zero.
    pub fn row_normalize(&self) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in self.counts.iter().enumerate() {
            let total: u64 = row.iter().sum();
            if total > 0 {
                for (j, &v) in row.iter().enumerate() {
                    out[i][j] = 100.0 * v as f64 / total as f64;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_recall: [f64; 3],
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs the model in eval mode over the whole set and derives all metrics
/// from the resulting confusion matrix.
pub fn evaluate(model: &mut Model, test_set: &WindowSet) -> Result<EvalResult, TrainError> {
    if test_set.is_empty() {
        return Err(TrainError::EmptySet);
    }
    let classes = model.spec().n_classes;
    if classes != IntensityLevel::ALL.len() {
        return Err(TrainError::Param(format!(
            "evaluation expects 3 classes, model has {classes}"
        )));
    }
    let mut cm = ConfusionMatrix::new();
    let all: Vec<usize> = (0..test_set.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let batch = test_set.batch_tensor(chunk);
        let labels = test_set.labels(chunk);
        let logits = model.logits(&batch)?;
        for (r, &truth) in labels.iter().enumerate() {
            let row = &logits.data()[r * classes..(r + 1) * classes];
            cm.record(truth, argmax(row));
        }
    }
    Ok(EvalResult {
        accuracy: cm.accuracy(),
        macro_f1: cm.macro_f1(),
        per_class_recall: cm.per_class_recall(),
        confusion: cm,
    })
}
