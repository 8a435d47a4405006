//! Minibatch training with validation-based model selection, and
//! evaluation reports.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::BcCategory;
use crate::model::{predict, DropoutMasks, Example, Model, ModelConfig, ModelError};
use crate::nn::{optimizer_step, NnError, OptimizerConfig, OptimizerKind, OptimizerState, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("feature shape mismatch: {0}")]
    FeatureShapeMismatch(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Epochs without a validation-accuracy improvement before stopping.
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_epochs: 50,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adaptive,
            early_stop_patience: 5,
            seed: 1234,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(TrainError::InvalidConfig("early_stop_patience must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig("learning_rate must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig { kind: self.optimizer, learning_rate: self.learning_rate, ..OptimizerConfig::default() }
    }
}

/// Owned features for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub grid: Vec<f32>,
    pub acoustic: Vec<f32>,
    pub listener: usize,
    pub target: BcCategory,
}

impl LabeledExample {
    pub fn example(&self) -> Example<'_, f32> {
        Example { grid: &self.grid, acoustic: &self.acoustic, listener: self.listener }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy of the training-mode (dropout on) predictions made during the epoch.
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the selected model.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_acc\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.train_loss, e.train_acc, e.val_acc);
        }
        out
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.best_epoch)
    }
}

pub struct TrainOutcome {
    pub best: Model<f32>,
    pub last: Model<f32>,
    pub optimizer: OptimizerState<f32>,
    pub history: TrainHistory,
}

fn check_shapes(config: &ModelConfig, set: &[LabeledExample], name: &str) -> Result<()> {
    let grid = if config.use_lexical { config.lexical.n_words * config.lexical.word_dim } else { 0 };
    let acoustic = if config.use_acoustic { config.acoustic.frames()? * config.acoustic.feature_kind.dim() } else { 0 };
    for (i, ex) in set.iter().enumerate() {
        if config.use_lexical && ex.grid.len() != grid {
            return Err(TrainError::FeatureShapeMismatch(format!(
                "{name}[{i}]: lexical grid has {} values, model expects {grid}",
                ex.grid.len()
            )));
        }
        if config.use_acoustic && ex.acoustic.len() != acoustic {
            return Err(TrainError::FeatureShapeMismatch(format!(
                "{name}[{i}]: acoustic matrix has {} values, model expects {acoustic}",
                ex.acoustic.len()
            )));
        }
    }
    Ok(())
}

/// Trains from a seeded initialization and returns the model with the best
/// validation accuracy (earliest epoch on ties).
pub fn train(
    train_set: &[LabeledExample],
    validation_set: &[LabeledExample],
    config: &TrainConfig,
    model_config: &ModelConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if validation_set.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    check_shapes(model_config, train_set, "train")?;
    check_shapes(model_config, validation_set, "validation")?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model: Model<f32> = Model::init(model_config, &mut init_rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let optim = config.optimizer_config();
    let mut state = OptimizerState::new();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Model<f32>)> = None;
    let mut stale = 0;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(Example<f32>, usize)> =
                chunk.iter().map(|&i| (train_set[i].example(), train_set[i].target.index())).collect();
            let masks: Vec<Option<DropoutMasks<f32>>> = chunk.iter().map(|_| Some(model.sample_masks(&mut rng))).collect();
            let (loss, grads, probs) = model.batch_grads(&batch, &masks)?;
            loss_sum += loss as f64 * chunk.len() as f64;
            correct += probs.iter().zip(chunk).filter(|(p, &i)| predict(p) == train_set[i].target).count();
            let g: Vec<&Tensor<f32>> = grads.tensors().into_iter().map(|(_, t)| t).collect();
            optimizer_step(&mut model.tensors_mut(), &g, &mut state, &optim)?;
        }
        let val_acc = evaluate(&model, validation_set)?.accuracy;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_acc,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train_acc {:.4} val_acc {:.4}",
            record.train_loss,
            record.train_acc,
            record.val_acc
        );
        history.epochs.push(record);
        if best.as_ref().is_none_or(|(acc, _)| val_acc > *acc) {
            best = Some((val_acc, model.clone()));
            history.best_epoch = history.epochs.len() - 1;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.early_stop_patience {
                break;
            }
        }
    }
    let best = best.map(|(_, m)| m).unwrap_or_else(|| model.clone());
    Ok(TrainOutcome { best, last: model, optimizer: state, history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Rows are true classes, columns predicted classes.
    pub confusion: [[usize; 3]; 3],
    pub precision: [f64; 3],
    pub recall: [f64; 3],
    pub n_instances: usize,
}

impl EvalReport {
    pub fn from_predictions(truth: &[BcCategory], predicted: &[BcCategory]) -> Self {
        assert_eq!(truth.len(), predicted.len());
        let mut confusion = [[0usize; 3]; 3];
        for (t, p) in truth.iter().zip(predicted) {
            confusion[t.index()][p.index()] += 1;
        }
        let n = truth.len();
        let trace: usize = (0..3).map(|k| confusion[k][k]).sum();
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let mut precision = [0.0; 3];
        let mut recall = [0.0; 3];
        for k in 0..3 {
            let col: usize = (0..3).map(|r| confusion[r][k]).sum();
            let row: usize = confusion[k].iter().sum();
            precision[k] = ratio(confusion[k][k], col);
            recall[k] = ratio(confusion[k][k], row);
        }
        Self { accuracy: ratio(trace, n), confusion, precision, recall, n_instances: n }
    }

    /// Aligned confusion matrix plus per-class metrics.
    pub fn to_text(&self) -> String {
        let labels = BcCategory::ALL.map(BcCategory::label);
        let mut out = String::new();
        let _ = writeln!(out, "accuracy: {:.4} ({} instances)", self.accuracy, self.n_instances);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:>12} | {:>10} {:>10} {:>10}", "true\\pred", labels[0], labels[1], labels[2]);
        let _ = writeln!(out, "{}", "-".repeat(47));
        for (k, row) in self.confusion.iter().enumerate() {
            let _ = writeln!(out, "{:>12} | {:>10} {:>10} {:>10}", labels[k], row[0], row[1], row[2]);
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "{:>12} | {:>10} {:>10}", "class", "precision", "recall");
        for (k, label) in labels.iter().enumerate() {
            let _ = writeln!(out, "{:>12} | {:>10.4} {:>10.4}", label, self.precision[k], self.recall[k]);
        }
        out
    }
}

/// Eval-mode predictions for every example, in input order.
pub fn predictions(model: &Model<f32>, set: &[LabeledExample]) -> Result<Vec<BcCategory>> {
    set.par_iter()
        .map(|ex| Ok(predict(&model.predict_proba(&ex.example())?)))
        .collect()
}

pub fn evaluate(model: &Model<f32>, set: &[LabeledExample]) -> Result<EvalReport> {
    let predicted = predictions(model, set)?;
    let truth: Vec<BcCategory> = set.iter().map(|e| e.target).collect();
    Ok(EvalReport::from_predictions(&truth, &predicted))
}
