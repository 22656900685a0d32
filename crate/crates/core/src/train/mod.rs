//! Two-phase transfer learning: a frozen-backbone head phase followed by
//! full fine-tuning, with periodic validation, logging and checkpoints.

mod checkpoint;
mod head;
mod pretrain;
mod runner;
mod sampler;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, LabeledDataset, Split};
use crate::nn::{ops, Model, NnError};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MARKER};
pub use head::replace_head;
pub use pretrain::{pretrain_source_task, PretrainConfig, PretrainOutcome};
pub use runner::{train_phase, transfer_learn, transfer_learn_from, BatchInfo, PhaseTrainer};
pub use sampler::BatchSampler;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("the {0} split is empty")]
    EmptySplit(Split),
    #[error("non-finite gradient in layer {layer} at {phase} iteration {iteration}")]
    NonFiniteGradient {
        phase: Phase,
        iteration: usize,
        layer: usize,
        /// Everything logged before the failing step.
        log: Box<TrainLog>,
    },
    #[error("model has no Flatten layer to attach a head to")]
    NoFlattenLayer,
    #[error("source task reached only {accuracy:.3} validation accuracy after {iterations} iterations")]
    DidNotConverge { accuracy: f64, iterations: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset does not fit the model: {0}")]
    Incompatible(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Backbone frozen, only the head learns.
    Head,
    /// Every layer learns.
    Finetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Head => "head",
            Phase::Finetune => "finetune",
        })
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "head" => Ok(Phase::Head),
            "finetune" => Ok(Phase::Finetune),
            other => Err(format!("unknown phase {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub head_iterations: usize,
    pub finetune_iterations: usize,
    /// Iterations between validation passes; `None` disables validation.
    pub validation_cycle: Option<usize>,
    pub lr_head: f32,
    pub lr_finetune: f32,
    pub momentum: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            head_iterations: 200,
            finetune_iterations: 200,
            validation_cycle: Some(50),
            lr_head: 1e-3,
            lr_finetune: 1e-4,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        TrainConfig {
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.validation_cycle == Some(0) {
            return Err(TrainError::InvalidConfig("validation_cycle must be at least 1".into()));
        }
        for (name, v) in [("lr_head", self.lr_head), ("lr_finetune", self.lr_finetune)] {
            if !v.is_finite() || v < 0.0 {
                return Err(TrainError::InvalidConfig(format!("{name} = {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }

    pub fn iterations(&self, phase: Phase) -> usize {
        match phase {
            Phase::Head => self.head_iterations,
            Phase::Finetune => self.finetune_iterations,
        }
    }

    pub fn learning_rate(&self, phase: Phase) -> f32 {
        match phase {
            Phase::Head => self.lr_head,
            Phase::Finetune => self.lr_finetune,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub phase: Phase,
    /// 1-based within the phase.
    pub iteration: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub phase: Phase,
    pub iteration: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub iterations: Vec<IterationRecord>,
    pub validations: Vec<ValidationRecord>,
}

impl TrainLog {
    pub fn extend(&mut self, other: TrainLog) {
        self.iterations.extend(other.iterations);
        self.validations.extend(other.validations);
    }

    pub fn phase_iterations(&self, phase: Phase) -> impl Iterator<Item = &IterationRecord> {
        self.iterations.iter().filter(move |r| r.phase == phase)
    }

    /// Counting both phases, the first iteration whose validation accuracy
    /// reached `target`.
    pub fn iterations_to_accuracy(&self, target: f64) -> Option<usize> {
        let head_len = self.phase_iterations(Phase::Head).count();
        self.validations.iter().find(|v| v.accuracy >= target).map(|v| match v.phase {
            Phase::Head => v.iteration,
            Phase::Finetune => head_len + v.iteration,
        })
    }
}

/// Mean cross-entropy and top-1 accuracy over one split. Does not touch the
/// model.
pub fn validate(model: &Model, dataset: &LabeledDataset, split: Split) -> Result<(f64, f64), TrainError> {
    check_compatible(model, dataset)?;
    let items = dataset.split_items(split);
    if items.is_empty() {
        return Err(TrainError::EmptySplit(split));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (image, label) in &items {
        let probs = model.forward(image)?;
        loss += ops::cross_entropy(probs.data(), *label)?;
        if ops::argmax(probs.data()) == *label {
            correct += 1;
        }
    }
    Ok((loss / items.len() as f64, correct as f64 / items.len() as f64))
}

pub(crate) fn check_compatible(model: &Model, dataset: &LabeledDataset) -> Result<(), TrainError> {
    if dataset.num_classes() != model.num_classes() {
        return Err(TrainError::Incompatible(format!(
            "dataset has {} classes, model outputs {}",
            dataset.num_classes(),
            model.num_classes()
        )));
    }
    if let Some(dims) = dataset.image_dims() {
        if dims != model.input_shape() {
            return Err(TrainError::Incompatible(format!(
                "images are {dims:?}, model expects {:?}",
                model.input_shape()
            )));
        }
    }
    Ok(())
}
