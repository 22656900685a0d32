use super::checkpoint::Checkpoint;
use super::sampler::BatchSampler;
use super::{
    check_compatible, replace_head, validate, IterationRecord, Phase, TrainConfig, TrainError, TrainLog,
    ValidationRecord,
};
use crate::data::{LabeledDataset, Split};
use crate::nn::{sgd_step, FreezeSelector, GradientSet, Model, NnError, Velocity};
use crate::rng::purpose;

/// One training phase, advanced an iteration at a time so callers can
/// observe progress or checkpoint between steps.
pub struct PhaseTrainer<'d> {
    dataset: &'d LabeledDataset,
    train_idx: Vec<usize>,
    config: TrainConfig,
    phase: Phase,
    model: Model,
    velocity: Velocity,
    sampler: BatchSampler,
    iteration: usize,
    log: TrainLog,
    last_batch: Option<BatchInfo>,
}

/// Shape of the most recent mini-batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchInfo {
    pub size: usize,
    /// The batch consumed the last samples of an epoch.
    pub epoch_end: bool,
}

fn shuffle_tag(phase: Phase) -> u64 {
    match phase {
        Phase::Head => purpose::SHUFFLE_HEAD,
        Phase::Finetune => purpose::SHUFFLE_FINETUNE,
    }
}

impl<'d> PhaseTrainer<'d> {
    /// Sets the freeze flags for `phase` (backbone frozen for the head
    /// phase, nothing frozen for fine-tuning) and prepares a fresh sampler
    /// and zero velocity.
    pub fn new(mut model: Model, dataset: &'d LabeledDataset, phase: Phase, config: &TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        model.set_frozen(match phase {
            Phase::Head => FreezeSelector::Backbone,
            Phase::Finetune => FreezeSelector::None,
        });
        let train_idx = dataset.indices(Split::Train);
        let sampler = BatchSampler::new(train_idx.len(), config.seed, shuffle_tag(phase));
        let velocity = GradientSet::zeros_like(&model);
        let trainer = PhaseTrainer {
            dataset,
            train_idx,
            config: config.clone(),
            phase,
            model,
            velocity,
            sampler,
            iteration: 0,
            log: TrainLog::default(),
            last_batch: None,
        };
        trainer.check_ready()?;
        Ok(trainer)
    }

    /// Continues exactly where `checkpoint` left off.
    pub fn resume(checkpoint: Checkpoint, dataset: &'d LabeledDataset) -> Result<Self, TrainError> {
        let train_idx = dataset.indices(Split::Train);
        if checkpoint.sampler.len() != train_idx.len() {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint sampled {} training images, dataset has {}",
                checkpoint.sampler.len(),
                train_idx.len()
            )));
        }
        checkpoint.config.validate()?;
        let trainer = PhaseTrainer {
            dataset,
            train_idx,
            config: checkpoint.config,
            phase: checkpoint.phase,
            model: checkpoint.model,
            velocity: checkpoint.velocity,
            sampler: checkpoint.sampler,
            iteration: checkpoint.iteration,
            log: checkpoint.log,
            last_batch: None,
        };
        trainer.check_ready()?;
        Ok(trainer)
    }

    fn check_ready(&self) -> Result<(), TrainError> {
        check_compatible(&self.model, self.dataset)?;
        let total = self.config.iterations(self.phase);
        if total > 0 && self.train_idx.is_empty() {
            return Err(TrainError::EmptySplit(Split::Train));
        }
        let validates = self.config.validation_cycle.is_some_and(|c| c <= total);
        if validates && self.dataset.indices(Split::Validation).is_empty() {
            return Err(TrainError::EmptySplit(Split::Validation));
        }
        Ok(())
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.config.iterations(self.phase)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn last_batch(&self) -> Option<BatchInfo> {
        self.last_batch
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            velocity: self.velocity.clone(),
            phase: self.phase,
            iteration: self.iteration,
            sampler: self.sampler.clone(),
            log: self.log.clone(),
            config: self.config.clone(),
        }
    }

    /// Runs one iteration. Returns `false` once the phase budget is spent.
    pub fn step(&mut self) -> Result<bool, TrainError> {
        if self.is_finished() {
            return Ok(false);
        }
        let (positions, epoch_end) = self.sampler.next_batch(self.config.batch_size);
        let samples = self.dataset.samples();
        let batch: Vec<_> = positions
            .iter()
            .map(|&p| {
                let s = &samples[self.train_idx[p]];
                (&s.image, s.label)
            })
            .collect();
        let result = self.model.batch_gradients(&batch)?;
        let lr = self.config.learning_rate(self.phase);
        match sgd_step(&mut self.model, &result.grads, lr, self.config.momentum, &mut self.velocity) {
            Ok(()) => {}
            Err(NnError::NonFiniteGradient { layer }) => {
                return Err(TrainError::NonFiniteGradient {
                    phase: self.phase,
                    iteration: self.iteration + 1,
                    layer,
                    log: Box::new(self.log.clone()),
                })
            }
            Err(e) => return Err(e.into()),
        }
        self.iteration += 1;
        self.log.iterations.push(IterationRecord {
            phase: self.phase,
            iteration: self.iteration,
            loss: result.mean_loss,
            accuracy: result.correct as f64 / result.size as f64,
        });
        self.last_batch = Some(BatchInfo {
            size: result.size,
            epoch_end,
        });
        if let Some(cycle) = self.config.validation_cycle {
            if self.iteration % cycle == 0 {
                let (loss, accuracy) = validate(&self.model, self.dataset, Split::Validation)?;
                self.log.validations.push(ValidationRecord {
                    phase: self.phase,
                    iteration: self.iteration,
                    loss,
                    accuracy,
                });
            }
        }
        Ok(true)
    }

    pub fn into_parts(self) -> (Model, TrainLog) {
        (self.model, self.log)
    }

    pub fn run(mut self) -> Result<(Model, TrainLog), TrainError> {
        while self.step()? {}
        Ok(self.into_parts())
    }
}

/// Runs one phase to completion.
pub fn train_phase(
    model: Model,
    dataset: &LabeledDataset,
    phase: Phase,
    config: &TrainConfig,
) -> Result<(Model, TrainLog), TrainError> {
    PhaseTrainer::new(model, dataset, phase, config)?.run()
}

/// Fresh head, head phase, then fine-tuning. `observer` sees the trainer
/// after every iteration (useful for checkpointing); the returned log
/// covers both phases. The new head takes the dataset's class names.
pub fn transfer_learn(
    backbone: &Model,
    dataset: &LabeledDataset,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&PhaseTrainer<'_>) -> Result<(), TrainError>,
) -> Result<(Model, TrainLog), TrainError> {
    let model = replace_head(backbone, dataset.num_classes(), config.seed)?
        .with_class_names(dataset.class_names().to_vec())?;
    let trainer = PhaseTrainer::new(model, dataset, Phase::Head, config)?;
    finish_transfer(trainer, dataset, observer)
}

/// Resumes an interrupted [`transfer_learn`] run from a checkpoint taken in
/// either phase.
pub fn transfer_learn_from(
    checkpoint: Checkpoint,
    dataset: &LabeledDataset,
    observer: &mut dyn FnMut(&PhaseTrainer<'_>) -> Result<(), TrainError>,
) -> Result<(Model, TrainLog), TrainError> {
    let trainer = PhaseTrainer::resume(checkpoint, dataset)?;
    finish_transfer(trainer, dataset, observer)
}

fn finish_transfer<'d>(
    mut trainer: PhaseTrainer<'d>,
    dataset: &'d LabeledDataset,
    observer: &mut dyn FnMut(&PhaseTrainer<'_>) -> Result<(), TrainError>,
) -> Result<(Model, TrainLog), TrainError> {
    loop {
        while trainer.step()? {
            observer(&trainer)?;
        }
        if trainer.phase() == Phase::Finetune {
            return Ok(trainer.into_parts());
        }
        let config = trainer.config().clone();
        let (model, head_log) = trainer.into_parts();
        trainer = PhaseTrainer::new(model, dataset, Phase::Finetune, &config)?;
        // The fine-tuning log continues the head log so that checkpoints
        // taken in either phase carry the whole history.
        trainer.log = head_log;
    }
}
