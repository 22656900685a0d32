//! Backbone pretraining on the synthetic eight-class source task, standing
//! in for large-scale pretrained weights.

use super::runner::PhaseTrainer;
use super::{Phase, TrainConfig, TrainError, TrainLog};
use crate::data::{split_dataset, synth_dataset, SynthSpec, SynthTask};
use crate::nn::{build_model, Model, ModelConfig};

/// Below this validation accuracy at the cap, the build is considered
/// broken rather than merely under-trained.
pub const MIN_SOURCE_ACCURACY: f64 = 0.6;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    /// Training images per class (validation images come on top).
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub noise_level: f32,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub iteration_cap: usize,
    /// Validation cadence; training stops at the first check reaching
    /// `target_accuracy`.
    pub check_every: usize,
    pub target_accuracy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            train_per_class: 300,
            val_per_class: 60,
            noise_level: crate::data::synth::DEFAULT_NOISE_LEVEL,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            iteration_cap: 2000,
            check_every: 50,
            target_accuracy: 0.9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: Model,
    pub log: TrainLog,
    pub validation_accuracy: f64,
    pub iterations: usize,
}

/// Trains a micro network on source8 until validation accuracy reaches the
/// target or the iteration cap is hit.
pub fn pretrain_source_task(config: &PretrainConfig, seed: u64) -> Result<PretrainOutcome, TrainError> {
    if config.iteration_cap == 0 {
        return Err(TrainError::DidNotConverge {
            accuracy: 0.0,
            iterations: 0,
        });
    }
    if config.check_every == 0 {
        return Err(TrainError::InvalidConfig("check_every must be at least 1".into()));
    }
    let spec = SynthSpec {
        noise_level: config.noise_level,
        ..SynthSpec::new(SynthTask::Source8, config.train_per_class + config.val_per_class, seed)
    };
    let dataset = split_dataset(&synth_dataset(&spec)?, config.val_per_class, 0, seed)?;
    let model = build_model(ModelConfig::micro(dataset.num_classes()), seed)?
        .with_class_names(dataset.class_names().to_vec())?;
    let train_config = TrainConfig {
        batch_size: config.batch_size,
        head_iterations: 0,
        finetune_iterations: config.iteration_cap,
        validation_cycle: Some(config.check_every),
        lr_head: 0.0,
        lr_finetune: config.learning_rate,
        momentum: config.momentum,
        seed,
    };
    let mut trainer = PhaseTrainer::new(model, &dataset, Phase::Finetune, &train_config)?;
    let mut accuracy = 0.0;
    while trainer.step()? {
        if let Some(v) = trainer.log().validations.last().filter(|v| v.iteration == trainer.iteration()) {
            accuracy = v.accuracy;
            if accuracy >= config.target_accuracy {
                break;
            }
        }
    }
    let iterations = trainer.iteration();
    if trainer.log().validations.last().map(|v| v.iteration) != Some(iterations) {
        accuracy = super::validate(trainer.model(), &dataset, crate::data::Split::Validation)?.1;
    }
    if accuracy < MIN_SOURCE_ACCURACY {
        return Err(TrainError::DidNotConverge { accuracy, iterations });
    }
    let (model, log) = trainer.into_parts();
    Ok(PretrainOutcome {
        model,
        log,
        validation_accuracy: accuracy,
        iterations,
    })
}
