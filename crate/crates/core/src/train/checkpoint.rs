//! Checkpoint files: an ordinary model file followed by a trailer.
//!
//! ```text
//! <model file>
//! marker     "SPOTCKPT"
//! state      u32 byte length + JSON (phase, iteration, config, sampler
//!            order/cursor/generator state, log so far)
//! velocity   per layer, same tensor layout as the model parameters
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sampler::BatchSampler;
use super::{Phase, TrainConfig, TrainError, TrainLog};
use crate::nn::{
    encode_model, read_layer_tensors, read_model, write_layer_tensors, ByteReader, ByteWriter, GradientSet, Model,
    Velocity,
};

pub const CHECKPOINT_MARKER: &[u8; 8] = b"SPOTCKPT";

/// Everything needed to continue a phase bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub velocity: Velocity,
    pub phase: Phase,
    /// Iterations completed in `phase`.
    pub iteration: usize,
    pub sampler: BatchSampler,
    pub log: TrainLog,
    pub config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct State {
    phase: Phase,
    iteration: usize,
    config: TrainConfig,
    sampler: BatchSampler,
    log: TrainLog,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(&encode_model(&self.model));
        w.bytes(CHECKPOINT_MARKER);
        let state = State {
            phase: self.phase,
            iteration: self.iteration,
            config: self.config.clone(),
            sampler: self.sampler.clone(),
            log: self.log.clone(),
        };
        w.string(&serde_json::to_string(&state).expect("checkpoint state serializes"));
        write_layer_tensors(&mut w, &self.velocity.layers);
        w.into_inner()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = ByteReader::new(bytes);
        let model = read_model(&mut r)?;
        if r.take(8)? != CHECKPOINT_MARKER {
            return Err(TrainError::Checkpoint("model file has no checkpoint trailer".into()));
        }
        let state: State =
            serde_json::from_str(&r.string()?).map_err(|e| TrainError::Checkpoint(format!("state: {e}")))?;
        let layers = read_layer_tensors(&mut r, model.config())?;
        let velocity = GradientSet { layers };
        Ok(Checkpoint {
            model,
            velocity,
            phase: state.phase,
            iteration: state.iteration,
            sampler: state.sampler,
            log: state.log,
            config: state.config,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<(), TrainError> {
    fs::write(path, checkpoint.encode())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, TrainError> {
    Checkpoint::decode(&fs::read(path)?)
}
