//! Dataset tooling: frame sampling from decoded clips, bilinear resizing,
//! directory ingestion, per-class splits, random texture crops and the
//! synthetic stand-in datasets.

mod crops;
mod frames;
mod image_io;
mod ingest;
mod split;
pub mod synth;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{NnError, Tensor};

pub use crops::{crop_dataset, crop_positions, random_crops, CropSpec, DEFAULT_CROPS_PER_IMAGE};
pub use frames::{sample_frames, SamplingSpec};
pub use image_io::{decode_png, encode_png, load_png, resize_bilinear, save_png};
pub use ingest::{
    apply_manifest, ingest_directory, manifest_records, read_manifest, write_dataset_dir, write_manifest, ManifestRecord,
    MANIFEST_FILE,
};
pub use split::{split_dataset, DEFAULT_TEST_PER_CLASS, DEFAULT_VAL_PER_CLASS};
pub use synth::{pose_for, render, synth_dataset, Pose, SynthSpec, SynthTask, DEFAULT_NOISE_LEVEL};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("clip directory {0} contains no frames")]
    EmptyClip(PathBuf),
    #[error("cannot decode image {path}: {reason}")]
    UndecodableImage { path: String, reason: String },
    #[error("zero extent in {0}")]
    ZeroExtent(String),
    #[error("no class directories under {0}")]
    NoClasses(PathBuf),
    #[error("class {0:?} has no images")]
    NoImagesForClass(String),
    #[error("class {class:?} has {have} samples but needs more than {need}")]
    ClassTooSmall { class: String, have: usize, need: usize },
    #[error("crop {crop_h}x{crop_w} does not fit in a {h}x{w} image")]
    CropTooLarge {
        crop_h: usize,
        crop_w: usize,
        h: usize,
        w: usize,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error(transparent)]
    Tensor(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    pub split: Split,
    /// Stable identity, e.g. the path relative to the dataset root.
    pub source_id: String,
}

/// Images with integer labels, a class-name table and split assignments.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    samples: Vec<Sample>,
    class_names: Vec<String>,
}

impl LabeledDataset {
    /// Checks label ranges and that all images share one `h × w × 3` shape.
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>) -> Result<Self, DataError> {
        if class_names.is_empty() {
            return Err(DataError::Invalid("no classes".into()));
        }
        let mut dims = None;
        for s in &samples {
            if s.label >= class_names.len() {
                return Err(DataError::Invalid(format!(
                    "sample {} has label {} but only {} classes exist",
                    s.source_id,
                    s.label,
                    class_names.len()
                )));
            }
            let d = s.image.image_dims()?;
            if d.2 != 3 {
                return Err(DataError::Invalid(format!("sample {} is not RGB", s.source_id)));
            }
            match dims {
                None => dims = Some(d),
                Some(prev) if prev != d => {
                    return Err(DataError::Invalid(format!(
                        "sample {} is {:?}, others are {:?}",
                        s.source_id, d, prev
                    )))
                }
                _ => {}
            }
        }
        Ok(LabeledDataset { samples, class_names })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [Sample] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(h, w, c)` shared by all images, if any exist.
    pub fn image_dims(&self) -> Option<(usize, usize, usize)> {
        self.samples.first().and_then(|s| s.image.image_dims().ok())
    }

    /// Positions of the samples in `split`, in dataset order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// `(image, label)` pairs of one split.
    pub fn split_items(&self, split: Split) -> Vec<(&Tensor, usize)> {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| (&s.image, s.label))
            .collect()
    }

    /// Number of samples per class within `split`.
    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for s in self.samples.iter().filter(|s| s.split == split) {
            counts[s.label] += 1;
        }
        counts
    }

    /// Reassigns every sample to `split`.
    pub fn set_all_splits(&mut self, split: Split) {
        for s in &mut self.samples {
            s.split = split;
        }
    }

    /// Keeps only samples of the given split.
    pub fn filter_split(&self, split: Split) -> LabeledDataset {
        LabeledDataset {
            samples: self.samples.iter().filter(|s| s.split == split).cloned().collect(),
            class_names: self.class_names.clone(),
        }
    }
}
