//! From-scratch CNN engine: tensors, the VGG layer set, hand-derived
//! gradients, momentum SGD, layer freezing and model files.

mod config;
mod format;
mod model;
pub mod ops;
mod optim;
mod tensor;

use thiserror::Error;

pub use config::{ActShape, LayerSpec, ModelConfig, HEAD_HIDDEN_UNITS};
pub use format::{decode_model, encode_model, load_model, save_model, FORMAT_VERSION, MAGIC};
pub(crate) use format::{read_layer_tensors, read_model, write_layer_tensors, ByteReader, ByteWriter};
pub use model::{
    backward, build_model, default_class_names, glorot_layer, ActivationPattern, BatchResult, FreezeSelector, GradientSet,
    LayerParams, Model, ParamsF64,
};
pub use optim::{sgd_step, Velocity};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("incompatible layers at index {index}: {first} -> {second} ({detail})")]
    IncompatibleLayers {
        index: usize,
        first: String,
        second: String,
        detail: String,
    },
    #[error("zero extent: {0}")]
    ZeroExtent(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("max pooling needs even extents, got {h}x{w}")]
    OddExtent { h: usize, w: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },
    #[error("{names} class names for a {outputs}-way output")]
    ClassCount { names: usize, outputs: usize },
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model format version {0}")]
    VersionUnsupported(u32),
    #[error("model file is truncated")]
    TruncatedFile,
    #[error("layer {layer}: tensor header does not match config ({detail})")]
    ShapeHeaderMismatch { layer: usize, detail: String },
    #[error("malformed model config: {0}")]
    ConfigSyntax(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
