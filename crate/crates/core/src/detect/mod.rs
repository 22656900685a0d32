//! Multi-stage authenticity pipeline: product identification with unknown
//! rejection, detail authentication, crop-averaged texture authentication
//! and the final originality average.

use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{decode_png, random_crops, resize_bilinear, CropSpec, DataError};
use crate::nn::{load_model, ops, Model, NnError, Tensor};

pub const DEFAULT_TAU: f32 = 0.6;
pub const ORIGINAL_PREFIX: &str = "original_";
pub const FAKE_PREFIX: &str = "fake_";
pub const ORIGINAL_TEXTURE_CLASS: &str = "original";
pub const PRODUCT_MODEL_FILE: &str = "product.scm";
pub const DETAIL_MODEL_FILE: &str = "detail.scm";
pub const TEXTURE_MODEL_FILE: &str = "texture.scm";

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no inputs given")]
    EmptyInput,
    #[error("product identified but no detail or texture images supplied")]
    NoSecondStageInputs,
    #[error("invalid stage models: {0}")]
    InvalidModels(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Anything that maps an image to class probabilities.
pub trait Classifier: Send + Sync {
    fn input_shape(&self) -> (usize, usize, usize);
    fn class_names(&self) -> &[String];
    fn predict(&self, image: &Tensor) -> Result<Vec<f32>, DetectError>;
}

impl Classifier for Model {
    fn input_shape(&self) -> (usize, usize, usize) {
        Model::input_shape(self)
    }

    fn class_names(&self) -> &[String] {
        Model::class_names(self)
    }

    fn predict(&self, image: &Tensor) -> Result<Vec<f32>, DetectError> {
        self.check_input(image).map_err(|e| match e {
            NnError::ShapeMismatch(m) => DetectError::ShapeMismatch(m),
            other => other.into(),
        })?;
        Ok(self.forward(image)?.into_data())
    }
}

/// The three stage models, shareable across threads.
#[derive(Clone)]
pub struct StageModels {
    product: Arc<dyn Classifier>,
    detail: Arc<dyn Classifier>,
    texture: Arc<dyn Classifier>,
    texture_original: usize,
}

impl StageModels {
    /// Checks that every detail class carries a `fake_` or `original_`
    /// prefix and that the texture model has an `original` class.
    pub fn new(
        product: Arc<dyn Classifier>,
        detail: Arc<dyn Classifier>,
        texture: Arc<dyn Classifier>,
    ) -> Result<Self, DetectError> {
        if let Some(bad) = detail
            .class_names()
            .iter()
            .find(|c| !c.starts_with(ORIGINAL_PREFIX) && !c.starts_with(FAKE_PREFIX))
        {
            return Err(DetectError::InvalidModels(format!(
                "detail class {bad:?} lacks a {FAKE_PREFIX:?}/{ORIGINAL_PREFIX:?} prefix"
            )));
        }
        let texture_original = texture
            .class_names()
            .iter()
            .position(|c| c == ORIGINAL_TEXTURE_CLASS)
            .ok_or_else(|| DetectError::InvalidModels(format!("texture model has no {ORIGINAL_TEXTURE_CLASS:?} class")))?;
        Ok(StageModels {
            product,
            detail,
            texture,
            texture_original,
        })
    }

    /// Loads `product.scm`, `detail.scm` and `texture.scm` from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, DetectError> {
        let dir = dir.as_ref();
        let load = |name: &str| -> Result<Arc<dyn Classifier>, DetectError> { Ok(Arc::new(load_model(dir.join(name))?)) };
        StageModels::new(load(PRODUCT_MODEL_FILE)?, load(DETAIL_MODEL_FILE)?, load(TEXTURE_MODEL_FILE)?)
    }

    pub fn product(&self) -> &dyn Classifier {
        self.product.as_ref()
    }

    pub fn detail(&self) -> &dyn Classifier {
        self.detail.as_ref()
    }

    pub fn texture(&self) -> &dyn Classifier {
        self.texture.as_ref()
    }

    /// Side of the square-ish canvas texture photos are resized to before
    /// cropping: twice the texture model input, so default half-size crops
    /// match the model input.
    pub fn texture_canvas(&self) -> (usize, usize) {
        let (h, w, _) = self.texture.input_shape();
        (2 * h, 2 * w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Product,
    Detail,
    Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePrediction {
    pub stage: Stage,
    pub input_id: String,
    /// In the stage model's class order.
    pub class_probabilities: IndexMap<String, f32>,
    /// `None` for the product stage.
    pub originality: Option<f32>,
}

impl StagePrediction {
    fn new(stage: Stage, input_id: &str, classes: &[String], probs: &[f32], originality: Option<f32>) -> Self {
        StagePrediction {
            stage,
            input_id: input_id.to_string(),
            class_probabilities: classes.iter().cloned().zip(probs.iter().copied()).collect(),
            originality,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ProductDecision {
    Known { class: usize, name: String, confidence: f32 },
    Unknown { confidence: f32 },
}

/// An image plus the identifier recorded in the verdict.
#[derive(Clone, Debug, PartialEq)]
pub struct Input {
    pub id: String,
    pub image: Tensor,
}

/// First 16 hex digits of the SHA-256 of the raw file bytes.
pub fn input_id(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Decodes a PNG upload and resizes it to `target`.
pub fn prepare_input(bytes: &[u8], name: &str, target: (usize, usize)) -> Result<Input, DetectError> {
    let image = resize_bilinear(&decode_png(bytes, name)?, target)?;
    Ok(Input {
        id: input_id(bytes),
        image,
    })
}

/// Max-softmax rejection: known when the top probability reaches `tau`,
/// lowest index winning ties.
pub fn decide_product(probs: &[f32], classes: &[String], tau: f32) -> ProductDecision {
    let class = ops::argmax(probs);
    let confidence = probs.get(class).copied().unwrap_or(0.0);
    if confidence >= tau {
        ProductDecision::Known {
            class,
            name: classes[class].clone(),
            confidence,
        }
    } else {
        ProductDecision::Unknown { confidence }
    }
}

pub fn identify_product(
    model: &dyn Classifier,
    image: &Tensor,
    tau: f32,
) -> Result<(ProductDecision, Vec<f32>), DetectError> {
    let probs = model.predict(image)?;
    Ok((decide_product(&probs, model.class_names(), tau), probs))
}

/// Probability mass on `original_*` classes.
pub fn detail_originality(probs: &[f32], classes: &[String]) -> f32 {
    let mass: f64 = classes
        .iter()
        .zip(probs)
        .filter(|(c, _)| c.starts_with(ORIGINAL_PREFIX))
        .map(|(_, &p)| p as f64)
        .sum();
    mass as f32
}

pub fn authenticate_detail(model: &dyn Classifier, inputs: &[Input]) -> Result<Vec<StagePrediction>, DetectError> {
    if inputs.is_empty() {
        return Err(DetectError::EmptyInput);
    }
    inputs
        .iter()
        .map(|input| {
            let probs = model.predict(&input.image)?;
            let originality = detail_originality(&probs, model.class_names());
            Ok(StagePrediction::new(Stage::Detail, &input.id, model.class_names(), &probs, Some(originality)))
        })
        .collect()
}

/// Runs the model on every crop of `input` and averages class
/// probabilities. `image_index` selects the crop stream.
pub fn authenticate_texture(
    model: &dyn Classifier,
    original_class: usize,
    input: &Input,
    crop_spec: &CropSpec,
    image_index: u64,
) -> Result<StagePrediction, DetectError> {
    let (h, w, _) = model.input_shape();
    let crops = random_crops(&input.image, crop_spec, image_index, (h, w))?;
    let n = model.class_names().len();
    let mut sums = vec![0.0f64; n];
    for crop in &crops {
        let probs = model.predict(crop)?;
        for (s, p) in sums.iter_mut().zip(&probs) {
            *s += *p as f64;
        }
    }
    let mean: Vec<f32> = sums.iter().map(|s| (s / crops.len() as f64) as f32).collect();
    let originality = mean[original_class];
    Ok(StagePrediction::new(Stage::Texture, &input.id, model.class_names(), &mean, Some(originality)))
}

/// `100 × mean(originality)` over detail and texture predictions. Values
/// are summed in sorted order in f64, so the result does not depend on the
/// order of `predictions`.
pub fn aggregate(predictions: &[StagePrediction]) -> Result<f32, DetectError> {
    let mut values: Vec<f32> = predictions.iter().filter_map(|p| p.originality).collect();
    if values.is_empty() {
        return Err(DetectError::EmptyInput);
    }
    values.sort_by(f32::total_cmp);
    let sum: f64 = values.iter().map(|&v| v as f64).sum();
    Ok((100.0 * sum / values.len() as f64) as f32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Verdict {
    pub product_class: String,
    pub product_confidence: f32,
    pub originality_percent: f32,
    /// Product prediction first, then details, then textures.
    pub stages: Vec<StagePrediction>,
}

impl Verdict {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("verdict serializes")
    }

    /// Recomputes the percentage from the recorded stage predictions.
    pub fn recomputed_percent(&self) -> Result<f32, DetectError> {
        aggregate(&self.stages)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PipelineOutcome {
    Verdict(Verdict),
    UnknownProduct { confidence: f32, prediction: StagePrediction },
}

/// Identifies the product, stopping at an unknown one; otherwise
/// authenticates every detail and texture input and averages.
pub fn run_pipeline(
    models: &StageModels,
    product: &Input,
    details: &[Input],
    textures: &[Input],
    tau: f32,
    crop_spec: &CropSpec,
) -> Result<PipelineOutcome, DetectError> {
    let (decision, probs) = identify_product(models.product(), &product.image, tau)?;
    let product_pred = StagePrediction::new(Stage::Product, &product.id, models.product().class_names(), &probs, None);
    let (name, confidence) = match decision {
        ProductDecision::Unknown { confidence } => {
            return Ok(PipelineOutcome::UnknownProduct {
                confidence,
                prediction: product_pred,
            })
        }
        ProductDecision::Known { name, confidence, .. } => (name, confidence),
    };
    if details.is_empty() && textures.is_empty() {
        return Err(DetectError::NoSecondStageInputs);
    }
    let mut stages = vec![product_pred];
    if !details.is_empty() {
        stages.extend(authenticate_detail(models.detail(), details)?);
    }
    for (i, t) in textures.iter().enumerate() {
        stages.push(authenticate_texture(models.texture(), models.texture_original, t, crop_spec, i as u64)?);
    }
    let originality_percent = aggregate(&stages)?;
    Ok(PipelineOutcome::Verdict(Verdict {
        product_class: name,
        product_confidence: confidence,
        originality_percent,
        stages,
    }))
}

/// Decodes and sizes raw uploads the way both the offline detector and the
/// service do: product and detail photos to their model inputs, texture
/// photos to the texture canvas.
pub fn prepare_session_inputs(
    models: &StageModels,
    product: (&str, &[u8]),
    details: &[(&str, &[u8])],
    textures: &[(&str, &[u8])],
) -> Result<(Input, Vec<Input>, Vec<Input>), DetectError> {
    let hw = |c: &dyn Classifier| {
        let (h, w, _) = c.input_shape();
        (h, w)
    };
    let product = prepare_input(product.1, product.0, hw(models.product()))?;
    let details = details
        .iter()
        .map(|(n, b)| prepare_input(b, n, hw(models.detail())))
        .collect::<Result<_, _>>()?;
    let textures = textures
        .iter()
        .map(|(n, b)| prepare_input(b, n, models.texture_canvas()))
        .collect::<Result<_, _>>()?;
    Ok((product, details, textures))
}
