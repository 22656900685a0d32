//! Subcommands of the `spotcheck` binary.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use spotcheck::data::{
    apply_manifest, crop_dataset, ingest_directory, load_png, random_crops, read_manifest, sample_frames, save_png,
    split_dataset, synth_dataset, write_dataset_dir, write_manifest, CropSpec, DataError, LabeledDataset, SamplingSpec,
    Split, SynthSpec, SynthTask, DEFAULT_CROPS_PER_IMAGE, MANIFEST_FILE,
};
use spotcheck::detect::{DetectError, PipelineOutcome, StageModels, DEFAULT_TAU};
use spotcheck::eval::{confusion_matrix, confusion_matrix_with, export_curves, report, EvalError};
use spotcheck::nn::{build_model, load_model, save_model, Model, ModelConfig, NnError};
use spotcheck::train::{
    load_checkpoint, pretrain_source_task, save_checkpoint, transfer_learn, transfer_learn_from, PhaseTrainer,
    PretrainConfig, TrainConfig, TrainError,
};

use crate::service::{self, AppState, ServiceConfig, ServiceError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Parser)]
#[command(name = "spotcheck", version, about = "Counterfeit detection: data tools, training, evaluation and serving")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory (PNGs plus manifest).
    Synth(SynthArgs),
    /// Take every n-th frame of a clip directory and resize it.
    SampleFrames(SampleFramesArgs),
    /// Assign validation/test/train splits and rewrite the manifest.
    Split(SplitArgs),
    /// Train a backbone on the synthetic source task.
    Pretrain(PretrainArgs),
    /// Two-phase transfer learning on a dataset directory.
    Train(TrainArgs),
    /// Confusion matrix and per-class report for one split.
    Eval(EvalArgs),
    /// Run the three-stage pipeline on local image files.
    Detect(DetectArgs),
    /// Start the HTTP session service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub task: SynthTask,
    #[arg(long)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image side; the task default when omitted.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, default_value_t = spotcheck::data::DEFAULT_NOISE_LEVEL)]
    pub noise: f32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleFramesArgs {
    /// Directory of decoded frames (`frame_*.png`).
    #[arg(long)]
    pub clip: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, default_value_t = 224)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = spotcheck::data::DEFAULT_VAL_PER_CLASS)]
    pub val: usize,
    #[arg(long, default_value_t = spotcheck::data::DEFAULT_TEST_PER_CLASS)]
    pub test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iteration_cap: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CropArgs {
    /// Train/evaluate on 16 random crops per image.
    #[arg(long)]
    pub crops: bool,
    #[arg(long, default_value_t = DEFAULT_CROPS_PER_IMAGE)]
    pub crops_per_image: usize,
    #[arg(long, default_value_t = 0)]
    pub crop_seed: u64,
}

impl CropArgs {
    fn spec(&self) -> Option<CropSpec> {
        self.crops.then(|| CropSpec {
            crops_per_image: self.crops_per_image,
            ..CropSpec::new(self.crop_seed)
        })
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Expected class count; checked against the dataset.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Pretrained model to transfer from; a fresh random backbone otherwise.
    #[arg(long, conflicts_with = "resume")]
    pub backbone: Option<PathBuf>,
    /// Architecture of the fresh backbone: micro or vgg16.
    #[arg(long, default_value = "micro")]
    pub arch: String,
    #[command(flatten)]
    pub crop: CropArgs,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 200)]
    pub head_iterations: usize,
    #[arg(long, default_value_t = 200)]
    pub finetune_iterations: usize,
    /// 0 turns validation off.
    #[arg(long, default_value_t = 50)]
    pub validation_cycle: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr_head: f32,
    #[arg(long, default_value_t = 1e-4)]
    pub lr_finetune: f32,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training-curve CSV.
    #[arg(long)]
    pub curves: Option<PathBuf>,
    /// Written at every validation pass.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = Split::Test)]
    pub split: Split,
    #[command(flatten)]
    pub crop: CropArgs,
    /// Confusion matrix CSV.
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    /// Report JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Directory holding product.scm, detail.scm and texture.scm.
    #[arg(long)]
    pub models_dir: PathBuf,
    #[arg(long)]
    pub product: PathBuf,
    #[arg(long)]
    pub detail: Vec<PathBuf>,
    #[arg(long)]
    pub texture: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f32,
    #[arg(long, default_value_t = 0)]
    pub crop_seed: u64,
    /// Verdict JSON goes here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long)]
    pub models_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f32,
    #[arg(long, default_value_t = 0)]
    pub crop_seed: u64,
    /// Session journal and upload blobs.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Built web client, served at `/` when present.
    #[arg(long, default_value = "webui/dist")]
    pub static_dir: PathBuf,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::SampleFrames(a) => sample(a),
        Command::Split(a) => split(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Detect(a) => detect(a),
        Command::Serve(a) => serve(a),
    }
}

fn synth(a: SynthArgs) -> Result<(), CliError> {
    let mut spec = SynthSpec::new(a.task, a.per_class, a.seed);
    spec.noise_level = a.noise;
    if let Some(size) = a.size {
        spec.image_size = size;
    }
    let ds = synth_dataset(&spec)?;
    write_dataset_dir(&ds, &a.out)?;
    println!("wrote {} images in {} classes to {}", ds.len(), ds.num_classes(), a.out.display());
    Ok(())
}

fn sample(a: SampleFramesArgs) -> Result<(), CliError> {
    let spec = SamplingSpec {
        stride: a.stride,
        target_size: (a.size, a.size),
    };
    let frames = sample_frames(&a.clip, &spec)?;
    fs::create_dir_all(&a.out)?;
    for (i, f) in frames.iter().enumerate() {
        save_png(f, a.out.join(format!("frame_{i:05}.png")))?;
    }
    println!("sampled {} frames into {}", frames.len(), a.out.display());
    Ok(())
}

/// Side of the first image of the first class, for datasets loaded at
/// their native size.
fn native_size(dir: &Path) -> Result<(usize, usize), CliError> {
    let mut classes: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    for class in classes {
        let mut files: Vec<PathBuf> = fs::read_dir(&class)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        if let Some(first) = files.first() {
            let (h, w, _) = load_png(first)?.image_dims()?;
            return Ok((h, w));
        }
    }
    Err(DataError::NoClasses(dir.to_path_buf()).into())
}

/// Loads a dataset directory, resized to `size` (native size when `None`),
/// with splits from its manifest if there is one.
pub fn load_dataset(dir: &Path, size: Option<(usize, usize)>) -> Result<LabeledDataset, CliError> {
    let size = match size {
        Some(s) => s,
        None => native_size(dir)?,
    };
    let mut ds = ingest_directory(dir, size)?;
    let manifest = dir.join(MANIFEST_FILE);
    if manifest.exists() {
        apply_manifest(&mut ds, &read_manifest(&manifest)?)?;
    }
    Ok(ds)
}

fn split(a: SplitArgs) -> Result<(), CliError> {
    let ds = load_dataset(&a.data, None)?;
    let ds = split_dataset(&ds, a.val, a.test, a.seed)?;
    write_manifest(&ds, a.data.join(MANIFEST_FILE))?;
    for s in [Split::Train, Split::Validation, Split::Test] {
        println!("{s}: {}", ds.indices(s).len());
    }
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<(), CliError> {
    let mut config = PretrainConfig::default();
    if let Some(cap) = a.iteration_cap {
        config.iteration_cap = cap;
    }
    let outcome = pretrain_source_task(&config, a.seed)?;
    save_model(&outcome.model, &a.out)?;
    println!(
        "source task validation accuracy {:.4} after {} iterations",
        outcome.validation_accuracy, outcome.iterations
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let config = TrainConfig {
        batch_size: a.batch_size,
        head_iterations: a.head_iterations,
        finetune_iterations: a.finetune_iterations,
        validation_cycle: (a.validation_cycle > 0).then_some(a.validation_cycle),
        lr_head: a.lr_head,
        lr_finetune: a.lr_finetune,
        momentum: a.momentum,
        seed: a.seed,
    };
    let resume = a.resume.as_ref().map(load_checkpoint).transpose()?;
    let backbone = match (&resume, &a.backbone) {
        (Some(_), _) => None,
        (None, Some(path)) => Some(load_model(path)?),
        (None, None) => None,
    };

    // The input size comes from whichever model is in play; the class count
    // of a fresh backbone is only a placeholder until the head is replaced.
    let input_hw = |m: &Model| (m.input_shape().0, m.input_shape().1);
    let preset = |n: usize| {
        ModelConfig::preset(&a.arch, n).ok_or_else(|| CliError::Usage(format!("--arch: unknown architecture {:?}", a.arch)))
    };
    let hw = match (&resume, &backbone) {
        (Some(c), _) => input_hw(&c.model),
        (None, Some(b)) => input_hw(b),
        (None, None) => {
            let (h, w, _) = preset(2)?.input_shape;
            (h, w)
        }
    };
    let crop_spec = a.crop.spec();
    let mut ds = load_dataset(&a.data, if crop_spec.is_some() { None } else { Some(hw) })?;
    if let Some(spec) = &crop_spec {
        ds = crop_dataset(&ds, spec, hw)?;
    }
    if let Some(n) = a.classes {
        if n != ds.num_classes() {
            return Err(CliError::Usage(format!(
                "--classes {n}, but {} has {} class directories",
                a.data.display(),
                ds.num_classes()
            )));
        }
    }

    let checkpoint_path = a.checkpoint.clone();
    let mut observer = |t: &PhaseTrainer<'_>| -> Result<(), TrainError> {
        if let (Some(path), Some(cycle)) = (&checkpoint_path, t.config().validation_cycle) {
            if t.iteration() % cycle == 0 {
                save_checkpoint(&t.checkpoint(), path)?;
            }
        }
        Ok(())
    };
    let (model, log) = match resume {
        Some(ckpt) => transfer_learn_from(ckpt, &ds, &mut observer)?,
        None => {
            let backbone = match backbone {
                Some(b) => b,
                None => build_model(preset(ds.num_classes())?, a.seed)?,
            };
            transfer_learn(&backbone, &ds, &config, &mut observer)?
        }
    };
    save_model(&model, &a.out)?;
    if let Some(path) = &a.curves {
        export_curves(&log, path)?;
    }
    match log.validations.last() {
        Some(v) => println!("final validation accuracy {:.4} (loss {:.4})", v.accuracy, v.loss),
        None => println!("trained {} iterations", log.iterations.len()),
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let (h, w, _) = model.input_shape();
    let matrix = match a.crop.spec() {
        // Crop-averaged prediction per source image, crops drawn exactly as
        // at training time (crop stream keyed by the image's position).
        Some(spec) => {
            let ds = load_dataset(&a.data, None)?;
            confusion_matrix_with(&ds, a.split, model.class_names(), |i, image| {
                let crops = random_crops(image, &spec, i as u64, (h, w))?;
                let mut mean = vec![0.0f64; model.num_classes()];
                for c in &crops {
                    for (m, p) in mean.iter_mut().zip(model.forward(c)?.data()) {
                        *m += *p as f64;
                    }
                }
                Ok(mean.iter().map(|m| (m / crops.len() as f64) as f32).collect())
            })?
        }
        None => confusion_matrix(&model, &load_dataset(&a.data, Some((h, w)))?, a.split)?,
    };
    let rep = report(&matrix);
    if let Some(path) = &a.matrix {
        write_file(path, matrix.to_csv())?;
    }
    if let Some(path) = &a.report {
        write_file(path, rep.to_json())?;
    }
    print!("{}", rep.to_text());
    Ok(())
}

fn borrow(v: &[(String, Vec<u8>)]) -> Vec<(&str, &[u8])> {
    v.iter().map(|(n, b)| (n.as_str(), b.as_slice())).collect()
}

fn detect(a: DetectArgs) -> Result<(), CliError> {
    if a.detail.is_empty() && a.texture.is_empty() {
        return Err(CliError::Usage("give at least one --detail or --texture image".into()));
    }
    let models = StageModels::load_dir(&a.models_dir)?;
    let load_all = |paths: &[PathBuf]| -> Result<Vec<(String, Vec<u8>)>, CliError> {
        paths.iter().map(|p| Ok((p.display().to_string(), read_file(p)?))).collect()
    };
    let product = (a.product.display().to_string(), read_file(&a.product)?);
    let (details, textures) = (load_all(&a.detail)?, load_all(&a.texture)?);
    let outcome = service::detect_session(
        &models,
        (&product.0, &product.1),
        &borrow(&details),
        &borrow(&textures),
        a.tau,
        a.crop_seed,
    )?;
    let json = match outcome {
        PipelineOutcome::Verdict(v) => v.to_json(),
        PipelineOutcome::UnknownProduct { confidence, .. } => serde_json::to_string_pretty(&serde_json::json!({
            "result": "unknown",
            "confidence": confidence,
        }))
        .expect("json"),
    };
    match &a.out {
        Some(path) => write_file(path, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let models = match StageModels::load_dir(&a.models_dir) {
        Ok(m) => Some(m),
        Err(e) => {
            eprintln!("warning: models not loaded from {}: {e}", a.models_dir.display());
            None
        }
    };
    let state = AppState::new(
        models,
        ServiceConfig {
            tau: a.tau,
            crop_seed: a.crop_seed,
            data_dir: a.data_dir.clone(),
        },
    )?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(a.addr, state, Some(&a.static_dir)))?;
    Ok(())
}
