use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use spotcheck::data::{LabeledDataset, Sample, Split};
use spotcheck::nn::{build_model, FreezeSelector, LayerParams, Model, ModelConfig, Tensor};
use spotcheck::train::{
    load_checkpoint, pretrain_source_task, save_checkpoint, train_phase, transfer_learn,
    transfer_learn_from, validate, Phase, PhaseTrainer, PretrainConfig, TrainConfig, TrainError,
};

/// Dark vs bright images with per-pixel jitter: separable by mean intensity.
fn brightness_dataset(per_class: usize, seed: u64) -> LabeledDataset {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let mut samples = Vec::new();
    for label in 0..2 {
        for i in 0..per_class {
            let base = if label == 0 { 0.25 } else { 0.75 };
            let image = Tensor::image_from_fn(32, 32, 3, |_, _, _| base + rng.random_range(-0.2..0.2)).unwrap();
            samples.push(Sample {
                image,
                label,
                split: if i % 5 == 0 { Split::Validation } else { Split::Train },
                source_id: format!("c{label}/{i}.png"),
            });
        }
    }
    LabeledDataset::new(samples, vec!["dark".into(), "bright".into()]).unwrap()
}

fn backbone_equal(a: &Model, b: &Model) -> bool {
    let flat = a.config().flatten_index().unwrap();
    (0..flat).all(|l| match (&a.params()[l], &b.params()[l]) {
        (Some(x), Some(y)) => x.bit_eq(y),
        (None, None) => true,
        _ => false,
    })
}

fn params_equal(a: &Model, b: &Model) -> bool {
    a.params().iter().zip(b.params()).all(|(x, y)| match (x, y) {
        (Some(x), Some(y)) => x.bit_eq(y),
        (None, None) => true,
        _ => false,
    })
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        head_iterations: 12,
        finetune_iterations: 12,
        validation_cycle: Some(5),
        batch_size: 16,
        lr_finetune: 1e-3,
        ..TrainConfig::with_seed(seed)
    }
}

#[test]
fn head_phase_keeps_backbone_bit_identical() {
    let ds = brightness_dataset(40, 1);
    let model = build_model(ModelConfig::micro(2), 3).unwrap();
    let config = TrainConfig {
        head_iterations: 10,
        ..small_config(3)
    };
    let (after, log) = train_phase(model.clone(), &ds, Phase::Head, &config).unwrap();
    assert_eq!(log.iterations.len(), 10);
    assert!(backbone_equal(&model, &after));
    assert!(!params_equal(&model, &after), "head did not move");
}

#[test]
fn zero_iterations_changes_nothing() {
    let ds = brightness_dataset(10, 1);
    let model = build_model(ModelConfig::micro(2), 3).unwrap();
    let config = TrainConfig {
        finetune_iterations: 0,
        ..TrainConfig::with_seed(0)
    };
    let (after, log) = train_phase(model.clone(), &ds, Phase::Finetune, &config).unwrap();
    assert!(params_equal(&model, &after));
    assert!(log.iterations.is_empty() && log.validations.is_empty());
}

#[test]
fn separable_set_is_learned() {
    let ds = brightness_dataset(100, 2);
    let model = build_model(ModelConfig::micro(2), 5).unwrap();
    let config = TrainConfig {
        finetune_iterations: 200,
        lr_finetune: 1e-3,
        validation_cycle: None,
        ..TrainConfig::with_seed(5)
    };
    let (after, _) = train_phase(model, &ds, Phase::Finetune, &config).unwrap();
    let (_, acc) = validate(&after, &ds, Split::Train).unwrap();
    assert!(acc >= 0.95, "training accuracy {acc}");
}

#[test]
fn transfer_log_follows_protocol() {
    let ds = brightness_dataset(30, 4);
    let backbone = build_model(ModelConfig::micro(8), 1).unwrap();
    let config = small_config(9);
    let mut sizes = Vec::new();
    let mut observer = |t: &PhaseTrainer<'_>| {
        sizes.push(t.last_batch().unwrap().size);
        Ok(())
    };
    let (model, log) = transfer_learn(&backbone, &ds, &config, &mut observer).unwrap();
    assert_eq!(model.class_names(), ds.class_names());
    assert_eq!(log.iterations.len(), 24);
    let head: Vec<usize> = log.phase_iterations(Phase::Head).map(|r| r.iteration).collect();
    assert_eq!(head, (1..=12).collect::<Vec<_>>());
    let vals: Vec<(Phase, usize)> = log.validations.iter().map(|v| (v.phase, v.iteration)).collect();
    assert_eq!(
        vals,
        [(Phase::Head, 5), (Phase::Head, 10), (Phase::Finetune, 5), (Phase::Finetune, 10)]
    );
    // 48 training images, batch 16: every batch is full.
    assert_eq!(sizes, [16; 24]);
    assert!(log.iterations.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
}

#[test]
fn short_final_batch_is_kept() {
    let ds = brightness_dataset(25, 4); // 40 train images
    let model = build_model(ModelConfig::micro(2), 1).unwrap();
    let config = TrainConfig {
        head_iterations: 6,
        validation_cycle: None,
        ..small_config(1)
    };
    let mut trainer = PhaseTrainer::new(model, &ds, Phase::Head, &config).unwrap();
    let mut sizes = Vec::new();
    while trainer.step().unwrap() {
        let b = trainer.last_batch().unwrap();
        sizes.push((b.size, b.epoch_end));
    }
    assert_eq!(
        sizes,
        [(16, false), (16, false), (8, true), (16, false), (16, false), (8, true)]
    );
}

#[test]
fn resume_matches_uninterrupted_run() {
    let ds = brightness_dataset(30, 6);
    let backbone = build_model(ModelConfig::micro(8), 2).unwrap();
    let config = small_config(11);
    let (straight, straight_log) = transfer_learn(&backbone, &ds, &config, &mut |_| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    for (stop_phase, stop_at) in [(Phase::Head, 7), (Phase::Finetune, 3)] {
        let path = dir.path().join(format!("{stop_phase}.ckpt"));
        let mut observer = |t: &PhaseTrainer<'_>| {
            if t.phase() == stop_phase && t.iteration() == stop_at {
                save_checkpoint(&t.checkpoint(), &path)?;
                return Err(TrainError::InvalidConfig("interrupted".into()));
            }
            Ok(())
        };
        assert!(transfer_learn(&backbone, &ds, &config, &mut observer).is_err());
        let ckpt = load_checkpoint(&path).unwrap();
        assert_eq!((ckpt.phase, ckpt.iteration), (stop_phase, stop_at));
        let (resumed, resumed_log) = transfer_learn_from(ckpt, &ds, &mut |_| Ok(())).unwrap();
        assert!(params_equal(&straight, &resumed), "stopped in {stop_phase}");
        assert_eq!(straight_log, resumed_log);
    }
}

#[test]
fn non_finite_gradient_aborts_with_partial_log() {
    let ds = brightness_dataset(20, 1);
    let model = build_model(ModelConfig::micro(2), 1).unwrap();
    let config = TrainConfig {
        validation_cycle: None,
        ..small_config(1)
    };
    let mut trainer = PhaseTrainer::new(model, &ds, Phase::Finetune, &config).unwrap();
    for _ in 0..3 {
        trainer.step().unwrap();
    }
    let mut ckpt = trainer.checkpoint();
    let last = ckpt.model.params().len() - 2;
    let LayerParams { biases, .. } = ckpt.model.params_mut()[last].as_mut().unwrap();
    biases.data_mut()[0] = f32::NAN;
    let mut broken = PhaseTrainer::resume(ckpt, &ds).unwrap();
    match broken.step() {
        Err(TrainError::NonFiniteGradient { iteration, log, .. }) => {
            assert_eq!(iteration, 4);
            assert_eq!(log.iterations.len(), 3);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn validate_is_pure_and_counts() {
    // Zero weights and a bias favouring class 0: always predicts class 0.
    let mut model = build_model(ModelConfig::micro(4), 1).unwrap();
    let last = model.params().len() - 2;
    let p = model.params_mut()[last].as_mut().unwrap();
    p.weights.data_mut().fill(0.0);
    p.biases.data_mut().copy_from_slice(&[5.0, 0.0, 0.0, 0.0]);
    let img = Tensor::filled(vec![32, 32, 3], 0.5).unwrap();
    let samples = (0..8)
        .map(|i| Sample {
            image: img.clone(),
            label: [0, 1, 2, 3, 0, 1, 2, 3][i],
            split: Split::Test,
            source_id: format!("{i}"),
        })
        .collect();
    let names = (0..4).map(|i| i.to_string()).collect();
    let ds = LabeledDataset::new(samples, names).unwrap();
    let before = model.clone();
    let a = validate(&model, &ds, Split::Test).unwrap();
    let b = validate(&model, &ds, Split::Test).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.1, 0.25);
    assert_eq!(model, before);
    assert!(matches!(validate(&model, &ds, Split::Validation), Err(TrainError::EmptySplit(Split::Validation))));
}

#[test]
fn perfect_model_scores_one() {
    // The "always class 0" model is perfect on an all-class-0 split.
    let mut model = build_model(ModelConfig::micro(2), 1).unwrap();
    let last = model.params().len() - 2;
    let p = model.params_mut()[last].as_mut().unwrap();
    p.weights.data_mut().fill(0.0);
    p.biases.data_mut().copy_from_slice(&[40.0, 0.0]);
    let ds = brightness_dataset(5, 0);
    let only_dark = LabeledDataset::new(
        ds.samples().iter().filter(|s| s.label == 0).cloned().collect(),
        ds.class_names().to_vec(),
    )
    .unwrap();
    let (loss, acc) = validate(&model, &only_dark, Split::Train).unwrap();
    assert_eq!(acc, 1.0);
    assert!(loss < 1e-12);
}

#[test]
fn empty_train_split_rejected() {
    let mut ds = brightness_dataset(5, 0);
    ds.set_all_splits(Split::Test);
    let model = build_model(ModelConfig::micro(2), 1).unwrap();
    let r = train_phase(model, &ds, Phase::Head, &small_config(0));
    assert!(matches!(r, Err(TrainError::EmptySplit(Split::Train))));
}

#[test]
fn finetune_unfreezes_everything() {
    let ds = brightness_dataset(10, 0);
    let mut model = build_model(ModelConfig::micro(2), 1).unwrap();
    model.set_frozen(FreezeSelector::All);
    let config = TrainConfig {
        finetune_iterations: 2,
        validation_cycle: None,
        ..small_config(0)
    };
    let (after, _) = train_phase(model.clone(), &ds, Phase::Finetune, &config).unwrap();
    assert!(after.frozen().iter().all(|f| !f));
    assert!(!backbone_equal(&model, &after));
}

#[test]
fn pretraining_reaches_target_deterministically() {
    let config = PretrainConfig::default();
    let a = pretrain_source_task(&config, 7).unwrap();
    assert!(a.validation_accuracy >= 0.9, "{}", a.validation_accuracy);
    let b = pretrain_source_task(&config, 7).unwrap();
    assert!(params_equal(&a.model, &b.model));
    assert_eq!(a.iterations, b.iterations);
}

#[test]
fn pretraining_with_zero_cap_fails() {
    let config = PretrainConfig {
        iteration_cap: 0,
        ..PretrainConfig::default()
    };
    assert!(matches!(pretrain_source_task(&config, 7), Err(TrainError::DidNotConverge { .. })));
}
