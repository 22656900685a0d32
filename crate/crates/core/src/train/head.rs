use super::TrainError;
use crate::nn::{default_class_names, glorot_layer, LayerSpec, Model, ModelConfig, HEAD_HIDDEN_UNITS};
use crate::rng::{purpose, stream};

/// Swaps everything from Flatten onward for a fresh
/// `Flatten → Dense(256) → ReLU → Dense(num_classes) → Softmax` head.
///
/// Backbone parameters are copied bit for bit; all freeze flags are cleared
/// and class names reset to `class_i`.
pub fn replace_head(model: &Model, num_classes: usize, seed: u64) -> Result<Model, TrainError> {
    let config = model.config();
    let flat = config.flatten_index().ok_or(TrainError::NoFlattenLayer)?;
    let shapes = config.validate()?;
    let flat_units = shapes[flat].len();
    let mut layers = config.layers[..flat].to_vec();
    layers.extend([
        LayerSpec::Flatten,
        LayerSpec::Dense {
            in_units: flat_units,
            out_units: HEAD_HIDDEN_UNITS,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            in_units: HEAD_HIDDEN_UNITS,
            out_units: num_classes,
        },
        LayerSpec::Softmax,
    ]);
    let new_config = ModelConfig {
        name: config.name.clone(),
        input_shape: config.input_shape,
        layers,
    };
    let mut rng = stream(seed, purpose::HEAD_INIT);
    let mut params = model.params()[..flat].to_vec();
    params.extend(new_config.layers[flat..].iter().map(|s| glorot_layer(s, &mut rng)));
    Ok(Model::new(new_config, params, None, default_class_names(num_classes))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, FreezeSelector, Tensor};

    #[test]
    fn micro_head_is_swapped() {
        let mut m = build_model(ModelConfig::micro(10), 1).unwrap();
        m.set_frozen(FreezeSelector::Backbone);
        let r = replace_head(&m, 4, 2).unwrap();
        let n = r.config().layers.len();
        assert_eq!(
            r.config().layers[n - 2],
            LayerSpec::Dense {
                in_units: 256,
                out_units: 4
            }
        );
        assert_eq!(
            r.config().layers[n - 4],
            LayerSpec::Dense {
                in_units: 1024,
                out_units: 256
            }
        );
        let flat = m.config().flatten_index().unwrap();
        for l in 0..flat {
            assert_eq!(m.params()[l].is_some(), r.params()[l].is_some());
            if let (Some(a), Some(b)) = (&m.params()[l], &r.params()[l]) {
                assert!(a.bit_eq(b));
            }
        }
        assert!(r.frozen().iter().all(|f| !f));
        assert_eq!(r.class_names().len(), 4);
    }

    #[test]
    fn vgg16_head_is_swapped() {
        let m = build_model(ModelConfig::vgg16(10), 1).unwrap();
        let r = replace_head(&m, 4, 0).unwrap();
        let last_dense = &r.config().layers[r.config().layers.len() - 2];
        assert_eq!(
            *last_dense,
            LayerSpec::Dense {
                in_units: 256,
                out_units: 4
            }
        );
        for l in 0..r.config().flatten_index().unwrap() {
            if let (Some(a), Some(b)) = (&m.params()[l], &r.params()[l]) {
                assert!(a.bit_eq(b));
            }
        }
    }

    #[test]
    fn same_class_count_still_reinitializes() {
        let m = build_model(ModelConfig::micro(3), 1).unwrap();
        let once = replace_head(&m, 3, 8).unwrap();
        let twice = replace_head(&once, 3, 9).unwrap();
        let last = once.params().len() - 2;
        assert!(!once.params()[last].as_ref().unwrap().bit_eq(twice.params()[last].as_ref().unwrap()));
    }

    #[test]
    fn single_class_outputs_one() {
        let m = build_model(ModelConfig::micro(3), 1).unwrap();
        let r = replace_head(&m, 1, 0).unwrap();
        let img = Tensor::filled(vec![32, 32, 3], 0.5).unwrap();
        assert_eq!(r.forward(&img).unwrap().data(), [1.0]);
    }
}
