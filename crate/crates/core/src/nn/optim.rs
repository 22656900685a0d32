use super::model::{GradientSet, Model};
use super::NnError;

/// Momentum buffers, one per parameter tensor.
pub type Velocity = GradientSet;

/// SGD with classical momentum:
/// `v ← momentum·v − lr·g; θ ← θ + v`.
///
/// Frozen layers and their velocities are left untouched. A NaN or infinite
/// gradient aborts the step before anything is modified.
pub fn sgd_step(
    model: &mut Model,
    grads: &GradientSet,
    lr: f32,
    momentum: f32,
    velocity: &mut Velocity,
) -> Result<(), NnError> {
    if grads.layers.len() != model.params().len() || velocity.layers.len() != model.params().len() {
        return Err(NnError::ShapeMismatch(
            "gradient/velocity layer count differs from model".into(),
        ));
    }
    if let Some(layer) = grads.first_non_finite() {
        return Err(NnError::NonFiniteGradient { layer });
    }
    let frozen = model.frozen().to_vec();
    for (l, param) in model.params_mut().iter_mut().enumerate() {
        if frozen[l] {
            continue;
        }
        let (Some(p), Some(g), Some(v)) = (param.as_mut(), grads.layers[l].as_ref(), velocity.layers[l].as_mut())
        else {
            continue;
        };
        if p.weights.len() != g.weights.len() || p.biases.len() != g.biases.len() {
            return Err(NnError::ShapeMismatch(format!("gradient shape of layer {l}")));
        }
        update(p.weights.data_mut(), g.weights.data(), v.weights.data_mut(), lr, momentum);
        update(p.biases.data_mut(), g.biases.data(), v.biases.data_mut(), lr, momentum);
    }
    Ok(())
}

fn update(theta: &mut [f32], g: &[f32], v: &mut [f32], lr: f32, momentum: f32) {
    for ((t, &gi), vi) in theta.iter_mut().zip(g).zip(v.iter_mut()) {
        *vi = momentum * *vi - lr * gi;
        *t += *vi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, FreezeSelector, ModelConfig};

    fn constant_grads(model: &Model, value: f32) -> GradientSet {
        let mut g = GradientSet::zeros_like(model);
        for p in g.layers.iter_mut().flatten() {
            p.weights.data_mut().fill(value);
            p.biases.data_mut().fill(value);
        }
        g
    }

    #[test]
    fn plain_step_without_momentum() {
        let mut m = build_model(ModelConfig::micro(2), 1).unwrap();
        let before = m.clone();
        let g = constant_grads(&m, 0.5);
        let mut v = GradientSet::zeros_like(&m);
        sgd_step(&mut m, &g, 0.1, 0.0, &mut v).unwrap();
        let w0 = before.params()[0].as_ref().unwrap().weights.data()[0];
        let w1 = m.params()[0].as_ref().unwrap().weights.data()[0];
        assert_eq!(w1, w0 + (0.0 * 0.0 - 0.1 * 0.5));
    }

    #[test]
    fn zero_gradient_leaves_model_unchanged() {
        let mut m = build_model(ModelConfig::micro(2), 1).unwrap();
        let before = m.clone();
        let g = GradientSet::zeros_like(&m);
        let mut v = GradientSet::zeros_like(&m);
        sgd_step(&mut m, &g, 0.1, 0.9, &mut v).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn momentum_unrolls() {
        let mut m = build_model(ModelConfig::micro(2), 1).unwrap();
        let theta = m.params()[7].as_ref().unwrap().weights.data()[3] as f64;
        let g = constant_grads(&m, 0.25);
        let mut v = GradientSet::zeros_like(&m);
        sgd_step(&mut m, &g, 0.01, 0.9, &mut v).unwrap();
        sgd_step(&mut m, &g, 0.01, 0.9, &mut v).unwrap();
        let after = m.params()[7].as_ref().unwrap().weights.data()[3] as f64;
        let expected = theta - 0.01 * 0.25 * (1.0 + 1.9);
        assert!((after - expected).abs() < 1e-6, "{after} vs {expected}");
    }

    #[test]
    fn frozen_layers_untouched() {
        let mut m = build_model(ModelConfig::micro(2), 1).unwrap();
        m.set_frozen(FreezeSelector::Backbone);
        let before = m.clone();
        let g = constant_grads(&m, 1.0);
        let mut v = GradientSet::zeros_like(&m);
        sgd_step(&mut m, &g, 0.1, 0.9, &mut v).unwrap();
        assert!(m.params()[0].as_ref().unwrap().bit_eq(before.params()[0].as_ref().unwrap()));
        assert!(!m.params()[7].as_ref().unwrap().bit_eq(before.params()[7].as_ref().unwrap()));
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut m = build_model(ModelConfig::micro(2), 1).unwrap();
        let before = m.clone();
        let mut g = GradientSet::zeros_like(&m);
        g.layers[9].as_mut().unwrap().biases.data_mut()[0] = f32::NAN;
        let mut v = GradientSet::zeros_like(&m);
        assert!(matches!(
            sgd_step(&mut m, &g, 0.1, 0.9, &mut v),
            Err(NnError::NonFiniteGradient { layer: 9 })
        ));
        assert_eq!(m, before);
    }
}
