use num_traits::Float;
use rand::distr::{Distribution, Uniform};

use super::config::{ActShape, LayerSpec, ModelConfig};
use super::ops;
use super::{NnError, Tensor};
use crate::rng;

/// Weights and biases of one parameterized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor,
    pub biases: Tensor,
}

impl LayerParams {
    fn zeros_for(spec: &LayerSpec) -> Option<Self> {
        let (wshape, blen) = spec.param_shapes()?;
        Some(LayerParams {
            weights: Tensor::zeros(wshape).ok()?,
            biases: Tensor::zeros(vec![blen]).ok()?,
        })
    }

    pub fn bit_eq(&self, other: &LayerParams) -> bool {
        self.weights.bit_eq(&other.weights) && self.biases.bit_eq(&other.biases)
    }
}

/// Which part of the network to freeze.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreezeSelector {
    /// Every layer before Flatten.
    Backbone,
    /// Flatten and everything after it.
    Head,
    All,
    None,
}

/// A materialized network: config, parameters, freeze flags, class names.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Option<LayerParams>>,
    frozen: Vec<bool>,
    class_names: Vec<String>,
    /// Input activation shape of every layer.
    in_shapes: Vec<ActShape>,
}

/// Per-layer gradients, shaped exactly like [`Model`] parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<Option<LayerParams>>,
}

impl GradientSet {
    pub fn zeros_like(model: &Model) -> Self {
        GradientSet {
            layers: model
                .config
                .layers
                .iter()
                .map(LayerParams::zeros_for)
                .collect(),
        }
    }

    /// First layer holding a NaN or infinite value.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.layers.iter().position(|p| {
            p.as_ref().is_some_and(|p| {
                p.weights
                    .data()
                    .iter()
                    .chain(p.biases.data())
                    .any(|v| !v.is_finite())
            })
        })
    }
}

/// Parameters widened to `f64`, for the extended-precision loss path.
#[derive(Clone, Debug)]
pub struct ParamsF64 {
    pub layers: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

/// Loss, accuracy and gradients of one mini-batch.
#[derive(Clone, Debug)]
pub struct BatchResult {
    pub grads: GradientSet,
    pub mean_loss: f64,
    pub correct: usize,
    pub size: usize,
}

/// Glorot-uniform weights in `[-b, b]` with `b = sqrt(6 / (fan_in + fan_out))`
/// and zero biases, or `None` for a parameterless layer.
pub fn glorot_layer(spec: &LayerSpec, rng: &mut rng::Rng64) -> Option<LayerParams> {
    let (wshape, blen) = spec.param_shapes()?;
    let (fan_in, fan_out) = spec.fans()?;
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let dist = Uniform::new_inclusive(-bound, bound).ok()?;
    let n: usize = wshape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| dist.sample(rng)).collect();
    Some(LayerParams {
        weights: Tensor::new(wshape, data).ok()?,
        biases: Tensor::zeros(vec![blen]).ok()?,
    })
}

/// Builds a model with Glorot-uniform weights and zero biases.
///
/// Class names default to `class_0 .. class_{n-1}`.
pub fn build_model(config: ModelConfig, seed: u64) -> Result<Model, NnError> {
    config.validate()?;
    let mut rng = rng::stream(seed, rng::purpose::INIT);
    let params = config.layers.iter().map(|spec| glorot_layer(spec, &mut rng)).collect();
    let classes = default_class_names(config.num_classes());
    Model::new(config, params, None, classes)
}

pub fn default_class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class_{i}")).collect()
}

impl Model {
    /// Assembles a model from parts, checking every parameter shape.
    pub fn new(
        config: ModelConfig,
        params: Vec<Option<LayerParams>>,
        frozen: Option<Vec<bool>>,
        class_names: Vec<String>,
    ) -> Result<Self, NnError> {
        let out_shapes = config.validate()?;
        if params.len() != config.layers.len() {
            return Err(NnError::ShapeMismatch(format!(
                "{} parameter slots for {} layers",
                params.len(),
                config.layers.len()
            )));
        }
        for (idx, (spec, p)) in config.layers.iter().zip(&params).enumerate() {
            let ok = match (spec.param_shapes(), p) {
                (None, None) => true,
                (Some((wshape, blen)), Some(p)) => {
                    p.weights.shape() == wshape.as_slice() && p.biases.shape() == [blen]
                }
                _ => false,
            };
            if !ok {
                return Err(NnError::ShapeMismatch(format!(
                    "parameters of layer {idx} ({spec}) do not match its spec"
                )));
            }
        }
        let frozen = frozen.unwrap_or_else(|| vec![false; config.layers.len()]);
        if frozen.len() != config.layers.len() {
            return Err(NnError::ShapeMismatch("frozen flag count".into()));
        }
        if class_names.len() != config.num_classes() {
            return Err(NnError::ClassCount {
                names: class_names.len(),
                outputs: config.num_classes(),
            });
        }
        let mut in_shapes = vec![config.input_act()];
        in_shapes.extend_from_slice(&out_shapes[..out_shapes.len() - 1]);
        Ok(Model {
            config,
            params,
            frozen,
            class_names,
            in_shapes,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<LayerParams>] {
        &mut self.params
    }

    pub fn frozen(&self) -> &[bool] {
        &self.frozen
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.config.input_shape
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self, NnError> {
        if names.len() != self.num_classes() {
            return Err(NnError::ClassCount {
                names: names.len(),
                outputs: self.num_classes(),
            });
        }
        self.class_names = names;
        Ok(self)
    }

    /// Total number of scalar parameters in layer `idx`.
    pub fn param_count(&self, idx: usize) -> usize {
        self.params[idx]
            .as_ref()
            .map_or(0, |p| p.weights.len() + p.biases.len())
    }

    pub fn set_frozen(&mut self, selector: FreezeSelector) {
        let split = self.config.flatten_index().unwrap_or(0);
        for (idx, flag) in self.frozen.iter_mut().enumerate() {
            *flag = match selector {
                FreezeSelector::Backbone => idx < split,
                FreezeSelector::Head => idx >= split,
                FreezeSelector::All => true,
                FreezeSelector::None => false,
            };
        }
    }

    /// Sets one layer's flag directly.
    pub fn set_layer_frozen(&mut self, idx: usize, frozen: bool) {
        self.frozen[idx] = frozen;
    }

    /// Class probabilities for one `h × w × c` image.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor, NnError> {
        self.check_input(image)?;
        let out = self.run(image.data(), false)?.0.pop().unwrap_or_default();
        Tensor::new(vec![out.len()], out)
    }

    pub fn check_input(&self, image: &Tensor) -> Result<(), NnError> {
        let (h, w, c) = self.config.input_shape;
        if image.shape() != [h, w, c] {
            return Err(NnError::ShapeMismatch(format!(
                "model expects {h}x{w}x{c} input, got {:?}",
                image.shape()
            )));
        }
        Ok(())
    }

    /// Runs the stack; keeps every activation when `keep` is set.
    fn run(&self, input: &[f32], keep: bool) -> Result<(Vec<Vec<f32>>, Vec<Option<Vec<u32>>>), NnError> {
        forward_layers(
            &self.config.layers,
            &self.in_shapes,
            |l| {
                self.params[l]
                    .as_ref()
                    .map(|p| (p.weights.data(), p.biases.data()))
            },
            input.to_vec(),
            keep,
            Gates::Free,
        )
    }

    pub fn params_f64(&self) -> ParamsF64 {
        ParamsF64 {
            layers: self
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| {
                        (
                            p.weights.data().iter().map(|&v| v as f64).collect(),
                            p.biases.data().iter().map(|&v| v as f64).collect(),
                        )
                    })
                })
                .collect(),
        }
    }

    /// Mean cross-entropy evaluated entirely in `f64` with the given
    /// (possibly perturbed) parameters.
    pub fn mean_loss_f64(&self, params: &ParamsF64, batch: &[Tensor], labels: &[usize]) -> Result<f64, NnError> {
        self.loss_f64_impl(params, batch, labels, None)
    }

    /// As [`Model::mean_loss_f64`], but with ReLU masks and pool selections
    /// replayed from `patterns` (one per image) instead of recomputed.
    pub fn mean_loss_f64_gated(
        &self,
        params: &ParamsF64,
        batch: &[Tensor],
        labels: &[usize],
        patterns: &[ActivationPattern],
    ) -> Result<f64, NnError> {
        if patterns.len() != batch.len() {
            return Err(NnError::ShapeMismatch("one activation pattern per image".into()));
        }
        self.loss_f64_impl(params, batch, labels, Some(patterns))
    }

    /// Activation pattern of the `f64` forward pass for every image.
    pub fn activation_patterns_f64(
        &self,
        params: &ParamsF64,
        batch: &[Tensor],
    ) -> Result<Vec<ActivationPattern>, NnError> {
        batch
            .iter()
            .map(|image| {
                self.check_input(image)?;
                let mut pattern = ActivationPattern {
                    relu: Vec::new(),
                    pool: Vec::new(),
                };
                forward_layers(
                    &self.config.layers,
                    &self.in_shapes,
                    |l| params.layers[l].as_ref().map(|(w, b)| (w.as_slice(), b.as_slice())),
                    widen(image),
                    false,
                    Gates::Record(&mut pattern),
                )?;
                Ok(pattern)
            })
            .collect()
    }

    fn loss_f64_impl(
        &self,
        params: &ParamsF64,
        batch: &[Tensor],
        labels: &[usize],
        patterns: Option<&[ActivationPattern]>,
    ) -> Result<f64, NnError> {
        check_batch(batch, labels)?;
        let mut total = 0.0;
        for (i, (image, &label)) in batch.iter().zip(labels).enumerate() {
            self.check_input(image)?;
            let gates = match patterns {
                Some(p) => Gates::Replay(&p[i]),
                None => Gates::Free,
            };
            let (acts, _) = forward_layers(
                &self.config.layers,
                &self.in_shapes,
                |l| params.layers[l].as_ref().map(|(w, b)| (w.as_slice(), b.as_slice())),
                widen(image),
                false,
                gates,
            )?;
            total += ops::cross_entropy(&acts[0], label)?;
        }
        Ok(total / batch.len() as f64)
    }

    /// Mean cross-entropy, batch accuracy and exact gradients for a batch.
    ///
    /// Frozen layers get zero gradients. Backpropagation stops below the
    /// lowest trainable layer since nothing there consumes the signal.
    pub fn batch_gradients(&self, batch: &[(&Tensor, usize)]) -> Result<BatchResult, NnError> {
        if batch.is_empty() {
            return Err(NnError::ShapeMismatch("empty batch".into()));
        }
        // Per-sample gradients land in f32 scratch and are summed in f64, so
        // the batch mean does not depend on accumulation order.
        let mut grads = GradientSet::zeros_like(self);
        let mut scratch = GradientSet::zeros_like(self);
        let mut sums: Vec<Option<(Vec<f64>, Vec<f64>)>> = grads
            .layers
            .iter()
            .enumerate()
            .map(|(l, g)| {
                g.as_ref()
                    .filter(|_| !self.frozen[l])
                    .map(|g| (vec![0.0; g.weights.len()], vec![0.0; g.biases.len()]))
            })
            .collect();
        let lowest_trainable = (0..self.config.layers.len())
            .find(|&l| self.params[l].is_some() && !self.frozen[l]);
        let mut total_loss = 0.0;
        let mut correct = 0;
        for &(image, label) in batch {
            self.check_input(image)?;
            let (acts, argmaxes) = self.run(image.data(), true)?;
            let probs = acts.last().expect("non-empty stack");
            total_loss += ops::cross_entropy(probs, label)?;
            if ops::argmax(probs) == label {
                correct += 1;
            }
            let Some(stop) = lowest_trainable else {
                continue;
            };
            let last = self.config.layers.len() - 1;
            for (l, g) in scratch.layers.iter_mut().enumerate() {
                if let (Some(g), Some(_)) = (g.as_mut(), sums[l].as_ref()) {
                    g.weights.data_mut().fill(0.0);
                    g.biases.data_mut().fill(0.0);
                }
            }
            let mut signal = ops::softmax_cross_entropy_grad(probs, label, 1.0);
            for l in (stop..last).rev() {
                let input = &acts[l];
                let want_input = l > stop;
                let trainable = !self.frozen[l];
                let dparams = match scratch.layers[l].as_mut() {
                    Some(g) if trainable => Some((g.weights.data_mut(), g.biases.data_mut())),
                    _ => None,
                };
                let next = match self.config.layers[l] {
                    LayerSpec::Conv3x3 { out_channels, .. } | LayerSpec::Conv1x1 { out_channels, .. } => {
                        let ActShape::Spatial { h, w, c } = self.in_shapes[l] else {
                            unreachable!("validated config")
                        };
                        let k = if matches!(self.config.layers[l], LayerSpec::Conv3x3 { .. }) { 3 } else { 1 };
                        let p = self.params[l].as_ref().expect("conv params");
                        ops::conv_backward(
                            input,
                            h,
                            w,
                            c,
                            p.weights.data(),
                            out_channels,
                            k,
                            &signal,
                            dparams,
                            want_input,
                        )
                    }
                    LayerSpec::Dense { out_units, .. } => {
                        let p = self.params[l].as_ref().expect("dense params");
                        ops::dense_backward(input, p.weights.data(), out_units, &signal, dparams, want_input)
                    }
                    LayerSpec::Relu => want_input.then(|| ops::relu_backward(input, &signal)),
                    LayerSpec::MaxPool2x2 => want_input.then(|| {
                        let idx = argmaxes[l].as_ref().expect("pool trace");
                        ops::maxpool_backward(&signal, idx, input.len())
                    }),
                    LayerSpec::Flatten => want_input.then(|| std::mem::take(&mut signal)),
                    LayerSpec::Softmax => unreachable!("softmax is only the final layer"),
                };
                match next {
                    Some(s) => signal = s,
                    None => break,
                }
            }
            for (sum, g) in sums.iter_mut().zip(&scratch.layers) {
                if let (Some((sw, sb)), Some(g)) = (sum.as_mut(), g.as_ref()) {
                    accumulate(sw, g.weights.data());
                    accumulate(sb, g.biases.data());
                }
            }
        }
        let n = batch.len() as f64;
        for (g, sum) in grads.layers.iter_mut().zip(&sums) {
            if let (Some(g), Some((sw, sb))) = (g.as_mut(), sum.as_ref()) {
                for (d, s) in g.weights.data_mut().iter_mut().zip(sw) {
                    *d = (s / n) as f32;
                }
                for (d, s) in g.biases.data_mut().iter_mut().zip(sb) {
                    *d = (s / n) as f32;
                }
            }
        }
        Ok(BatchResult {
            grads,
            mean_loss: total_loss / batch.len() as f64,
            correct,
            size: batch.len(),
        })
    }
}

/// Gradients of mean cross-entropy over `batch` for every trainable parameter.
pub fn backward(model: &Model, batch: &[Tensor], labels: &[usize]) -> Result<(GradientSet, f64), NnError> {
    check_batch(batch, labels)?;
    let items: Vec<(&Tensor, usize)> = batch.iter().zip(labels.iter().copied()).collect();
    let r = model.batch_gradients(&items)?;
    Ok((r.grads, r.mean_loss))
}

fn accumulate(sum: &mut [f64], values: &[f32]) {
    for (s, &v) in sum.iter_mut().zip(values) {
        *s += v as f64;
    }
}

fn widen(image: &Tensor) -> Vec<f64> {
    image.data().iter().map(|&v| v as f64).collect()
}

fn check_batch(batch: &[Tensor], labels: &[usize]) -> Result<(), NnError> {
    if batch.is_empty() || batch.len() != labels.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{} images with {} labels",
            batch.len(),
            labels.len()
        )));
    }
    Ok(())
}

type Activations<T> = (Vec<Vec<T>>, Vec<Option<Vec<u32>>>);

/// ReLU on/off masks and max-pool selections of one forward pass.
///
/// Replaying a pattern makes the network a smooth function of its
/// parameters, which is what gated finite-difference checks rely on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivationPattern {
    relu: Vec<Option<Vec<bool>>>,
    pool: Vec<Option<Vec<u32>>>,
}

enum Gates<'g> {
    Free,
    Record(&'g mut ActivationPattern),
    Replay(&'g ActivationPattern),
}

/// Shared forward pass. With `keep == false` only the final output is
/// returned (as the single element of the activation list).
fn forward_layers<'p, T: Float + 'p>(
    layers: &[LayerSpec],
    in_shapes: &[ActShape],
    params: impl Fn(usize) -> Option<(&'p [T], &'p [T])>,
    input: Vec<T>,
    keep: bool,
    mut gates: Gates<'_>,
) -> Result<Activations<T>, NnError> {
    let mut acts = Vec::with_capacity(if keep { layers.len() + 1 } else { 1 });
    let mut argmaxes = vec![None; if keep { layers.len() } else { 0 }];
    if let Gates::Record(p) = &mut gates {
        p.relu = vec![None; layers.len()];
        p.pool = vec![None; layers.len()];
    }
    let mut current = input;
    for (l, spec) in layers.iter().enumerate() {
        let next = match *spec {
            LayerSpec::Conv3x3 { out_channels, .. } | LayerSpec::Conv1x1 { out_channels, .. } => {
                let ActShape::Spatial { h, w, c } = in_shapes[l] else {
                    unreachable!("validated config")
                };
                let k = if matches!(spec, LayerSpec::Conv3x3 { .. }) { 3 } else { 1 };
                let (wts, b) = params(l).expect("conv params");
                ops::conv_forward(&current, h, w, c, wts, b, out_channels, k)?
            }
            LayerSpec::Relu => match &mut gates {
                Gates::Free => ops::relu(&current),
                Gates::Record(p) => {
                    p.relu[l] = Some(current.iter().map(|&v| v > T::zero()).collect());
                    ops::relu(&current)
                }
                Gates::Replay(p) => {
                    let mask = p.relu[l].as_ref().expect("pattern matches model");
                    current
                        .iter()
                        .zip(mask)
                        .map(|(&v, &on)| if on { v } else { T::zero() })
                        .collect()
                }
            },
            LayerSpec::MaxPool2x2 => {
                let ActShape::Spatial { h, w, c } = in_shapes[l] else {
                    unreachable!("validated config")
                };
                let (out, idx) = match &mut gates {
                    Gates::Replay(p) => {
                        let idx = p.pool[l].clone().expect("pattern matches model");
                        (idx.iter().map(|&i| current[i as usize]).collect(), idx)
                    }
                    _ => ops::maxpool_forward(&current, h, w, c)?,
                };
                if let Gates::Record(p) = &mut gates {
                    p.pool[l] = Some(idx.clone());
                }
                if keep {
                    argmaxes[l] = Some(idx);
                }
                out
            }
            LayerSpec::Flatten => current.clone(),
            LayerSpec::Dense { out_units, .. } => {
                let (wts, b) = params(l).expect("dense params");
                ops::dense_forward(&current, wts, b, out_units)?
            }
            LayerSpec::Softmax => ops::softmax(&current),
        };
        if keep {
            acts.push(std::mem::replace(&mut current, next));
        } else {
            current = next;
        }
    }
    acts.push(current);
    Ok((acts, argmaxes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_param_counts() {
        let m = build_model(ModelConfig::micro(4), 1).unwrap();
        let counts: Vec<usize> = (0..m.config().layers.len())
            .map(|i| m.param_count(i))
            .filter(|&c| c > 0)
            .collect();
        assert_eq!(counts, vec![8 * 27 + 8, 16 * 72 + 16, 1024 * 32 + 32, 32 * 4 + 4]);
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_model(ModelConfig::micro(4), 9).unwrap();
        let b = build_model(ModelConfig::micro(4), 9).unwrap();
        let c = build_model(ModelConfig::micro(4), 10).unwrap();
        assert!(a.params().iter().zip(b.params()).all(|(x, y)| match (x, y) {
            (Some(x), Some(y)) => x.bit_eq(y),
            (None, None) => true,
            _ => false,
        }));
        assert_ne!(a, c);
        assert!(a.frozen().iter().all(|f| !f));
    }

    #[test]
    fn init_respects_glorot_bound_and_zero_bias() {
        let m = build_model(ModelConfig::micro(4), 2).unwrap();
        for (spec, p) in m.config().layers.iter().zip(m.params()) {
            if let Some(p) = p {
                let (fi, fo) = spec.fans().unwrap();
                let b = (6.0 / (fi + fo) as f64).sqrt() as f32;
                assert!(p.weights.data().iter().all(|v| v.abs() <= b));
                assert!(p.biases.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn freeze_selectors() {
        let mut m = build_model(ModelConfig::micro(2), 1).unwrap();
        m.set_frozen(FreezeSelector::Backbone);
        for (spec, &f) in m.config().layers.clone().iter().zip(m.frozen()) {
            match spec {
                LayerSpec::Conv3x3 { .. } => assert!(f),
                LayerSpec::Dense { .. } => assert!(!f),
                _ => {}
            }
        }
        m.set_frozen(FreezeSelector::Head);
        assert!(m.frozen()[0] == false && m.frozen()[7]);
        m.set_frozen(FreezeSelector::All);
        assert!(m.frozen().iter().all(|&f| f));
        m.set_frozen(FreezeSelector::None);
        assert!(m.frozen().iter().all(|&f| !f));
    }

    #[test]
    fn forward_is_probability_vector() {
        let m = build_model(ModelConfig::micro(4), 3).unwrap();
        let img = Tensor::image_from_fn(32, 32, 3, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f32 / 10.0).unwrap();
        let p = m.forward(&img).unwrap();
        let s: f32 = p.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(m.forward(&Tensor::zeros(vec![16, 16, 3]).unwrap()).is_err());
    }

    #[test]
    fn frozen_layers_get_zero_gradient() {
        let mut m = build_model(ModelConfig::micro(3), 4).unwrap();
        m.set_frozen(FreezeSelector::Backbone);
        let img = Tensor::image_from_fn(32, 32, 3, |y, x, c| ((y + 2 * x + c) % 5) as f32 / 4.0).unwrap();
        let (g, loss) = backward(&m, &[img], &[1]).unwrap();
        assert!(loss > 0.0);
        for (l, p) in g.layers.iter().enumerate() {
            if let Some(p) = p {
                let nonzero = p.weights.data().iter().any(|&v| v != 0.0);
                assert_eq!(nonzero, !m.frozen()[l], "layer {l}");
            }
        }
    }

    #[test]
    fn label_out_of_range_is_reported() {
        let m = build_model(ModelConfig::micro(2), 4).unwrap();
        let img = Tensor::zeros(vec![32, 32, 3]).unwrap();
        assert!(matches!(
            backward(&m, &[img], &[5]),
            Err(NnError::LabelOutOfRange { label: 5, .. })
        ));
    }
}
