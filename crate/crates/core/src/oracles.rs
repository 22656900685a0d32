//! Independent reference computations for tests.
//!
//! Nothing here shares code with the paths it checks: the gradient oracle
//! only calls the `f64` forward pass, the centroid classifier works on raw
//! pixels.

use rand::Rng;

use crate::nn::{backward, Model, ParamsF64, Tensor};
use crate::rng;

/// How the central difference is taken.
#[derive(Clone, Copy, Debug)]
pub enum FdMode {
    /// Plain central difference with step `scale · max(1, |θ|)`. Samples
    /// whose ±step evaluations change the ReLU/pool pattern straddle a kink
    /// and are redrawn.
    Plain { scale: f64 },
    /// Central difference with the base activation pattern replayed on both
    /// sides, step `scale · max(1, |θ|)`.
    Gated { scale: f64 },
}

#[derive(Clone, Debug)]
pub struct LayerCheck {
    pub layer: usize,
    pub kind: String,
    pub checked: usize,
    pub redrawn: usize,
    pub worst_rel: f64,
    pub failures: usize,
}

/// `|a − n| / max(|a|, |n|)`, with a 1e-8 floor so that two exact zeros agree.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients with central differences of the `f64` mean
/// loss on `samples` randomly chosen parameters of every parameterized,
/// trainable layer. Every fifth sample is a bias.
pub fn check_gradients(
    model: &Model,
    batch: &[Tensor],
    labels: &[usize],
    samples: usize,
    mode: FdMode,
    tolerance: f64,
    seed: u64,
) -> Vec<LayerCheck> {
    let (grads, _) = backward(model, batch, labels).expect("backward");
    let base = model.params_f64();
    let base_patterns = model.activation_patterns_f64(&base, batch).expect("patterns");
    let mut rng = rng::stream(seed, 0xFD);
    let mut out = Vec::new();
    for (l, g) in grads.layers.iter().enumerate() {
        let Some(g) = g else { continue };
        if model.frozen()[l] {
            continue;
        }
        let mut report = LayerCheck {
            layer: l,
            kind: model.config().layers[l].to_string(),
            checked: 0,
            redrawn: 0,
            worst_rel: 0.0,
            failures: 0,
        };
        let mut attempts = 0;
        while report.checked < samples && attempts < samples * 50 {
            attempts += 1;
            let bias = report.checked % 5 == 0;
            let n = if bias { g.biases.len() } else { g.weights.len() };
            let idx = rng.random_range(0..n);
            let analytic = if bias { g.biases.data()[idx] } else { g.weights.data()[idx] } as f64;
            let theta = {
                let (w, b) = base.layers[l].as_ref().expect("params");
                if bias { b[idx] } else { w[idx] }
            };
            let perturbed = |delta: f64| {
                let mut p: ParamsF64 = base.clone();
                let (w, b) = p.layers[l].as_mut().expect("params");
                if bias {
                    b[idx] = theta + delta;
                } else {
                    w[idx] = theta + delta;
                }
                p
            };
            let numeric = match mode {
                FdMode::Plain { scale } => {
                    let h = scale * theta.abs().max(1.0);
                    let (plus, minus) = (perturbed(h), perturbed(-h));
                    let crosses = model.activation_patterns_f64(&plus, batch).expect("patterns") != base_patterns
                        || model.activation_patterns_f64(&minus, batch).expect("patterns") != base_patterns;
                    if crosses {
                        report.redrawn += 1;
                        continue;
                    }
                    let lp = model.mean_loss_f64(&plus, batch, labels).expect("loss");
                    let lm = model.mean_loss_f64(&minus, batch, labels).expect("loss");
                    (lp - lm) / (2.0 * h)
                }
                FdMode::Gated { scale } => {
                    let h = scale * theta.abs().max(1.0);
                    let lp = model
                        .mean_loss_f64_gated(&perturbed(h), batch, labels, &base_patterns)
                        .expect("loss");
                    let lm = model
                        .mean_loss_f64_gated(&perturbed(-h), batch, labels, &base_patterns)
                        .expect("loss");
                    (lp - lm) / (2.0 * h)
                }
            };
            let rel = relative_error(analytic, numeric);
            report.worst_rel = report.worst_rel.max(rel);
            if rel > tolerance {
                report.failures += 1;
            }
            report.checked += 1;
        }
        out.push(report);
    }
    out
}

/// Nearest-centroid classification accuracy in raw pixel space: centroids
/// from `train`, accuracy on `test`.
pub fn nearest_centroid_accuracy(train: &[(&Tensor, usize)], test: &[(&Tensor, usize)], classes: usize) -> f64 {
    let dim = train[0].0.len();
    let mut sums = vec![vec![0.0f64; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (img, label) in train {
        counts[*label] += 1;
        for (s, &v) in sums[*label].iter_mut().zip(img.data()) {
            *s += v as f64;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= c.max(1) as f64);
    }
    let correct = test
        .iter()
        .filter(|(img, label)| {
            let dist = |c: &Vec<f64>| -> f64 {
                c.iter().zip(img.data()).map(|(a, &b)| (a - b as f64).powi(2)).sum()
            };
            let best = (0..classes)
                .min_by(|&a, &b| dist(&sums[a]).total_cmp(&dist(&sums[b])))
                .unwrap_or(0);
            best == *label
        })
        .count();
    correct as f64 / test.len() as f64
}
