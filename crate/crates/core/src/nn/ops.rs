//! Layer kernels on raw slices.
//!
//! Forward kernels are generic over the float type so the same code serves
//! the `f32` training path and the `f64` loss path used by gradient checks.
//! Backward kernels are `f32` only.

use num_traits::Float;

use super::NnError;

/// Probability floor applied inside the cross-entropy logarithm.
pub const PROB_CLAMP: f64 = 1e-12;

/// Convolution with a `k × k` kernel (k ∈ {1, 3}), stride 1, zero same-padding.
///
/// `input` is `h × w × cin`, `weights` is `k × k × cin × cout`.
#[allow(clippy::too_many_arguments)]
pub fn conv_forward<T: Float>(
    input: &[T],
    h: usize,
    w: usize,
    cin: usize,
    weights: &[T],
    bias: &[T],
    cout: usize,
    k: usize,
) -> Result<Vec<T>, NnError> {
    check_conv(input.len(), h, w, cin, weights.len(), bias.len(), cout, k)?;
    let pad = k / 2;
    let mut out = vec![T::zero(); h * w * cout];
    for y in 0..h {
        for x in 0..w {
            let o = &mut out[(y * w + x) * cout..][..cout];
            o.copy_from_slice(bias);
            for ky in 0..k {
                let Some(iy) = (y + ky).checked_sub(pad).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = (x + kx).checked_sub(pad).filter(|&v| v < w) else {
                        continue;
                    };
                    let inp = &input[(iy * w + ix) * cin..][..cin];
                    let wbase = (ky * k + kx) * cin * cout;
                    for (i, &v) in inp.iter().enumerate() {
                        if v == T::zero() {
                            continue;
                        }
                        let wrow = &weights[wbase + i * cout..][..cout];
                        for (acc, &wv) in o.iter_mut().zip(wrow) {
                            *acc = *acc + v * wv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution.
///
/// Accumulates into `dweights`/`dbias` when given and returns the input
/// gradient when `want_input` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    input: &[f32],
    h: usize,
    w: usize,
    cin: usize,
    weights: &[f32],
    cout: usize,
    k: usize,
    dout: &[f32],
    mut dparams: Option<(&mut [f32], &mut [f32])>,
    want_input: bool,
) -> Option<Vec<f32>> {
    let pad = k / 2;
    let mut din = want_input.then(|| vec![0.0f32; h * w * cin]);
    for y in 0..h {
        for x in 0..w {
            let g = &dout[(y * w + x) * cout..][..cout];
            if let Some((_, db)) = dparams.as_mut() {
                for (b, &gv) in db.iter_mut().zip(g) {
                    *b += gv;
                }
            }
            for ky in 0..k {
                let Some(iy) = (y + ky).checked_sub(pad).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = (x + kx).checked_sub(pad).filter(|&v| v < w) else {
                        continue;
                    };
                    let ibase = (iy * w + ix) * cin;
                    let wbase = (ky * k + kx) * cin * cout;
                    if let Some((dw, _)) = dparams.as_mut() {
                        for i in 0..cin {
                            let v = input[ibase + i];
                            if v == 0.0 {
                                continue;
                            }
                            let drow = &mut dw[wbase + i * cout..][..cout];
                            for (d, &gv) in drow.iter_mut().zip(g) {
                                *d += v * gv;
                            }
                        }
                    }
                    if let Some(din) = din.as_mut() {
                        for i in 0..cin {
                            let wrow = &weights[wbase + i * cout..][..cout];
                            din[ibase + i] += dot(wrow, g);
                        }
                    }
                }
            }
        }
    }
    din
}

#[allow(clippy::too_many_arguments)]
fn check_conv(
    input_len: usize,
    h: usize,
    w: usize,
    cin: usize,
    weights_len: usize,
    bias_len: usize,
    cout: usize,
    k: usize,
) -> Result<(), NnError> {
    if k != 1 && k != 3 {
        return Err(NnError::ShapeMismatch(format!(
            "unsupported kernel size {k}"
        )));
    }
    if input_len != h * w * cin {
        return Err(NnError::ShapeMismatch(format!(
            "conv input has {input_len} values, expected {h}x{w}x{cin}"
        )));
    }
    if weights_len != k * k * cin * cout || bias_len != cout {
        return Err(NnError::ShapeMismatch(format!(
            "conv weights {weights_len}/bias {bias_len} do not match {k}x{k}x{cin}x{cout}"
        )));
    }
    Ok(())
}

pub fn relu<T: Float>(input: &[T]) -> Vec<T> {
    input.iter().map(|&v| v.max(T::zero())).collect()
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward(input: &[f32], dout: &[f32]) -> Vec<f32> {
    input
        .iter()
        .zip(dout)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

/// 2×2 stride-2 max pooling over an `h × w × c` activation.
///
/// Returns the pooled values and, per output, the flat input index that
/// produced it. Ties go to the first element in row-major window order.
pub fn maxpool_forward<T: Float>(
    input: &[T],
    h: usize,
    w: usize,
    c: usize,
) -> Result<(Vec<T>, Vec<u32>), NnError> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NnError::OddExtent { h, w });
    }
    if input.len() != h * w * c {
        return Err(NnError::ShapeMismatch(format!(
            "pool input has {} values, expected {h}x{w}x{c}",
            input.len()
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut argmax = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best_idx = ((2 * oy) * w + 2 * ox) * c + ch;
                let mut best = input[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                    if input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx as u32);
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool_backward(dout: &[f32], argmax: &[u32], input_len: usize) -> Vec<f32> {
    let mut din = vec![0.0f32; input_len];
    for (&g, &idx) in dout.iter().zip(argmax) {
        din[idx as usize] += g;
    }
    din
}

/// `out = Wᵀx + b` with `W` stored `in × out`.
pub fn dense_forward<T: Float>(
    input: &[T],
    weights: &[T],
    bias: &[T],
    out_units: usize,
) -> Result<Vec<T>, NnError> {
    if bias.len() != out_units || weights.len() != input.len() * out_units {
        return Err(NnError::ShapeMismatch(format!(
            "dense input of {} values does not match weights {} / bias {}",
            input.len(),
            weights.len(),
            bias.len()
        )));
    }
    let mut out = bias.to_vec();
    for (i, &x) in input.iter().enumerate() {
        if x == T::zero() {
            continue;
        }
        let row = &weights[i * out_units..][..out_units];
        for (acc, &wv) in out.iter_mut().zip(row) {
            *acc = *acc + x * wv;
        }
    }
    Ok(out)
}

pub fn dense_backward(
    input: &[f32],
    weights: &[f32],
    out_units: usize,
    dout: &[f32],
    dparams: Option<(&mut [f32], &mut [f32])>,
    want_input: bool,
) -> Option<Vec<f32>> {
    if let Some((dw, db)) = dparams {
        for (b, &g) in db.iter_mut().zip(dout) {
            *b += g;
        }
        for (i, &x) in input.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &mut dw[i * out_units..][..out_units];
            for (d, &g) in row.iter_mut().zip(dout) {
                *d += x * g;
            }
        }
    }
    want_input.then(|| {
        (0..input.len())
            .map(|i| dot(&weights[i * out_units..][..out_units], dout))
            .collect()
    })
}

/// Max-shifted softmax; overflow-safe for any finite logits.
pub fn softmax<T: Float>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |s, &e| s + e);
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-ln(max(p[label], 1e-12))`.
pub fn cross_entropy<T: Float>(probs: &[T], label: usize) -> Result<f64, NnError> {
    let p = probs.get(label).ok_or(NnError::LabelOutOfRange {
        label,
        classes: probs.len(),
    })?;
    let p = p.to_f64().unwrap_or(0.0);
    Ok(-p.max(PROB_CLAMP).ln())
}

/// Gradient of the clamped cross-entropy w.r.t. the softmax logits, scaled.
///
/// Zero when the clamp is active, since the clamped loss is flat there.
pub fn softmax_cross_entropy_grad(probs: &[f32], label: usize, scale: f32) -> Vec<f32> {
    if (probs[label] as f64) < PROB_CLAMP {
        return vec![0.0; probs.len()];
    }
    probs
        .iter()
        .enumerate()
        .map(|(i, &p)| scale * (p - if i == label { 1.0 } else { 0.0 }))
        .collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256StarStar;

    fn random_vec(rng: &mut Xoshiro256StarStar, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    /// Seven nested loops over output pixel, output channel, kernel taps and
    /// input channels, accumulating in f64.
    fn reference_conv(
        input: &[f32],
        h: usize,
        w: usize,
        cin: usize,
        weights: &[f32],
        bias: &[f32],
        cout: usize,
        k: usize,
    ) -> Vec<f64> {
        let pad = (k / 2) as isize;
        let mut out = vec![0.0f64; h * w * cout];
        for y in 0..h {
            for x in 0..w {
                for o in 0..cout {
                    let mut acc = bias[o] as f64;
                    for dy in 0..k {
                        for dx in 0..k {
                            for i in 0..cin {
                                let iy = y as isize + dy as isize - pad;
                                let ix = x as isize + dx as isize - pad;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let v = input[(iy as usize * w + ix as usize) * cin + i] as f64;
                                let wt = weights[((dy * k + dx) * cin + i) * cout + o] as f64;
                                acc += v * wt;
                            }
                        }
                    }
                    out[(y * w + x) * cout + o] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_1x1_unit_weight_is_identity() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(3);
        let input = random_vec(&mut rng, 4 * 5);
        let out = conv_forward(&input, 4, 5, 1, &[1.0], &[0.0], 1, 1).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(4);
        let input = random_vec(&mut rng, 6 * 6);
        let mut w = vec![0.0f32; 9];
        w[4] = 1.0;
        let out = conv_forward(&input, 6, 6, 1, &w, &[0.0], 1, 3).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_matches_direct_reference() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(11);
        let input = random_vec(&mut rng, 5 * 5 * 2);
        let weights = random_vec(&mut rng, 3 * 3 * 2 * 3);
        let bias = random_vec(&mut rng, 3);
        let out = conv_forward(&input, 5, 5, 2, &weights, &bias, 3, 3).unwrap();
        let expected = reference_conv(&input, 5, 5, 2, &weights, &bias, 3, 3);
        for (a, e) in out.iter().zip(&expected) {
            assert!((*a as f64 - e).abs() <= 1e-5 * e.abs().max(1.0), "{a} vs {e}");
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let err = conv_forward(&[0.0f32; 8], 2, 2, 2, &[0.0; 9], &[0.0], 1, 3);
        assert!(matches!(err, Err(NnError::ShapeMismatch(_))));
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(&[-1.0f32, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(relu(&[0.5f32, 3.0]), vec![0.5, 3.0]);
        assert_eq!(relu(&[-0.5f32, -3.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn maxpool_cases() {
        let (out, idx) = maxpool_forward(&[1.0f32, 2.0, 3.0, 4.0], 2, 2, 1).unwrap();
        assert_eq!(out, vec![4.0]);
        assert_eq!(idx, vec![3]);

        let (out, _) = maxpool_forward(&[0.7f32; 4 * 6 * 2], 4, 6, 2).unwrap();
        assert_eq!(out, vec![0.7; 2 * 3 * 2]);

        // Tie: the first element in row-major order wins.
        let (_, idx) = maxpool_forward(&[5.0f32, 5.0, 5.0, 5.0], 2, 2, 1).unwrap();
        assert_eq!(idx, vec![0]);

        assert!(matches!(
            maxpool_forward(&[0.0f32; 6], 3, 2, 1),
            Err(NnError::OddExtent { .. })
        ));
    }

    #[test]
    fn maxpool_matches_window_oracle() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(5);
        let (h, w, c) = (8, 8, 3);
        let input = random_vec(&mut rng, h * w * c);
        let (out, _) = maxpool_forward(&input, h, w, c).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                for ch in 0..c {
                    let mut m = f32::NEG_INFINITY;
                    for y in 2 * oy..2 * oy + 2 {
                        for x in 2 * ox..2 * ox + 2 {
                            m = m.max(input[(y * w + x) * c + ch]);
                        }
                    }
                    assert_eq!(out[(oy * 4 + ox) * c + ch], m);
                }
            }
        }
    }

    #[test]
    fn dense_cases() {
        let x = [0.5f32, -2.0, 3.0];
        let mut eye = vec![0.0f32; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        assert_eq!(dense_forward(&x, &eye, &[0.0; 3], 3).unwrap(), x.to_vec());
        let b = [1.0f32, 2.0, 3.0];
        assert_eq!(dense_forward(&x, &[0.0; 9], &b, 3).unwrap(), b.to_vec());
        assert!(dense_forward(&x, &[0.0; 6], &b, 3).is_err());
    }

    #[test]
    fn dense_matches_dot_product_oracle() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(6);
        let x = random_vec(&mut rng, 6);
        let w = random_vec(&mut rng, 18);
        let b = random_vec(&mut rng, 3);
        let out = dense_forward(&x, &w, &b, 3).unwrap();
        for o in 0..3 {
            let expected: f64 =
                b[o] as f64 + (0..6).map(|i| x[i] as f64 * w[i * 3 + o] as f64).sum::<f64>();
            assert!(((out[o] as f64 - expected) / expected).abs() <= 1e-6);
        }
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0f32; 4]), vec![0.25; 4]);
        let p = softmax(&[1000.0f32, 0.0]);
        assert!((p[0] - 1.0).abs() <= 1e-6 && p[1].abs() <= 1e-6);
        // exp-normalize of [1, 2, 3] evaluated in f64: e^k / (e + e^2 + e^3).
        let e = std::f64::consts::E;
        let denom = e + e * e + e * e * e;
        let expected = [e / denom, e * e / denom, e * e * e / denom];
        let p = softmax(&[1.0f32, 2.0, 3.0]);
        for (a, b) in p.iter().zip(expected) {
            assert!((*a as f64 - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn cross_entropy_cases() {
        assert_eq!(cross_entropy(&[0.0f32, 1.0], 1).unwrap(), 0.0);
        let l = cross_entropy(&[0.25f32; 4], 2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-7);
        let l = cross_entropy(&[1.0f32, 0.0], 1).unwrap();
        assert!((l - (-(1e-12f64).ln())).abs() < 1e-9 && l.is_finite());
        assert!(matches!(
            cross_entropy(&[1.0f32], 1),
            Err(NnError::LabelOutOfRange { label: 1, classes: 1 })
        ));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
        assert_eq!(argmax(&[1.0]), 0);
    }
}
