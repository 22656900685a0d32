use super::NnError;

/// Highest tensor order the engine deals with (batch × height × width × channels).
pub const MAX_RANK: usize = 4;

/// Dense row-major array of `f32`.
///
/// Images and activations use height × width × channels layout; batched
/// tensors put the batch extent first.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, NnError> {
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NnError::ShapeMismatch(format!(
                "shape {:?} holds {} values but {} were supplied",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, NnError> {
        check_shape(&shape)?;
        let len = shape.iter().product();
        Ok(Tensor {
            shape,
            data: vec![0.0; len],
        })
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Result<Self, NnError> {
        let mut t = Tensor::zeros(shape)?;
        t.data.fill(value);
        Ok(t)
    }

    /// Builds an `h × w × c` image from a function of `(y, x, channel)`.
    pub fn image_from_fn(
        h: usize,
        w: usize,
        c: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self, NnError> {
        check_shape(&[h, w, c])?;
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Ok(Tensor {
            shape: vec![h, w, c],
            data,
        })
    }

    /// Stacks equally shaped tensors along a new leading batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Self, NnError> {
        let first = items
            .first()
            .ok_or_else(|| NnError::ShapeMismatch("cannot stack an empty list".into()))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(NnError::ShapeMismatch(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        Tensor::new(shape, data)
    }

    /// Splits a batch-major tensor back into its items.
    pub fn unstack(&self) -> Vec<Tensor> {
        if self.shape.len() < 2 {
            return vec![self.clone()];
        }
        let inner = self.shape[1..].to_vec();
        let step: usize = inner.iter().product();
        self.data
            .chunks(step)
            .map(|chunk| Tensor {
                shape: inner.clone(),
                data: chunk.to_vec(),
            })
            .collect()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Interprets the tensor as an image and returns `(h, w, c)`.
    pub fn image_dims(&self) -> Result<(usize, usize, usize), NnError> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(NnError::ShapeMismatch(format!(
                "expected an h×w×c image, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn check_shape(shape: &[usize]) -> Result<(), NnError> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(NnError::ShapeMismatch(format!(
            "tensor order must be 1..={MAX_RANK}, got {}",
            shape.len()
        )));
    }
    if shape.contains(&0) {
        return Err(NnError::ZeroExtent(format!("{shape:?}")));
    }
    Ok(())
}
