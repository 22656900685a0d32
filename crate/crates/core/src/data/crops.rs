//! Random texture crops.

use rand::Rng;

use super::{resize_bilinear, DataError, LabeledDataset, Sample};
use crate::nn::Tensor;
use crate::rng::{derive, purpose, stream};

pub const DEFAULT_CROPS_PER_IMAGE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropSpec {
    pub crops_per_image: usize,
    /// `(h, w)`; `None` means half of each source extent (rounded down, at
    /// least 1).
    pub crop_size: Option<(usize, usize)>,
    pub seed: u64,
}

impl CropSpec {
    pub fn new(seed: u64) -> Self {
        CropSpec {
            crops_per_image: DEFAULT_CROPS_PER_IMAGE,
            crop_size: None,
            seed,
        }
    }

    pub fn resolve_size(&self, h: usize, w: usize) -> (usize, usize) {
        self.crop_size.unwrap_or(((h / 2).max(1), (w / 2).max(1)))
    }
}

/// Top-left corners `(y, x)` of the crops for the image at `image_index`,
/// uniform over all positions where the crop fits.
pub fn crop_positions(
    h: usize,
    w: usize,
    spec: &CropSpec,
    image_index: u64,
) -> Result<Vec<(usize, usize)>, DataError> {
    if spec.crops_per_image == 0 {
        return Err(DataError::Invalid("crops_per_image must be at least 1".into()));
    }
    let (ch, cw) = spec.resolve_size(h, w);
    if ch == 0 || cw == 0 || ch > h || cw > w {
        return Err(DataError::CropTooLarge {
            crop_h: ch,
            crop_w: cw,
            h,
            w,
        });
    }
    let mut rng = stream(derive(spec.seed, image_index), purpose::CROPS);
    Ok((0..spec.crops_per_image)
        .map(|_| (rng.random_range(0..=h - ch), rng.random_range(0..=w - cw)))
        .collect())
}

/// Cuts `crops_per_image` crops and resizes each to `output_size`.
pub fn random_crops(
    image: &Tensor,
    spec: &CropSpec,
    image_index: u64,
    output_size: (usize, usize),
) -> Result<Vec<Tensor>, DataError> {
    let (h, w, c) = image.image_dims()?;
    let (ch, cw) = spec.resolve_size(h, w);
    let src = image.data();
    crop_positions(h, w, spec, image_index)?
        .into_iter()
        .map(|(y0, x0)| {
            let mut data = Vec::with_capacity(ch * cw * c);
            for y in y0..y0 + ch {
                let row = (y * w + x0) * c;
                data.extend_from_slice(&src[row..row + cw * c]);
            }
            resize_bilinear(&Tensor::new(vec![ch, cw, c], data)?, output_size)
        })
        .collect()
}

/// Replaces every sample by its crops, keeping label and split. The image
/// index fed to the crop stream is the sample's position in `dataset`.
pub fn crop_dataset(
    dataset: &LabeledDataset,
    spec: &CropSpec,
    output_size: (usize, usize),
) -> Result<LabeledDataset, DataError> {
    let mut samples = Vec::with_capacity(dataset.len() * spec.crops_per_image);
    for (i, s) in dataset.samples().iter().enumerate() {
        for (k, image) in random_crops(&s.image, spec, i as u64, output_size)?.into_iter().enumerate() {
            samples.push(Sample {
                image,
                label: s.label,
                split: s.split,
                source_id: format!("{}#crop{k:02}", s.source_id),
            });
        }
    }
    LabeledDataset::new(samples, dataset.class_names().to_vec())
}
