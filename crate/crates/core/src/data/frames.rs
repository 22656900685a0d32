//! Frame sampling from clips stored as directories of decoded frames.

use std::fs;
use std::path::{Path, PathBuf};

use super::{load_png, resize_bilinear, DataError};
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplingSpec {
    /// Keep every `stride`-th frame, starting with the first.
    pub stride: usize,
    pub target_size: (usize, usize),
}

impl Default for SamplingSpec {
    fn default() -> Self {
        SamplingSpec {
            stride: 1,
            target_size: (224, 224),
        }
    }
}

impl SamplingSpec {
    pub fn desk_scale(stride: usize) -> Self {
        SamplingSpec {
            stride,
            target_size: (32, 32),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.stride == 0 {
            return Err(DataError::Invalid("stride must be at least 1".into()));
        }
        let (h, w) = self.target_size;
        if h < 8 || w < 8 || h % 2 == 1 || w % 2 == 1 {
            return Err(DataError::Invalid(format!(
                "target size {h}x{w} must be even and at least 8"
            )));
        }
        Ok(())
    }
}

pub(crate) fn is_png(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// PNG files directly inside `dir`, sorted by file name.
pub(crate) fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    files.retain(|p| is_png(p));
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Frames 0, stride, 2·stride, … of the clip in `frame_dir`, in filename
/// order, each resized to the target size.
pub fn sample_frames(frame_dir: impl AsRef<Path>, spec: &SamplingSpec) -> Result<Vec<Tensor>, DataError> {
    spec.validate()?;
    let dir = frame_dir.as_ref();
    let files = sorted_pngs(dir)?;
    if files.is_empty() {
        return Err(DataError::EmptyClip(dir.to_path_buf()));
    }
    files
        .iter()
        .step_by(spec.stride)
        .map(|p| resize_bilinear(&load_png(p)?, spec.target_size))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::save_png;

    fn write_clip(dir: &Path, n: usize) {
        for i in 0..n {
            // Frame index encoded in the red channel so order can be checked.
            let v = i as f32 / 255.0;
            let img = Tensor::image_from_fn(8, 8, 3, |_, _, c| if c == 0 { v } else { 0.5 }).unwrap();
            save_png(&img, dir.join(format!("frame_{i:04}.png"))).unwrap();
        }
    }

    fn frame_index(t: &Tensor) -> usize {
        (t.data()[0] * 255.0).round() as usize
    }

    #[test]
    fn stride_ten_over_hundred() {
        let dir = tempfile::tempdir().unwrap();
        write_clip(dir.path(), 100);
        let spec = SamplingSpec {
            stride: 10,
            target_size: (8, 8),
        };
        let frames = sample_frames(dir.path(), &spec).unwrap();
        let idx: Vec<usize> = frames.iter().map(frame_index).collect();
        assert_eq!(idx, (0..100).step_by(10).collect::<Vec<_>>());
    }

    #[test]
    fn short_clip_keeps_first_frame() {
        let dir = tempfile::tempdir().unwrap();
        write_clip(dir.path(), 5);
        let frames = sample_frames(dir.path(), &SamplingSpec::desk_scale(10)).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frame_index(&frames[0]), 0);
        assert_eq!(frames[0].shape(), &[32, 32, 3]);
    }

    #[test]
    fn count_is_ceiling() {
        let dir = tempfile::tempdir().unwrap();
        write_clip(dir.path(), 23);
        for stride in 1..=25 {
            let spec = SamplingSpec {
                stride,
                target_size: (8, 8),
            };
            assert_eq!(sample_frames(dir.path(), &spec).unwrap().len(), 23usize.div_ceil(stride));
        }
    }

    #[test]
    fn empty_directory_is_empty_clip() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        assert!(matches!(
            sample_frames(dir.path(), &SamplingSpec::desk_scale(1)),
            Err(DataError::EmptyClip(_))
        ));
    }

    #[test]
    fn broken_frame_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_clip(dir.path(), 2);
        std::fs::write(dir.path().join("frame_0000.png"), b"junk").unwrap();
        match sample_frames(dir.path(), &SamplingSpec::desk_scale(1)) {
            Err(DataError::UndecodableImage { path, .. }) => assert!(path.ends_with("frame_0000.png")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SamplingSpec::desk_scale(0).validate().is_err());
        let odd = SamplingSpec {
            stride: 1,
            target_size: (9, 8),
        };
        assert!(odd.validate().is_err());
        assert!(SamplingSpec::default().validate().is_ok());
    }
}
