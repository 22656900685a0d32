//! PNG decoding/encoding and bilinear resizing.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use super::DataError;
use crate::nn::Tensor;

/// Decodes PNG bytes into an `h × w × 3` tensor scaled to [0, 1]. `name`
/// only labels errors.
pub fn decode_png(bytes: &[u8], name: &str) -> Result<Tensor, DataError> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| {
        DataError::UndecodableImage {
            path: name.to_string(),
            reason: e.to_string(),
        }
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == 0 || h == 0 {
        return Err(DataError::ZeroExtent(name.to_string()));
    }
    let data = rgb.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Ok(Tensor::new(vec![h, w, 3], data)?)
}

pub fn load_png(path: impl AsRef<Path>) -> Result<Tensor, DataError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    decode_png(&bytes, &path.display().to_string())
}

/// 8-bit quantization: `round(clamp(v, 0, 1) · 255)`.
pub fn encode_png(image: &Tensor) -> Result<Vec<u8>, DataError> {
    let (h, w, c) = image.image_dims()?;
    if c != 3 {
        return Err(DataError::Invalid(format!("PNG export needs 3 channels, got {c}")));
    }
    let raw: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer matches extents");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| DataError::Invalid(format!("PNG encoding failed: {e}")))?;
    Ok(out.into_inner())
}

pub fn save_png(image: &Tensor, path: impl AsRef<Path>) -> Result<(), DataError> {
    std::fs::write(path, encode_png(image)?)?;
    Ok(())
}

/// Source coordinate and blend weight for each destination index along one
/// axis, half-pixel centred and clamped to the edge.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, (s - lo as f64) as f32)
        })
        .collect()
}

/// Bilinear resize with half-pixel centres. Output values are convex
/// combinations of source pixels, so they stay inside the source range.
pub fn resize_bilinear(image: &Tensor, target: (usize, usize)) -> Result<Tensor, DataError> {
    let (h, w, c) = image.image_dims()?;
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(DataError::ZeroExtent(format!("resize target {th}x{tw}")));
    }
    if (th, tw) == (h, w) {
        return Ok(image.clone());
    }
    let ys = axis_taps(h, th);
    let xs = axis_taps(w, tw);
    let src = image.data();
    let mut out = Vec::with_capacity(th * tw * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let p = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(Tensor::new(vec![th, tw, c], out)?)
}
