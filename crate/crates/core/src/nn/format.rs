//! `.scm` model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      "SPOTCHK1"
//! version    u32
//! config     u32 byte length + canonical UTF-8 text
//! classes    u32 count, then per name: u32 byte length + UTF-8
//! frozen     u32 count, then one byte (0/1) per layer
//! tensors    per layer: u32 tensor count (0 or 2), then per tensor
//!            u32 rank, rank × u32 extents, extents-product × f32
//! ```
//!
//! Readers ignore bytes after the last tensor, which is where checkpoint
//! trailers live.

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::model::{LayerParams, Model};
use super::{NnError, Tensor};

pub const MAGIC: &[u8; 8] = b"SPOTCHK1";
pub const FORMAT_VERSION: u32 = 1;

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<(), NnError> {
    fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model, NnError> {
    let bytes = fs::read(path)?;
    let mut reader = ByteReader::new(&bytes);
    read_model(&mut reader)
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(MAGIC);
    w.u32(FORMAT_VERSION);
    w.string(&model.config().to_canonical_text());
    w.u32(model.class_names().len() as u32);
    for name in model.class_names() {
        w.string(name);
    }
    w.u32(model.frozen().len() as u32);
    for &f in model.frozen() {
        w.bytes(&[f as u8]);
    }
    write_layer_tensors(&mut w, model.params());
    w.into_inner()
}

pub fn decode_model(bytes: &[u8]) -> Result<Model, NnError> {
    read_model(&mut ByteReader::new(bytes))
}

pub(crate) fn write_layer_tensors(w: &mut ByteWriter, layers: &[Option<LayerParams>]) {
    for layer in layers {
        match layer {
            None => w.u32(0),
            Some(p) => {
                w.u32(2);
                w.tensor(&p.weights);
                w.tensor(&p.biases);
            }
        }
    }
}

/// Reads one tensor block per layer of `config`, checking headers against
/// the shapes the config implies.
pub(crate) fn read_layer_tensors(
    r: &mut ByteReader,
    config: &ModelConfig,
) -> Result<Vec<Option<LayerParams>>, NnError> {
    let mut params = Vec::with_capacity(config.layers.len());
    for (idx, spec) in config.layers.iter().enumerate() {
        let count = r.u32()?;
        let expected = spec.param_shapes();
        match (count, expected) {
            (0, None) => params.push(None),
            (2, Some((wshape, blen))) => {
                let weights = r.tensor(idx, &wshape)?;
                let biases = r.tensor(idx, &[blen])?;
                params.push(Some(LayerParams { weights, biases }));
            }
            _ => {
                return Err(NnError::ShapeHeaderMismatch {
                    layer: idx,
                    detail: format!("{count} tensors recorded for {spec}"),
                })
            }
        }
    }
    Ok(params)
}

pub(crate) fn read_model(r: &mut ByteReader) -> Result<Model, NnError> {
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(NnError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(NnError::VersionUnsupported(version));
    }
    let config = ModelConfig::from_canonical_text(&r.string()?)?;
    let n_classes = r.u32()? as usize;
    let mut class_names = Vec::with_capacity(n_classes.min(4096));
    for _ in 0..n_classes {
        class_names.push(r.string()?);
    }
    let n_flags = r.u32()? as usize;
    if n_flags != config.layers.len() {
        return Err(NnError::ShapeHeaderMismatch {
            layer: 0,
            detail: format!("{n_flags} frozen flags for {} layers", config.layers.len()),
        });
    }
    let frozen = r.take(n_flags)?.iter().map(|&b| b != 0).collect();
    let params = read_layer_tensors(r, &config)?;
    Model::new(config, params, Some(frozen), class_names)
}

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank() as u32);
        for &e in t.shape() {
            self.u32(e as u32);
        }
        self.buf.reserve(t.len() * 4);
        for v in t.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(NnError::TruncatedFile)?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn string(&mut self) -> Result<String, NnError> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| NnError::ConfigSyntax("invalid UTF-8".into()))
    }

    /// Reads a tensor whose header must equal `expected`.
    pub fn tensor(&mut self, layer: usize, expected: &[usize]) -> Result<Tensor, NnError> {
        let rank = self.u32()? as usize;
        if rank == 0 || rank > super::tensor::MAX_RANK {
            return Err(NnError::ShapeHeaderMismatch {
                layer,
                detail: format!("rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        if shape != expected {
            return Err(NnError::ShapeHeaderMismatch {
                layer,
                detail: format!("header {shape:?}, config implies {expected:?}"),
            });
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or(NnError::TruncatedFile)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, FreezeSelector};

    fn sample_model() -> Model {
        let mut m = build_model(ModelConfig::micro(3), 5)
            .unwrap()
            .with_class_names(vec!["a".into(), "bé".into(), "c".into()])
            .unwrap();
        m.set_frozen(FreezeSelector::Backbone);
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = sample_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.scm");
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.class_names(), m.class_names());
        assert_eq!(back.frozen(), m.frozen());
        for (a, b) in back.params().iter().zip(m.params()) {
            assert_eq!(a.is_some(), b.is_some());
            if let (Some(a), Some(b)) = (a, b) {
                assert!(a.bit_eq(b));
            }
        }
        let img = Tensor::image_from_fn(32, 32, 3, |y, x, c| ((y ^ x) + c) as f32 / 70.0).unwrap();
        assert!(m.forward(&img).unwrap().bit_eq(&back.forward(&img).unwrap()));
    }

    #[test]
    fn truncation_detected() {
        let bytes = encode_model(&sample_model());
        for cut in [1, 5, bytes.len() - 9] {
            let r = decode_model(&bytes[..bytes.len() - cut]);
            assert!(matches!(r, Err(NnError::TruncatedFile)), "cut {cut}: {r:?}");
        }
    }

    #[test]
    fn bad_magic_detected() {
        let mut bytes = encode_model(&sample_model());
        bytes[0] = b'X';
        assert!(matches!(decode_model(&bytes), Err(NnError::BadMagic)));
    }

    #[test]
    fn unsupported_version_detected() {
        let mut bytes = encode_model(&sample_model());
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode_model(&bytes), Err(NnError::VersionUnsupported(7))));
    }

    #[test]
    fn shape_header_mismatch_detected() {
        let m = sample_model();
        let mut bytes = encode_model(&m);
        // First tensor follows the header: locate it by re-encoding the prefix.
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.string(&m.config().to_canonical_text());
        w.u32(3);
        for n in m.class_names() {
            w.string(n);
        }
        w.u32(m.frozen().len() as u32);
        w.bytes(&vec![0u8; m.frozen().len()]);
        // tensor count (4 bytes), rank (4 bytes), then the first extent.
        let at = w.into_inner().len() + 8;
        bytes[at..at + 4].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(
            decode_model(&bytes),
            Err(NnError::ShapeHeaderMismatch { layer: 0, .. })
        ));
    }
}
