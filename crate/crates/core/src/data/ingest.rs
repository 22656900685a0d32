//! `<root>/<class>/*.png` ingestion, dataset export and JSONL manifests.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::frames::sorted_pngs;
use super::{load_png, resize_bilinear, save_png, DataError, LabeledDataset, Sample, Split};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub source_id: String,
    pub class: String,
    pub split: Split,
}

/// Loads every class directory under `root`. Class names are the sorted
/// directory names; samples are ordered by source id (`class/file.png`) and
/// all start in the train split.
pub fn ingest_directory(root: impl AsRef<Path>, target_size: (usize, usize)) -> Result<LabeledDataset, DataError> {
    let root = root.as_ref();
    let mut class_dirs: Vec<_> = fs::read_dir(root)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if class_dirs.is_empty() {
        return Err(DataError::NoClasses(root.to_path_buf()));
    }
    let mut class_names = Vec::with_capacity(class_dirs.len());
    let mut samples = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let class = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| DataError::Invalid(format!("non-UTF-8 class directory {}", dir.display())))?
            .to_string();
        let files = sorted_pngs(dir)?;
        if files.is_empty() {
            return Err(DataError::NoImagesForClass(class));
        }
        for file in files {
            let name = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let image = resize_bilinear(&load_png(&file)?, target_size)?;
            samples.push(Sample {
                image,
                label,
                split: Split::Train,
                source_id: format!("{class}/{name}"),
            });
        }
        class_names.push(class);
    }
    samples.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    LabeledDataset::new(samples, class_names)
}

pub fn manifest_records(dataset: &LabeledDataset) -> Vec<ManifestRecord> {
    dataset
        .samples()
        .iter()
        .map(|s| ManifestRecord {
            source_id: s.source_id.clone(),
            class: dataset.class_names()[s.label].clone(),
            split: s.split,
        })
        .collect()
}

pub fn write_manifest(dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for rec in manifest_records(dataset) {
        let line = serde_json::to_string(&rec).expect("manifest records serialize");
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>, DataError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| DataError::Manifest {
            line: i + 1,
            reason: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// Sets each sample's split from the manifest record with the same source
/// id. Every sample must be covered and classes must agree.
pub fn apply_manifest(dataset: &mut LabeledDataset, records: &[ManifestRecord]) -> Result<(), DataError> {
    let by_id: HashMap<&str, &ManifestRecord> = records.iter().map(|r| (r.source_id.as_str(), r)).collect();
    let names = dataset.class_names().to_vec();
    for s in dataset.samples_mut() {
        let rec = by_id
            .get(s.source_id.as_str())
            .ok_or_else(|| DataError::Invalid(format!("manifest has no record for {}", s.source_id)))?;
        if rec.class != names[s.label] {
            return Err(DataError::Invalid(format!(
                "manifest puts {} in class {:?}, directory says {:?}",
                s.source_id, rec.class, names[s.label]
            )));
        }
        s.split = rec.split;
    }
    Ok(())
}

/// Writes every sample as `<root>/<source_id>` plus the manifest. Source ids
/// must be `class/file.png` so the result re-ingests to the same dataset.
pub fn write_dataset_dir(dataset: &LabeledDataset, root: impl AsRef<Path>) -> Result<(), DataError> {
    let root = root.as_ref();
    for name in dataset.class_names() {
        fs::create_dir_all(root.join(name))?;
    }
    for s in dataset.samples() {
        let expected_prefix = format!("{}/", dataset.class_names()[s.label]);
        if !s.source_id.starts_with(&expected_prefix) || s.source_id[expected_prefix.len()..].contains('/') {
            return Err(DataError::Invalid(format!(
                "source id {} is not of the form class/file.png",
                s.source_id
            )));
        }
        save_png(&s.image, root.join(&s.source_id))?;
    }
    write_manifest(dataset, root.join(MANIFEST_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn write_class(root: &Path, class: &str, n: usize) {
        let dir = root.join(class);
        fs::create_dir_all(&dir).unwrap();
        for i in 0..n {
            let img = Tensor::filled(vec![10, 12, 3], i as f32 / 10.0).unwrap();
            save_png(&img, dir.join(format!("{i}.png"))).unwrap();
        }
    }

    #[test]
    fn two_classes_three_images() {
        let dir = tempfile::tempdir().unwrap();
        write_class(dir.path(), "watches", 3);
        write_class(dir.path(), "glasses", 3);
        let ds = ingest_directory(dir.path(), (8, 8)).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.class_names(), ["glasses", "watches"]);
        assert_eq!(ds.image_dims(), Some((8, 8, 3)));
        assert!(ds.samples().iter().all(|s| s.split == Split::Train));
        assert_eq!(ds.samples()[0].source_id, "glasses/0.png");
        assert_eq!(ds.samples()[3].label, 1);
    }

    #[test]
    fn empty_class_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_class(dir.path(), "glasses", 2);
        fs::create_dir_all(dir.path().join("watches")).unwrap();
        match ingest_directory(dir.path(), (8, 8)) {
            Err(DataError::NoImagesForClass(c)) => assert_eq!(c, "watches"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn no_classes() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ingest_directory(dir.path(), (8, 8)), Err(DataError::NoClasses(_))));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_class(dir.path(), "a", 2);
        write_class(dir.path(), "b", 2);
        let mut ds = ingest_directory(dir.path(), (10, 12)).unwrap();
        ds.samples_mut()[1].split = Split::Test;
        ds.samples_mut()[2].split = Split::Validation;
        let out = tempfile::tempdir().unwrap();
        write_dataset_dir(&ds, out.path()).unwrap();
        let mut back = ingest_directory(out.path(), (10, 12)).unwrap();
        apply_manifest(&mut back, &read_manifest(out.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn manifest_rejects_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, "{\"source_id\":\"a/1.png\",\"class\":\"a\",\"split\":\"train\",\"x\":1}\n").unwrap();
        assert!(matches!(read_manifest(&p), Err(DataError::Manifest { line: 1, .. })));
    }
}
