//! Dataset directory format.
//!
//! ```text
//! manifest.json   {name, n_samples, task, num_classes?, modalities: [{name, dim, dtype, file}],
//!                  labels_file, mask_file?}
//! <modality file> row-major little-endian f32, n_samples × dim
//! labels_file     one integer class or decimal score per line
//! mask_file       n_samples lines of |M| characters in {0,1}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Dataset, LabelSet, MissingMask, Modality, ModalityBatch, Task};
use crate::error::{CompError, Result};
use crate::params::Mat;

pub const MANIFEST_FILE: &str = "manifest.json";
const DTYPE_F32LE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityEntry {
    pub name: String,
    pub dim: usize,
    pub dtype: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub n_samples: usize,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    pub modalities: Vec<ModalityEntry>,
    pub labels_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_file: Option<String>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> CompError {
    CompError::CorruptDataset {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CompError::io(path, e))
}

fn encode_f32le(x: &Mat) -> Vec<u8> {
    let mut out = Vec::with_capacity(x.len() * 4);
    for row in x.rows() {
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn labels_text(labels: &LabelSet) -> String {
    let mut s = String::new();
    match labels {
        LabelSet::Classification { y, .. } => y.iter().for_each(|c| s.push_str(&format!("{c}\n"))),
        LabelSet::Regression { y } => y.iter().for_each(|v| s.push_str(&format!("{v:?}\n"))),
    }
    s
}

/// Write `dataset` (and optionally the mask used with it) under `dir`.
pub fn write_dataset(dir: &Path, dataset: &Dataset, mask: Option<&MissingMask>) -> Result<Manifest> {
    let named: Vec<(String, &Mat)> = dataset
        .modalities
        .iter()
        .map(|b| (b.modality.name().to_string(), &b.features))
        .collect();
    write_named(dir, &dataset.name, &named, &dataset.labels, mask)
}

/// Write arbitrary named matrices sharing one label set, e.g. exported
/// embeddings.
pub fn write_matrix_dataset(
    dir: &Path,
    name: &str,
    matrices: &[(String, &Mat)],
    labels: &LabelSet,
    mask: Option<&MissingMask>,
) -> Result<Manifest> {
    write_named(dir, name, matrices, labels, mask)
}

fn write_named(
    dir: &Path,
    name: &str,
    matrices: &[(String, &Mat)],
    labels: &LabelSet,
    mask: Option<&MissingMask>,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| CompError::io(dir, e))?;
    let n = labels.len();
    let mut entries = Vec::new();
    for (mname, x) in matrices {
        if x.nrows() != n {
            return Err(CompError::Shape(format!(
                "{mname} has {} rows, labels have {n}",
                x.nrows()
            )));
        }
        let file = format!("{mname}.f32");
        write_file(&dir.join(&file), &encode_f32le(x))?;
        entries.push(ModalityEntry {
            name: mname.clone(),
            dim: x.ncols(),
            dtype: DTYPE_F32LE.into(),
            file,
        });
    }
    write_file(&dir.join("labels.txt"), labels_text(labels).as_bytes())?;
    let mask_file = match mask {
        Some(m) => {
            if m.n_samples() != n {
                return Err(CompError::Shape("mask row count differs from labels".into()));
            }
            write_file(&dir.join("mask.txt"), m.to_text().as_bytes())?;
            Some("mask.txt".to_string())
        }
        None => None,
    };
    let manifest = Manifest {
        name: name.to_string(),
        n_samples: n,
        task: labels.task(),
        num_classes: labels.num_classes(),
        modalities: entries,
        labels_file: "labels.txt".into(),
        mask_file,
    };
    write_file(
        &dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(manifest)
}

fn read_matrix(path: &Path, n: usize, dim: usize) -> Result<Mat> {
    let bytes = fs::read(path).map_err(|e| CompError::io(path, e))?;
    if bytes.len() != n * dim * 4 {
        return Err(corrupt(
            path,
            format!(
                "payload has {} bytes, manifest implies {n}×{dim}×4 = {}",
                bytes.len(),
                n * dim * 4
            ),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Array2::from_shape_vec((n, dim), values).expect("length checked"))
}

fn read_labels(path: &Path, manifest: &Manifest) -> Result<LabelSet> {
    let text = fs::read_to_string(path).map_err(|e| CompError::io(path, e))?;
    let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if lines.len() != manifest.n_samples {
        return Err(corrupt(
            path,
            format!("{} labels for {} samples", lines.len(), manifest.n_samples),
        ));
    }
    match manifest.task {
        Task::Classification => {
            let k = manifest
                .num_classes
                .ok_or_else(|| corrupt(path, "classification manifest lacks num_classes"))?;
            let y = lines
                .iter()
                .map(|l| l.parse::<usize>().map_err(|e| corrupt(path, format!("label `{l}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            LabelSet::classification(y, k).map_err(|e| corrupt(path, e.to_string()))
        }
        Task::Regression => {
            let y = lines
                .iter()
                .map(|l| l.parse::<f64>().map_err(|e| corrupt(path, format!("label `{l}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            Ok(LabelSet::Regression { y })
        }
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CompError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| corrupt(&path, e.to_string()))
}

/// Read every matrix of a dataset directory by name, with its labels and
/// optional mask. Accepts directories whose entries are not modalities,
/// such as exported embeddings.
pub fn read_matrix_dataset(dir: &Path) -> Result<(Manifest, Vec<(String, Mat)>, LabelSet, Option<MissingMask>)> {
    let manifest = read_manifest(dir)?;
    let mut matrices = Vec::new();
    for entry in &manifest.modalities {
        let path: PathBuf = dir.join(&entry.file);
        if entry.dtype != DTYPE_F32LE {
            return Err(corrupt(&path, format!("unsupported dtype {}", entry.dtype)));
        }
        matrices.push((entry.name.clone(), read_matrix(&path, manifest.n_samples, entry.dim)?));
    }
    let labels = read_labels(&dir.join(&manifest.labels_file), &manifest)?;
    let mask = match &manifest.mask_file {
        Some(f) => {
            let path = dir.join(f);
            let text = fs::read_to_string(&path).map_err(|e| CompError::io(&path, e))?;
            let width = text.lines().next().map_or(0, |l| l.trim().len());
            Some(
                MissingMask::from_text(&text, manifest.n_samples, width)
                    .map_err(|e| corrupt(&path, e.to_string()))?,
            )
        }
        None => None,
    };
    Ok((manifest, matrices, labels, mask))
}

/// Read a dataset directory. Returns the stored mask when the manifest
/// names one.
pub fn read_dataset(dir: &Path) -> Result<(Dataset, Option<MissingMask>)> {
    let (manifest, matrices, labels, mask) = read_matrix_dataset(dir)?;
    let mut batches = Vec::new();
    for (name, x) in matrices {
        let modality = Modality::parse(&name).map_err(|e| corrupt(dir, e.to_string()))?;
        batches.push(ModalityBatch::complete(modality, x));
    }
    if let Some(m) = &mask {
        if m.num_modalities() != batches.len() {
            return Err(corrupt(dir, "mask width differs from modality count"));
        }
    }
    let dataset = Dataset::new(manifest.name.clone(), batches, labels)
        .map_err(|e| corrupt(dir, e.to_string()))?;
    Ok((dataset, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, make_missing_mask, SyntheticSpec};

    #[test]
    fn round_trip_with_mask() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            n_samples: 100,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let mask = make_missing_mask(100, 3, 0.3, 1).unwrap();
        let manifest = write_dataset(dir.path(), &ds, Some(&mask)).unwrap();
        assert_eq!(manifest.modalities.len(), 3);
        assert_eq!(manifest.n_samples, 100);
        let (back, back_mask) = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back_mask.unwrap().observed(), mask.observed());
    }

    #[test]
    fn regression_labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let x = Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f64 * 0.5);
        let ds = Dataset::new(
            "r",
            vec![ModalityBatch::complete(Modality::Text, x)],
            LabelSet::Regression {
                y: vec![-2.75, 0.1, 3.0],
            },
        )
        .unwrap();
        write_dataset(dir.path(), &ds, None).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap().0, ds);
    }

    #[test]
    fn dimension_mismatch_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let x = Array2::<f64>::zeros((4, 4));
        let ds = Dataset::new(
            "bad",
            vec![ModalityBatch::complete(Modality::Audio, x)],
            LabelSet::classification(vec![0, 1, 0, 1], 2).unwrap(),
        )
        .unwrap();
        let mut manifest = write_dataset(dir.path(), &ds, None).unwrap();
        manifest.modalities[0].dim = 5;
        fs::write(
            dir.path().join(MANIFEST_FILE),
            serde_json::to_string(&manifest).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(CompError::CorruptDataset { .. })
        ));
    }
}
