//! Multi-modal data model: modality batches with missing indicators,
//! labels, batching with padding, missing-mask generation, a synthetic
//! generator and the on-disk dataset format.

mod io;
mod mask;
mod synthetic;

use std::fmt;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CompError, Result};
use crate::params::Mat;

pub use io::{
    read_dataset, read_manifest, read_matrix_dataset, write_dataset, write_matrix_dataset, Manifest,
    ModalityEntry, MANIFEST_FILE,
};
pub use mask::{make_missing_mask, make_missing_mask_capped, max_missing_rate, MissingMask};
pub use synthetic::{generate_synthetic, mean_column_variance, synthesize, ModalitySynth, Synthesis, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "a")]
    Audio,
    #[serde(rename = "t")]
    Text,
    #[serde(rename = "v")]
    Video,
}

impl Modality {
    /// Canonical order; fixes concatenation layouts everywhere.
    pub const ALL: [Modality; 3] = [Modality::Audio, Modality::Text, Modality::Video];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "a",
            Modality::Text => "t",
            Modality::Video => "v",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "a" | "audio" => Ok(Modality::Audio),
            "t" | "text" => Ok(Modality::Text),
            "v" | "video" => Ok(Modality::Video),
            other => Err(CompError::Validation(format!("unknown modality `{other}`"))),
        }
    }

    /// The other two modalities in canonical order.
    pub fn others(self) -> [Modality; 2] {
        match self {
            Modality::Audio => [Modality::Text, Modality::Video],
            Modality::Text => [Modality::Audio, Modality::Video],
            Modality::Video => [Modality::Audio, Modality::Text],
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Raw features of one modality, its missing indicators and the
/// zero-imputed view.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBatch {
    pub modality: Modality,
    pub features: Mat,
    pub observed: Vec<bool>,
    pub imputed: Mat,
}

impl ModalityBatch {
    pub fn new(modality: Modality, features: Mat, observed: Vec<bool>) -> Result<Self> {
        if observed.len() != features.nrows() {
            return Err(CompError::Shape(format!(
                "{modality}: {} indicators for {} rows",
                observed.len(),
                features.nrows()
            )));
        }
        let mut batch = Self {
            modality,
            imputed: features.clone(),
            features,
            observed,
        };
        batch.refresh_imputed();
        Ok(batch)
    }

    /// Every instance observed.
    pub fn complete(modality: Modality, features: Mat) -> Self {
        let n = features.nrows();
        Self::new(modality, features, vec![true; n]).expect("lengths agree")
    }

    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Same features under a different set of missing indicators.
    pub fn with_observed(&self, observed: Vec<bool>) -> Result<Self> {
        Self::new(self.modality, self.features.clone(), observed)
    }

    fn refresh_imputed(&mut self) {
        self.imputed.assign(&self.features);
        for (mut row, &obs) in self.imputed.rows_mut().into_iter().zip(&self.observed) {
            if !obs {
                row.fill(0.0);
            }
        }
    }
}

/// Recompute the zero-imputed view from the raw features and indicators.
pub fn zero_impute(batch: &ModalityBatch) -> ModalityBatch {
    let mut out = batch.clone();
    out.refresh_imputed();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LabelSet {
    Classification { y: Vec<usize>, num_classes: usize },
    /// Sentiment scores, nominally in [-3, 3].
    Regression { y: Vec<f64> },
}

impl LabelSet {
    pub fn classification(y: Vec<usize>, num_classes: usize) -> Result<Self> {
        if let Some(bad) = y.iter().find(|&&c| c >= num_classes) {
            return Err(CompError::Validation(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(LabelSet::Classification { y, num_classes })
    }

    pub fn task(&self) -> Task {
        match self {
            LabelSet::Classification { .. } => Task::Classification,
            LabelSet::Regression { .. } => Task::Regression,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            LabelSet::Classification { y, .. } => y.len(),
            LabelSet::Regression { y } => y.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self {
            LabelSet::Classification { num_classes, .. } => Some(*num_classes),
            LabelSet::Regression { .. } => None,
        }
    }

    /// Width of a prediction head for this task.
    pub fn output_width(&self) -> usize {
        self.num_classes().unwrap_or(1)
    }

    pub fn subset(&self, idx: &[usize]) -> LabelSet {
        match self {
            LabelSet::Classification { y, num_classes } => LabelSet::Classification {
                y: idx.iter().map(|&i| y[i]).collect(),
                num_classes: *num_classes,
            },
            LabelSet::Regression { y } => LabelSet::Regression {
                y: idx.iter().map(|&i| y[i]).collect(),
            },
        }
    }
}

/// A whole dataset with complete raw features; missingness is applied
/// separately through a [`MissingMask`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub modalities: Vec<ModalityBatch>,
    pub labels: LabelSet,
}

impl Dataset {
    pub fn new(name: impl Into<String>, modalities: Vec<ModalityBatch>, labels: LabelSet) -> Result<Self> {
        let n = labels.len();
        for (i, m) in modalities.iter().enumerate() {
            if m.n_samples() != n {
                return Err(CompError::Shape(format!(
                    "modality {} has {} rows, labels have {n}",
                    m.modality,
                    m.n_samples()
                )));
            }
            if modalities[..i].iter().any(|o| o.modality == m.modality) {
                return Err(CompError::Validation(format!("duplicate modality {}", m.modality)));
            }
        }
        Ok(Self {
            name: name.into(),
            modalities,
            labels,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn modality(&self, m: Modality) -> Option<&ModalityBatch> {
        self.modalities.iter().find(|b| b.modality == m)
    }

    /// Input widths in canonical modality order; errors unless all three
    /// modalities are present.
    pub fn dims(&self) -> Result<[usize; 3]> {
        let mut dims = [0; 3];
        for m in Modality::ALL {
            dims[m.index()] = self
                .modality(m)
                .ok_or_else(|| CompError::Validation(format!("dataset lacks modality {m}")))?
                .dim();
        }
        Ok(dims)
    }

    /// Apply a mask whose columns follow canonical modality order.
    pub fn with_mask(&self, mask: &MissingMask) -> Result<Vec<ModalityBatch>> {
        if mask.n_samples() != self.n_samples() || mask.num_modalities() != self.modalities.len() {
            return Err(CompError::Shape(format!(
                "mask is {}×{}, dataset is {}×{}",
                mask.n_samples(),
                mask.num_modalities(),
                self.n_samples(),
                self.modalities.len()
            )));
        }
        let mut order: Vec<&ModalityBatch> = self.modalities.iter().collect();
        order.sort_by_key(|b| b.modality);
        order
            .into_iter()
            .enumerate()
            .map(|(j, b)| b.with_observed(mask.column(j)))
            .collect()
    }
}

/// Labels of one batch aligned with its rows; padded rows carry a dummy value.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchLabels {
    Class(Vec<usize>),
    Score(Vec<f64>),
}

/// A fixed-size training or evaluation batch in canonical modality order.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Zero-imputed inputs.
    pub inputs: [Mat; 3],
    pub observed: [Vec<bool>; 3],
    /// False for padding rows.
    pub valid: Vec<bool>,
    /// Dataset row of every batch row, `None` for padding.
    pub rows: Vec<Option<usize>>,
    pub labels: BatchLabels,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn valid_weights(&self) -> Vec<f64> {
        self.valid.iter().map(|&v| f64::from(u8::from(v))).collect()
    }

    pub fn observed_weights(&self, m: Modality) -> Vec<f64> {
        self.observed[m.index()]
            .iter()
            .zip(&self.valid)
            .map(|(&o, &v)| f64::from(u8::from(o && v)))
            .collect()
    }
}

/// Gather rows of masked modality batches into a batch of `size` rows,
/// padding with zero rows marked missing.
pub fn gather_batch(
    masked: &[ModalityBatch],
    labels: &LabelSet,
    rows: &[usize],
    size: usize,
) -> Result<Batch> {
    if rows.len() > size {
        return Err(CompError::Shape(format!(
            "{} rows do not fit a batch of {size}",
            rows.len()
        )));
    }
    if masked.len() != 3 {
        return Err(CompError::Validation("batches need exactly three modalities".into()));
    }
    let mut inputs: [Mat; 3] = Default::default();
    let mut observed: [Vec<bool>; 3] = Default::default();
    for b in masked {
        let j = b.modality.index();
        let mut x = Array2::zeros((size, b.dim()));
        let mut obs = vec![false; size];
        for (slot, &r) in rows.iter().enumerate() {
            x.row_mut(slot).assign(&b.imputed.row(r));
            obs[slot] = b.observed[r];
        }
        inputs[j] = x;
        observed[j] = obs;
    }
    let mut valid = vec![false; size];
    valid[..rows.len()].fill(true);
    let mut slots: Vec<Option<usize>> = rows.iter().map(|&r| Some(r)).collect();
    slots.resize(size, None);
    let labels = match labels {
        LabelSet::Classification { y, .. } => {
            BatchLabels::Class(slots.iter().map(|r| r.map_or(0, |r| y[r])).collect())
        }
        LabelSet::Regression { y } => {
            BatchLabels::Score(slots.iter().map(|r| r.map_or(0.0, |r| y[r])).collect())
        }
    };
    Ok(Batch {
        inputs,
        observed,
        valid,
        rows: slots,
        labels,
    })
}

/// Column means of a matrix; used by diagnostics.
pub fn column_means(x: &Mat) -> Array1<f64> {
    x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_impute_definition() {
        let b = ModalityBatch::new(Modality::Audio, array![[1.0, 2.0], [3.0, 4.0]], vec![true, false])
            .unwrap();
        assert_eq!(b.imputed, array![[1.0, 2.0], [0.0, 0.0]]);
        assert_eq!(b.features, array![[1.0, 2.0], [3.0, 4.0]]);
    }

    #[test]
    fn zero_impute_identity_and_all_missing() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let all = ModalityBatch::complete(Modality::Text, x.clone());
        assert_eq!(zero_impute(&all).imputed, x);
        let none = all.with_observed(vec![false, false]).unwrap();
        assert_eq!(zero_impute(&none).imputed, Array2::<f64>::zeros((2, 2)));
    }

    #[test]
    fn zero_impute_is_idempotent() {
        let b = ModalityBatch::new(Modality::Video, array![[1.0], [-2.0], [5.0]], vec![false, true, false])
            .unwrap();
        let once = zero_impute(&b);
        assert_eq!(zero_impute(&once), once);
    }

    #[test]
    fn gather_pads_with_missing_rows() {
        let x = array![[1.0], [2.0], [3.0]];
        let masked: Vec<_> = Modality::ALL
            .iter()
            .map(|&m| ModalityBatch::complete(m, x.clone()))
            .collect();
        let labels = LabelSet::classification(vec![0, 1, 1], 2).unwrap();
        let b = gather_batch(&masked, &labels, &[2, 0], 4).unwrap();
        assert_eq!(b.valid, vec![true, true, false, false]);
        assert_eq!(b.inputs[0], array![[3.0], [1.0], [0.0], [0.0]]);
        assert_eq!(b.observed[1], vec![true, true, false, false]);
        assert_eq!(b.labels, BatchLabels::Class(vec![1, 0, 0, 0]));
        assert!(gather_batch(&masked, &labels, &[0, 1, 2], 2).is_err());
    }

    #[test]
    fn out_of_range_label_rejected() {
        assert!(LabelSet::classification(vec![0, 2], 2).is_err());
    }
}
