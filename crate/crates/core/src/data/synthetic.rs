//! Desk-scale stand-in for extracted utterance features.
//!
//! Every modality observes the same latent vector through its own fixed
//! random linear map plus Gaussian noise whose scale is set by the
//! modality's signal-to-noise ratio, so unequal ratios reproduce the
//! performance gap between modalities.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, LabelSet, Modality, ModalityBatch, Task};
use crate::error::{CompError, Result};
use crate::params::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySynth {
    pub modality: Modality,
    pub feature_dim: usize,
    /// signal variance over noise variance; `inf` gives noiseless features
    pub snr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub num_classes: usize,
    pub latent_dim: usize,
    /// Distance of each class mean from the origin along its own latent axis.
    pub class_sep: f64,
    pub task: Task,
    pub modalities: Vec<ModalitySynth>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 600,
            num_classes: 2,
            latent_dim: 8,
            class_sep: 2.0,
            task: Task::Classification,
            modalities: vec![
                ModalitySynth {
                    modality: Modality::Audio,
                    feature_dim: 24,
                    snr: 4.0,
                },
                ModalitySynth {
                    modality: Modality::Text,
                    feature_dim: 24,
                    snr: 1.0,
                },
                ModalitySynth {
                    modality: Modality::Video,
                    feature_dim: 24,
                    snr: 0.25,
                },
            ],
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CompError::Validation(m));
        if self.latent_dim < 1 {
            return fail("latent_dim must be at least 1".into());
        }
        if self.task == Task::Classification {
            if self.num_classes < 2 {
                return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
            }
            if self.num_classes > self.latent_dim {
                return fail(format!(
                    "class means sit on latent axes: latent_dim {} < num_classes {}",
                    self.latent_dim, self.num_classes
                ));
            }
        }
        if self.n_samples == 0 {
            return fail("n_samples must be positive".into());
        }
        if self.modalities.is_empty() {
            return fail("at least one modality is required".into());
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if !(m.snr > 0.0) {
                return fail(format!("snr for {} must be positive", m.modality));
            }
            if m.feature_dim == 0 {
                return fail(format!("feature_dim for {} must be positive", m.modality));
            }
            if self.modalities[..i].iter().any(|o| o.modality == m.modality) {
                return fail(format!("modality {} listed twice", m.modality));
            }
        }
        Ok(())
    }
}

/// Generated dataset together with the noise-free signal of each modality.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub dataset: Dataset,
    pub latent: Mat,
    pub signals: Vec<Mat>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    synthesize(spec).map(|s| s.dataset)
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Mat {
    Array2::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
}

/// Features are rounded to `f32` precision so they survive the on-disk
/// format unchanged.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Synthesis> {
    spec.validate()?;
    let n = spec.n_samples;
    let k = spec.latent_dim;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (labels, mut latent) = match spec.task {
        Task::Classification => {
            let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.num_classes)).collect();
            let mut means = Array2::zeros((n, k));
            for (i, &c) in y.iter().enumerate() {
                means[[i, c]] = spec.class_sep;
            }
            (LabelSet::classification(y, spec.num_classes)?, means)
        }
        Task::Regression => {
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..=3.0)).collect();
            let mut means = Array2::zeros((n, k));
            for (i, &s) in y.iter().enumerate() {
                means[[i, 0]] = s / 3.0 * spec.class_sep;
            }
            (LabelSet::Regression { y }, means)
        }
    };
    latent += &gaussian(&mut rng, (n, k));

    let mut modalities = Vec::with_capacity(spec.modalities.len());
    let mut signals = Vec::with_capacity(spec.modalities.len());
    for m in &spec.modalities {
        let stream = m.modality.index() as u64 + 1;
        let mut map_rng = ChaCha8Rng::seed_from_u64(spec.seed);
        map_rng.set_stream(stream);
        let mixing = gaussian(&mut map_rng, (k, m.feature_dim)) / (k as f64).sqrt();
        let signal = latent.dot(&mixing);

        let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
        noise_rng.set_stream(stream + 16);
        let features = if m.snr.is_infinite() {
            signal.clone()
        } else {
            let sigma = (mean_column_variance(&signal) / m.snr).sqrt();
            &signal + &(gaussian(&mut noise_rng, signal.dim()) * sigma)
        };
        let features = features.mapv(|v| v as f32 as f64);
        modalities.push(ModalityBatch::complete(m.modality, features));
        signals.push(signal);
    }
    let name = format!("synthetic-n{}-s{}", n, spec.seed);
    Ok(Synthesis {
        dataset: Dataset::new(name, modalities, labels)?,
        latent,
        signals,
    })
}

/// Mean over columns of the per-column sample variance.
pub fn mean_column_variance(x: &Mat) -> f64 {
    if x.nrows() < 2 {
        return 0.0;
    }
    let var: Array1<f64> = x.var_axis(Axis(0), 1.0);
    var.mean().unwrap_or(0.0)
}
