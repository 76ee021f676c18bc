//! Experiments: one train/evaluate run, missing-rate sweeps, the ablation
//! grid, and embedding export.

pub mod metrics;
pub mod plot;
pub mod report;

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, Config};
use crate::data::{make_missing_mask_capped, write_matrix_dataset, Dataset, Manifest, MissingMask, Modality};
use crate::error::{CompError, Result};
use crate::model::{CompModel, Stage};
use crate::params::Mat;
use crate::training::{accuracies, set_determinism, train_stage1, train_stage2, Observers, PreparedData};

pub use metrics::{compute_metrics, confusion_matrix, output_metrics, Metrics};
pub use report::{aggregate, markdown_table, write_aggregate_csv, AggregateRow, RunReport};

/// A finished run with the trained model and the data it saw.
pub struct Experiment {
    pub report: RunReport,
    pub model: CompModel,
    pub data: PreparedData,
}

/// Train both stages on `dataset` under `mask` and evaluate on the test
/// split. `config.seed` drives initialisation, shuffling, dropout and the
/// split.
pub fn run_experiment(dataset: &Dataset, config: &Config, mask: &MissingMask) -> Result<Experiment> {
    config.validate()?;
    let data = PreparedData::new(dataset, mask, config.test_fraction, config.seed)?;
    let output_width = dataset.labels.output_width();
    let mut model = CompModel::new(config, data.dims(), dataset.labels.task(), output_width, config.seed)?;
    let mut rngs = set_determinism(config.seed);
    let mut curves = train_stage1(&mut model, &data, &mut rngs, Observers::default())?;
    let (stage1_acc, _) = accuracies(&model, &data, data.eval_rows(), Stage::One)?;
    curves.extend(train_stage2(&mut model, &data, &mut rngs, Observers::default())?);
    let report = evaluate(&model, &data, dataset, mask, stage1_acc, curves)?;
    Ok(Experiment { report, model, data })
}

/// Evaluate a trained model on the evaluation rows of `data`.
pub fn evaluate(
    model: &CompModel,
    data: &PreparedData,
    dataset: &Dataset,
    mask: &MissingMask,
    stage1_modality_acc: BTreeMap<String, f64>,
    epoch_curves: Vec<crate::training::EpochLog>,
) -> Result<RunReport> {
    let rows = data.eval_rows();
    let cfg = &model.config;
    let preds = model.predict(&data.masked, &data.labels, rows, Stage::Two, cfg.ablation)?;
    let labels = data.labels.subset(rows);
    let fused = preds.fused.as_ref().expect("stage two predictions carry fused outputs");
    let metrics = output_metrics(fused, &labels, cfg.binarize_rule);
    let per_modality_acc = Modality::ALL
        .iter()
        .map(|m| {
            (
                m.name().to_string(),
                metrics::output_accuracy(&preds.modality[m.index()], &labels, cfg.binarize_rule),
            )
        })
        .collect();
    let coordinator_weight_means = preds.omega_bar.as_ref().map(|w| {
        let n = w.nrows().max(1) as f64;
        [0, 1, 2].map(|j| w.column(j).sum() / n)
    });
    Ok(RunReport {
        dataset: dataset.name.clone(),
        mr: mask.mr(),
        realized_mr: mask.missing_count() as f64 / (mask.n_samples() * mask.num_modalities()) as f64,
        seed: cfg.seed,
        ablation: cfg.ablation,
        label: cfg.ablation.label(),
        task: dataset.labels.task(),
        metrics,
        per_modality_acc,
        stage1_modality_acc,
        coordinator_weight_means,
        epoch_curves,
        config: cfg.clone(),
    })
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CompError::Config(format!("thread pool: {e}")))
}

/// Mask used for a run at nominal rate `mr` with `seed`. Rates above the
/// feasible maximum (but below 1) are capped.
pub fn sweep_mask(dataset: &Dataset, mr: f64, seed: u64) -> Result<MissingMask> {
    make_missing_mask_capped(dataset.n_samples(), dataset.modalities.len(), mr, seed)
}

/// Train and evaluate once per `(mr, seed)`, running up to `jobs` runs at a
/// time. Reports come back in `(mr, seed)` order.
pub fn mr_sweep(dataset: &Dataset, config: &Config, mr_list: &[f64], seeds: &[u64], jobs: usize) -> Result<Vec<RunReport>> {
    let grid: Vec<(f64, u64)> = mr_list
        .iter()
        .flat_map(|&mr| seeds.iter().map(move |&s| (mr, s)))
        .collect();
    for &(mr, s) in &grid {
        sweep_mask(dataset, mr, s)?;
    }
    pool(jobs)?.install(|| {
        grid.par_iter()
            .map(|&(mr, seed)| {
                let cfg = Config {
                    seed,
                    mr,
                    ..config.clone()
                };
                let mask = sweep_mask(dataset, mr, seed)?;
                Ok(run_experiment(dataset, &cfg, &mask)?.report)
            })
            .collect()
    })
}

/// Drop repeated rows, keeping first occurrences.
pub fn dedupe_rows(rows: &[Ablation]) -> Vec<Ablation> {
    let mut out: Vec<Ablation> = Vec::new();
    for r in rows {
        if out.contains(r) {
            log::warn!("duplicate ablation row {} ignored", r.label());
        } else {
            out.push(*r);
        }
    }
    out
}

/// One run per `(row, seed)`; every row sees the same mask for a seed.
pub fn ablation_grid(
    dataset: &Dataset,
    config: &Config,
    rows: &[Ablation],
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<RunReport>> {
    let rows = dedupe_rows(rows);
    let masks: BTreeMap<u64, MissingMask> = seeds
        .iter()
        .map(|&s| Ok((s, sweep_mask(dataset, config.mr, s)?)))
        .collect::<Result<_>>()?;
    let grid: Vec<(Ablation, u64)> = rows
        .iter()
        .flat_map(|&r| seeds.iter().map(move |&s| (r, s)))
        .collect();
    pool(jobs)?.install(|| {
        grid.par_iter()
            .map(|&(ablation, seed)| {
                let cfg = Config {
                    seed,
                    ablation,
                    ..config.clone()
                };
                Ok(run_experiment(dataset, &cfg, &masks[&seed])?.report)
            })
            .collect()
    })
}

/// Which representation to export.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Embedding {
    /// encoder outputs
    Z,
    /// propagated features
    ZBar,
    /// fused representation
    F,
}

impl Embedding {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "Z" | "z" => Ok(Self::Z),
            "Z_bar" | "z_bar" | "zbar" => Ok(Self::ZBar),
            "F" | "f" => Ok(Self::F),
            other => Err(CompError::Validation(format!("unknown embedding `{other}` (Z, Z_bar, F)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Z => "Z",
            Self::ZBar => "Z_bar",
            Self::F => "F",
        }
    }
}

/// Write the chosen representation of every sample, with labels and the
/// missing mask as a sidecar, in the dataset directory format.
pub fn export_embeddings(model: &CompModel, data: &PreparedData, which: Embedding, dir: &Path) -> Result<Manifest> {
    let rows: Vec<usize> = (0..data.labels.len()).collect();
    let preds = model.predict(&data.masked, &data.labels, &rows, Stage::Two, model.config.ablation)?;
    let named: Vec<(String, Mat)> = match which {
        Embedding::Z => Modality::ALL
            .iter()
            .map(|m| (format!("Z_{}", m.name()), preds.latents[m.index()].clone()))
            .collect(),
        Embedding::ZBar => Modality::ALL
            .iter()
            .map(|m| (format!("Z_bar_{}", m.name()), preds.propagated[m.index()].clone()))
            .collect(),
        Embedding::F => vec![("F".to_string(), preds.fused_repr.expect("stage two output"))],
    };
    let refs: Vec<(String, &Mat)> = named.iter().map(|(n, m)| (n.clone(), m)).collect();
    write_matrix_dataset(dir, which.name(), &refs, &data.labels, Some(&data.mask))
}
