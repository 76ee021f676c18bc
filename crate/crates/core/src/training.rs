//! Two-stage training.
//!
//! Stage one fits every modality's encoder stack on its own (masked
//! reconstruction plus task loss on observed instances). Stage two trains
//! the whole pipeline on the fused task loss plus weighted per-modality
//! task losses, scaling the rows of each prototype compression gradient by
//! the modulation weights before the optimizer step.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{gather_batch, Batch, Dataset, LabelSet, MissingMask, Modality, ModalityBatch};
use crate::error::{CompError, Result};
use crate::evaluation::metrics::output_accuracy;
use crate::model::{CompModel, Stage};
use crate::optim::Optimizer;
use crate::prompting::{apply_gradient_modulation, logit_error, modulation_weights};
use crate::propagation::PipelineTrace;

const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_SPLIT: u64 = 3;

/// Random streams of one run, all derived from a single seed. Model
/// initialisation and masks take the seed itself.
#[derive(Debug, Clone)]
pub struct RunRngs {
    pub seed: u64,
    pub shuffle: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn set_determinism(seed: u64) -> RunRngs {
    RunRngs {
        seed,
        shuffle: stream(seed, STREAM_SHUFFLE),
        dropout: stream(seed, STREAM_DROPOUT),
    }
}

/// Deterministic train/test partition; both halves are sorted.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, STREAM_SPLIT));
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

/// A dataset with its mask applied and its split fixed.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub masked: Vec<ModalityBatch>,
    pub labels: LabelSet,
    pub mask: MissingMask,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl PreparedData {
    pub fn new(dataset: &Dataset, mask: &MissingMask, test_fraction: f64, seed: u64) -> Result<Self> {
        if mask.n_samples() != dataset.n_samples() || mask.num_modalities() != 3 {
            return Err(CompError::Validation(format!(
                "mask is {}×{}, dataset has {} samples and 3 modalities are required",
                mask.n_samples(),
                mask.num_modalities(),
                dataset.n_samples()
            )));
        }
        dataset.dims()?;
        let (train, test) = split_indices(dataset.n_samples(), test_fraction, seed);
        if train.is_empty() {
            return Err(CompError::Validation("training split is empty".into()));
        }
        Ok(Self {
            masked: dataset.with_mask(mask)?,
            labels: dataset.labels.clone(),
            mask: mask.clone(),
            train,
            test,
        })
    }

    /// Rows used for per-epoch accuracies: the test split, or the training
    /// split when there is no test split.
    pub fn eval_rows(&self) -> &[usize] {
        if self.test.is_empty() {
            &self.train
        } else {
            &self.test
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        let mut dims = [0; 3];
        for b in &self.masked {
            dims[b.modality.index()] = b.dim();
        }
        dims
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    /// Mean batch loss.
    pub loss: f64,
    pub per_modality_acc: BTreeMap<String, f64>,
    pub fused_acc: Option<f64>,
    /// Seconds since the stage started.
    pub wall_time: f64,
    /// Parameter checksum at the end of the epoch.
    pub checksum: u64,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log entry serializes")
    }
}

/// Accuracy of each modality head and the fused head on `rows`.
pub fn accuracies(
    model: &CompModel,
    data: &PreparedData,
    rows: &[usize],
    stage: Stage,
) -> Result<(BTreeMap<String, f64>, Option<f64>)> {
    let preds = model.predict(&data.masked, &data.labels, rows, stage, model.config.ablation)?;
    let labels = data.labels.subset(rows);
    let rule = model.config.binarize_rule;
    let per = Modality::ALL
        .iter()
        .map(|m| (m.name().to_string(), output_accuracy(&preds.modality[m.index()], &labels, rule)))
        .collect();
    let fused = preds.fused.as_ref().map(|f| output_accuracy(f, &labels, rule));
    Ok((per, fused))
}

fn shuffled_batches(rows: &[usize], batch_n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order = rows.to_vec();
    order.shuffle(rng);
    order.chunks(batch_n).map(<[usize]>::to_vec).collect()
}

fn finite_loss(loss: f64, stage: Stage, epoch: usize, batch: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(CompError::Divergence(format!(
            "non-finite loss {loss} in stage {stage:?}, epoch {epoch}, batch {batch}"
        )))
    }
}

/// Optional sinks for training progress.
#[derive(Default)]
pub struct Observers<'a> {
    /// Receives each epoch's log line.
    pub log: Option<&'a mut dyn Write>,
    /// Receives the pipeline trace of every stage-two batch.
    pub trace: Option<&'a mut dyn FnMut(&PipelineTrace)>,
}

fn emit(obs: &mut Observers<'_>, entry: &EpochLog) -> Result<()> {
    if let Some(w) = obs.log.as_deref_mut() {
        writeln!(w, "{}", entry.to_json_line())
            .map_err(|e| CompError::io(std::path::Path::new("<training log>"), e))?;
    }
    Ok(())
}

/// One stage-one optimizer step; returns the batch loss.
pub fn stage1_step(model: &mut CompModel, opt: &mut Optimizer, batch: &Batch, trainable: &[bool]) -> Result<f64> {
    let (loss, mut grads) = {
        let mut g = Graph::new(&model.store);
        let out = model.forward_stage1(&mut g, batch)?;
        let loss = g.value(out.loss)[[0, 0]];
        (loss, g.backward(out.loss).into_params())
    };
    if loss.is_finite() {
        grads.retain(|id| trainable[id.index()]);
        opt.step(&mut model.store, &grads);
    }
    Ok(loss)
}

pub fn train_stage1(
    model: &mut CompModel,
    data: &PreparedData,
    rngs: &mut RunRngs,
    mut obs: Observers<'_>,
) -> Result<Vec<EpochLog>> {
    let cfg = model.config.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.eta, model.store.len());
    let trainable = model.trainable(Stage::One);
    let start = Instant::now();
    let mut logs = Vec::with_capacity(cfg.epochs_stage1);
    for epoch in 0..cfg.epochs_stage1 {
        let mut total = 0.0;
        let batches = shuffled_batches(&data.train, cfg.batch_n, &mut rngs.shuffle);
        for (b, rows) in batches.iter().enumerate() {
            let batch = gather_batch(&data.masked, &data.labels, rows, cfg.batch_n)?;
            total += finite_loss(stage1_step(model, &mut opt, &batch, &trainable)?, Stage::One, epoch, b)?;
        }
        let (per, _) = accuracies(model, data, data.eval_rows(), Stage::One)?;
        let entry = EpochLog {
            epoch,
            stage: Stage::One,
            loss: total / batches.len() as f64,
            per_modality_acc: per,
            fused_acc: None,
            wall_time: start.elapsed().as_secs_f64(),
            checksum: model.checksum(),
        };
        log::info!("stage 1 epoch {epoch}: loss {:.4}", entry.loss);
        emit(&mut obs, &entry)?;
        logs.push(entry);
    }
    Ok(logs)
}

/// What one stage-two step did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Modulation weights applied to each modality's compression gradient.
    pub weights: Option<[Vec<f64>; 3]>,
}

pub fn stage2_step(
    model: &mut CompModel,
    opt: &mut Optimizer,
    batch: &Batch,
    dropout: &mut ChaCha8Rng,
    trainable: &[bool],
    trace: Option<&mut PipelineTrace>,
) -> Result<StepOutcome> {
    let ablation = model.config.ablation;
    let (loss, mut grads, weights) = {
        let mut g = Graph::new(&model.store);
        let out = model.forward_stage2(&mut g, batch, ablation, Some(dropout), trace)?;
        let loss = g.value(out.loss)[[0, 0]];
        let mut grads = g.backward(out.loss).into_params();
        let mut weights = None;
        if ablation.gm && out.prototypes.is_some() && loss.is_finite() {
            let errors: Vec<Vec<f64>> = out
                .error_outputs
                .iter()
                .map(|&v| {
                    let mut e = logit_error(g.value(v), &batch.labels);
                    for (e, &ok) in e.iter_mut().zip(&batch.valid) {
                        if !ok {
                            *e = 0.0;
                        }
                    }
                    e
                })
                .collect();
            let cfg = &model.config;
            let w = if cfg.force_neutral_modulation {
                vec![vec![1.0; batch.len()]; 3]
            } else {
                modulation_weights(&errors, cfg.eps, cfg.w_min, cfg.w_max)?
            };
            for bank in &model.banks {
                if let Some(grad) = grads.get_mut(bank.compression_weight()) {
                    apply_gradient_modulation(grad, &w[bank.modality.index()]);
                }
            }
            let mut it = w.into_iter();
            weights = Some([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()]);
        }
        (loss, grads, weights)
    };
    if loss.is_finite() {
        grads.retain(|id| trainable[id.index()]);
        opt.step(&mut model.store, &grads);
    }
    Ok(StepOutcome { loss, weights })
}

pub fn train_stage2(
    model: &mut CompModel,
    data: &PreparedData,
    rngs: &mut RunRngs,
    mut obs: Observers<'_>,
) -> Result<Vec<EpochLog>> {
    let cfg = model.config.clone();
    if data.dims() != model.dims {
        return Err(CompError::Checkpoint(format!(
            "model input widths {:?} differ from dataset {:?}",
            model.dims,
            data.dims()
        )));
    }
    for w in cfg.ablation.warnings() {
        log::warn!("{w}");
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.eta_stage2, model.store.len());
    let trainable = model.trainable(Stage::Two);
    let start = Instant::now();
    let mut logs = Vec::with_capacity(cfg.epochs_stage2);
    for epoch in 0..cfg.epochs_stage2 {
        let mut total = 0.0;
        let batches = shuffled_batches(&data.train, cfg.batch_n, &mut rngs.shuffle);
        for (b, rows) in batches.iter().enumerate() {
            let batch = gather_batch(&data.masked, &data.labels, rows, cfg.batch_n)?;
            let mut trace = obs.trace.as_ref().map(|_| PipelineTrace::default());
            let step = stage2_step(model, &mut opt, &batch, &mut rngs.dropout, &trainable, trace.as_mut())?;
            if let (Some(t), Some(f)) = (trace.as_ref(), obs.trace.as_deref_mut()) {
                f(t);
            }
            total += finite_loss(step.loss, Stage::Two, epoch, b)?;
        }
        let (per, fused) = accuracies(model, data, data.eval_rows(), Stage::Two)?;
        let entry = EpochLog {
            epoch,
            stage: Stage::Two,
            loss: total / batches.len() as f64,
            per_modality_acc: per,
            fused_acc: fused,
            wall_time: start.elapsed().as_secs_f64(),
            checksum: model.checksum(),
        };
        log::info!("stage 2 epoch {epoch}: loss {:.4} fused acc {:?}", entry.loss, entry.fused_acc);
        emit(&mut obs, &entry)?;
        logs.push(entry);
    }
    Ok(logs)
}
