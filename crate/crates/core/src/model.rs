//! The full model: per-modality encoder stacks, prototype banks, the
//! propagation pipeline, the coordinator and the fusion classifier, all in
//! one parameter store.

use ndarray::{concatenate, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{softmax_rows, Graph, Var};
use crate::config::{Ablation, Config, LossReduction};
use crate::data::{gather_batch, Batch, BatchLabels, LabelSet, Modality, ModalityBatch, Task};
use crate::encoders::{stage1_loss, EncoderStack, Stage1Terms};
use crate::error::{CompError, Result};
use crate::fusion::{fuse, task_loss_graph, Coordinator, FusionHead};
use crate::nn::Mlp;
use crate::params::{Mat, ParamId, ParamStore};
use crate::prompting::{FrozenPrototypes, PrototypeBank};
use crate::propagation::{PipelineTrace, Propagation};

/// Training stage a forward pass or parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    One,
    Two,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompModel {
    pub store: ParamStore,
    pub config: Config,
    /// Input widths in canonical modality order.
    pub dims: [usize; 3],
    pub task: Task,
    /// Number of classes, or 1 for regression.
    pub output_width: usize,
    pub stacks: [EncoderStack; 3],
    pub banks: [PrototypeBank; 3],
    pub propagation: Propagation,
    pub coordinator: Coordinator,
    pub fusion_head: FusionHead,
    /// Separate projections for the logit error, when configured.
    pub error_heads: Option<[Mlp; 3]>,
}

pub struct Stage1Output {
    pub loss: Var,
    pub latents: [Var; 3],
    pub outputs: [Var; 3],
}

pub struct Stage2Output {
    pub loss: Var,
    /// Raw fused head outputs (class scores or a score).
    pub fused_outputs: Var,
    /// Per-modality head outputs on the propagated features.
    pub modality_outputs: [Var; 3],
    /// Outputs used for the logit error of gradient modulation.
    pub error_outputs: [Var; 3],
    pub latents: [Var; 3],
    pub propagated: [Var; 3],
    pub fused: Var,
    pub omega: Option<Var>,
    pub omega_bar: Option<Var>,
    pub prototypes: Option<[FrozenPrototypes; 3]>,
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v);
    }
    acc
}

impl CompModel {
    /// Build a freshly initialised model. Initialisation draws only from
    /// `seed`, so the same arguments always give the same weights.
    pub fn new(config: &Config, dims: [usize; 3], task: Task, output_width: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if dims.iter().any(|&d| d == 0) {
            return Err(CompError::Validation("every modality needs a positive input width".into()));
        }
        if output_width == 0 || (task == Task::Regression && output_width != 1) {
            return Err(CompError::Validation(format!("invalid output width {output_width}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d;
        let stacks = Modality::ALL
            .map(|m| EncoderStack::new(&mut store, m, dims[m.index()], d, output_width, &mut rng));
        let banks = Modality::ALL.map(|m| {
            PrototypeBank::new(&mut store, m, config.batch_n, config.c, config.dropout_pg, &mut rng)
        });
        let propagation = Propagation::new(
            &mut store,
            config.blocks,
            d,
            config.p,
            config.m_msa,
            config.heads,
            config.lambda,
            config.mask_neg,
            &mut rng,
        );
        let coordinator = Coordinator::new(&mut store, d, &mut rng);
        let fusion_head = FusionHead::new(&mut store, d, output_width, &mut rng);
        let error_heads = config.separate_error_head.then(|| {
            Modality::ALL.map(|m| Mlp::new(&mut store, &format!("{}/proj", m.name()), &[d, output_width], &mut rng))
        });
        Ok(Self {
            store,
            config: config.clone(),
            dims,
            task,
            output_width,
            stacks,
            banks,
            propagation,
            coordinator,
            fusion_head,
            error_heads,
        })
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        for m in Modality::ALL {
            let x = &batch.inputs[m.index()];
            if x.ncols() != self.dims[m.index()] {
                return Err(CompError::Shape(format!(
                    "{m}: batch width {} but model expects {}",
                    x.ncols(),
                    self.dims[m.index()]
                )));
            }
            crate::encoders::check_finite(x, m)?;
        }
        Ok(())
    }

    /// Encoders, reconstructions and per-modality heads on zero-imputed
    /// inputs, with the stage-1 objective.
    pub fn forward_stage1(&self, g: &mut Graph, batch: &Batch) -> Result<Stage1Output> {
        self.check_batch(batch)?;
        let mut latents = Vec::with_capacity(3);
        let mut outputs = Vec::with_capacity(3);
        let mut terms = Vec::with_capacity(3);
        for m in Modality::ALL {
            let stack = &self.stacks[m.index()];
            let x = g.constant(batch.inputs[m.index()].clone());
            let z = stack.encode(g, x);
            let recon = stack.reconstruct(g, z);
            let logits = stack.predict(g, z);
            latents.push(z);
            outputs.push(logits);
            terms.push(Stage1Terms {
                modality: m,
                recon,
                x_hat: &batch.inputs[m.index()],
                logits,
                observed: batch.observed_weights(m),
            });
        }
        let loss = stage1_loss(g, &terms, &batch.labels, self.config.loss_reduction);
        Ok(Stage1Output {
            loss,
            latents: [latents[0], latents[1], latents[2]],
            outputs: [outputs[0], outputs[1], outputs[2]],
        })
    }

    /// Full second-stage forward pass under `ablation`.
    pub fn forward_stage2(
        &self,
        g: &mut Graph,
        batch: &Batch,
        ablation: Ablation,
        mut dropout: Option<&mut ChaCha8Rng>,
        trace: Option<&mut PipelineTrace>,
    ) -> Result<Stage2Output> {
        self.check_batch(batch)?;
        let latents = Modality::ALL.map(|m| {
            let x = g.constant(batch.inputs[m.index()].clone());
            self.stacks[m.index()].encode(g, x)
        });
        let mut prototypes = None;
        let propagated = if ablation.kp {
            if ablation.pg {
                let mut learned = Vec::with_capacity(3);
                for m in Modality::ALL {
                    learned.push(self.banks[m.index()].learn(g, latents[m.index()], dropout.as_deref_mut())?);
                }
                prototypes = Some([learned[0], learned[1], learned[2]]);
            }
            self.propagation
                .run(g, latents, &batch.observed, prototypes.as_ref(), trace)?
        } else {
            latents
        };
        let (omega, omega_bar) = if ablation.cr {
            let (o, ob) = self.coordinator.weights(g, propagated);
            (Some(o), Some(ob))
        } else {
            (None, None)
        };
        let fused = fuse(g, propagated, omega_bar);
        let fused_outputs = self.fusion_head.forward(g, fused);
        let modality_outputs =
            Modality::ALL.map(|m| self.stacks[m.index()].predict(g, propagated[m.index()]));
        let error_outputs = match &self.error_heads {
            Some(heads) => Modality::ALL.map(|m| heads[m.index()].forward(g, propagated[m.index()], None)),
            None => modality_outputs,
        };

        let weights = batch.valid_weights();
        let reduction = self.config.loss_reduction;
        let task = task_loss_graph(g, fused_outputs, &batch.labels, &weights, reduction);
        let mut loss = task;
        if self.config.aux_task_weight > 0.0 {
            let mut aux: Vec<Var> = modality_outputs
                .iter()
                .map(|&o| task_loss_graph(g, o, &batch.labels, &weights, reduction))
                .collect();
            if self.error_heads.is_some() {
                for &o in &error_outputs {
                    aux.push(task_loss_graph(g, o, &batch.labels, &weights, reduction));
                }
            }
            let aux = sum_vars(g, &aux);
            let aux = g.scale(aux, self.config.aux_task_weight);
            loss = g.add(loss, aux);
        }
        Ok(Stage2Output {
            loss,
            fused_outputs,
            modality_outputs,
            error_outputs,
            latents,
            propagated,
            fused,
            omega,
            omega_bar,
            prototypes,
        })
    }

    /// Parameters updated during `stage`.
    pub fn trainable(&self, stage: Stage) -> Vec<bool> {
        let mut keep = vec![stage == Stage::Two; self.store.len()];
        let mut mark = |ids: Vec<ParamId>, on: bool| {
            for id in ids {
                keep[id.index()] = on;
            }
        };
        match stage {
            Stage::One => {
                for s in &self.stacks {
                    mark(s.params(), true);
                }
            }
            Stage::Two => {
                for s in &self.stacks {
                    mark(s.decoder.params(), false);
                    if self.config.freeze_encoders {
                        mark(s.encoder_params(), false);
                    }
                }
            }
        }
        keep
    }

    /// Evaluate rows `rows` of the masked data in fixed-size batches without
    /// dropout. Row order of every returned matrix follows `rows`.
    pub fn predict(
        &self,
        masked: &[ModalityBatch],
        labels: &LabelSet,
        rows: &[usize],
        stage: Stage,
        ablation: Ablation,
    ) -> Result<Predictions> {
        let n = self.config.batch_n;
        let mut parts: Vec<Predictions> = Vec::new();
        for chunk in rows.chunks(n) {
            let batch = gather_batch(masked, labels, chunk, n)?;
            let mut g = Graph::new(&self.store);
            let take = chunk.len();
            let keep = |m: &Mat| m.slice(ndarray::s![..take, ..]).to_owned();
            let p = match stage {
                Stage::One => {
                    let out = self.forward_stage1(&mut g, &batch)?;
                    let latents = out.latents.map(|v| keep(g.value(v)));
                    Predictions {
                        fused: None,
                        modality: out.outputs.map(|v| keep(g.value(v))),
                        omega_bar: None,
                        propagated: latents.clone(),
                        latents,
                        fused_repr: None,
                    }
                }
                Stage::Two => {
                    let out = self.forward_stage2(&mut g, &batch, ablation, None, None)?;
                    Predictions {
                        fused: Some(keep(g.value(out.fused_outputs))),
                        modality: out.modality_outputs.map(|v| keep(g.value(v))),
                        omega_bar: out.omega_bar.map(|v| keep(g.value(v))),
                        latents: out.latents.map(|v| keep(g.value(v))),
                        propagated: out.propagated.map(|v| keep(g.value(v))),
                        fused_repr: Some(keep(g.value(out.fused))),
                    }
                }
            };
            parts.push(p);
        }
        Ok(Predictions::concat(parts, self))
    }

    pub fn checksum(&self) -> u64 {
        self.store.checksum()
    }
}

/// Raw model outputs over a set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub fused: Option<Mat>,
    pub modality: [Mat; 3],
    pub omega_bar: Option<Mat>,
    /// Encoder outputs `Z`.
    pub latents: [Mat; 3],
    /// Propagated features `Z̄` (equal to `Z` without propagation).
    pub propagated: [Mat; 3],
    /// Fused representation `F`.
    pub fused_repr: Option<Mat>,
}

fn stack_rows(parts: Vec<Mat>, cols: usize) -> Mat {
    if parts.is_empty() {
        return Mat::zeros((0, cols));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).expect("equal widths")
}

impl Predictions {
    fn concat(parts: Vec<Predictions>, model: &CompModel) -> Self {
        let d = model.config.d;
        let k = model.output_width;
        let opt = |f: &dyn Fn(&Predictions) -> Option<Mat>, cols: usize| -> Option<Mat> {
            let got: Option<Vec<Mat>> = parts.iter().map(f).collect();
            got.map(|v| stack_rows(v, cols))
        };
        let per = |f: &dyn Fn(&Predictions) -> &[Mat; 3], cols: usize| -> [Mat; 3] {
            [0, 1, 2].map(|u| stack_rows(parts.iter().map(|p| f(p)[u].clone()).collect(), cols))
        };
        let any_fused = parts.iter().any(|p| p.fused.is_some()) || parts.is_empty();
        Self {
            fused: if any_fused { opt(&|p| p.fused.clone(), k) } else { None },
            modality: per(&|p| &p.modality, k),
            omega_bar: if parts.iter().any(|p| p.omega_bar.is_some()) {
                opt(&|p| p.omega_bar.clone(), 3)
            } else {
                None
            },
            latents: per(&|p| &p.latents, d),
            propagated: per(&|p| &p.propagated, d),
            fused_repr: if any_fused { opt(&|p| p.fused_repr.clone(), 3 * d) } else { None },
        }
    }
}

/// Turn raw head outputs into class predictions: argmax for classes, the
/// binarisation rule for scores.
pub fn decide(outputs: &Mat, task: Task, rule: crate::config::BinarizeRule) -> Vec<usize> {
    match task {
        Task::Classification => outputs
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect(),
        Task::Regression => outputs.column(0).iter().map(|&s| rule.apply(s)).collect(),
    }
}

/// Class probabilities (or the raw score) from head outputs.
pub fn probabilities(outputs: &Mat, task: Task) -> Mat {
    match task {
        Task::Classification => softmax_rows(outputs),
        Task::Regression => outputs.clone(),
    }
}

/// Encoders followed by a classifier over their plain concatenation, built
/// from copies of a model's weights. With every component disabled the full
/// model must compute exactly this.
#[derive(Debug, Clone)]
pub struct ConcatBaseline {
    store: ParamStore,
    encoders: Vec<Mlp>,
    classifier: Mlp,
}

impl ConcatBaseline {
    pub fn from_model(model: &CompModel) -> Self {
        let mut store = ParamStore::new();
        let mut copy = |src: &Mlp, name: &str| -> Mlp {
            let mut out = src.clone();
            for (i, layer) in out.layers.iter_mut().enumerate() {
                layer.weight = store.add(format!("{name}.{i}/weight"), model.store.get(layer.weight).clone());
                layer.bias = store.add(format!("{name}.{i}/bias"), model.store.get(layer.bias).clone());
            }
            out
        };
        let encoders = model
            .stacks
            .iter()
            .map(|s| copy(&s.encoder, &format!("baseline/{}", s.modality.name())))
            .collect();
        let classifier = copy(&model.fusion_head.mlp, "baseline/cls");
        Self {
            store,
            encoders,
            classifier,
        }
    }

    pub fn apply(&self, inputs: &[Mat; 3]) -> Mat {
        let z: Vec<Mat> = self
            .encoders
            .iter()
            .zip(inputs)
            .map(|(e, x)| e.apply(&self.store, x))
            .collect();
        let views: Vec<_> = z.iter().map(|m| m.view()).collect();
        let cat = concatenate(Axis(1), &views).expect("equal rows");
        self.classifier.apply(&self.store, &cat)
    }
}

/// Loss reduction helper for callers that want the plain fused task loss of
/// a batch outside training.
pub fn fused_loss(outputs: &Mat, labels: &BatchLabels, task: Task, reduction: LossReduction) -> f64 {
    crate::fusion::task_loss(labels, &probabilities(outputs, task), reduction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, make_missing_mask, SyntheticSpec};

    fn small_config() -> Config {
        Config {
            d: 8,
            c: 3,
            p: 2,
            blocks: 2,
            m_msa: 1,
            heads: 2,
            batch_n: 6,
            dropout_pg: 0.0,
            ..Config::default()
        }
    }

    fn fixture() -> (CompModel, Vec<ModalityBatch>, LabelSet) {
        let spec = SyntheticSpec {
            n_samples: 20,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let mask = make_missing_mask(20, 3, 0.3, 2).unwrap();
        let masked = ds.with_mask(&mask).unwrap();
        let model = CompModel::new(&small_config(), ds.dims().unwrap(), Task::Classification, 2, 1).unwrap();
        (model, masked, ds.labels)
    }

    #[test]
    fn all_off_equals_concat_baseline() {
        let (model, masked, labels) = fixture();
        let rows: Vec<usize> = (0..6).collect();
        let batch = gather_batch(&masked, &labels, &rows, 6).unwrap();
        let mut g = Graph::new(&model.store);
        let out = model
            .forward_stage2(&mut g, &batch, Ablation::all_off(), None, None)
            .unwrap();
        let baseline = ConcatBaseline::from_model(&model).apply(&batch.inputs);
        assert_eq!(g.value(out.fused_outputs), &baseline);
    }

    #[test]
    fn predictions_cover_requested_rows() {
        let (model, masked, labels) = fixture();
        let rows: Vec<usize> = (0..20).rev().collect();
        let p = model
            .predict(&masked, &labels, &rows, Stage::Two, Ablation::all_on())
            .unwrap();
        assert_eq!(p.fused.as_ref().unwrap().nrows(), 20);
        assert_eq!(p.fused_repr.as_ref().unwrap().ncols(), 24);
        assert_eq!(p.omega_bar.as_ref().unwrap().nrows(), 20);
        let p1 = model
            .predict(&masked, &labels, &rows, Stage::One, Ablation::all_on())
            .unwrap();
        assert!(p1.fused.is_none());
        assert_eq!(p1.modality[2].dim(), (20, 2));
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = small_config();
        let a = CompModel::new(&cfg, [3, 4, 5], Task::Classification, 2, 3).unwrap();
        let b = CompModel::new(&cfg, [3, 4, 5], Task::Classification, 2, 3).unwrap();
        let c = CompModel::new(&cfg, [3, 4, 5], Task::Classification, 2, 4).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn stage_two_trains_everything_but_decoders() {
        let (model, _, _) = fixture();
        let keep = model.trainable(Stage::Two);
        let dec = model.stacks[0].decoder.params()[0];
        let enc = model.stacks[0].encoder_params()[0];
        assert!(!keep[dec.index()]);
        assert!(keep[enc.index()]);
        let keep1 = model.trainable(Stage::One);
        assert!(!keep1[model.banks[0].compression_weight().index()]);
    }

    #[test]
    fn decide_rules() {
        let out = ndarray::array![[0.1, 0.9], [2.0, -1.0]];
        assert_eq!(decide(&out, Task::Classification, crate::config::BinarizeRule::NegNonneg), vec![1, 0]);
        let s = ndarray::array![[-0.5], [0.0]];
        assert_eq!(decide(&s, Task::Regression, crate::config::BinarizeRule::NegNonneg), vec![0, 1]);
    }
}
