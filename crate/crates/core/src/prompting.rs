//! Progressive prompt generation.
//!
//! Each batch is compressed along the batch dimension into `c` prototypes
//! per modality. Every propagation block then attends from the current
//! features to those prototypes (missing instances masked out), mixes the
//! result with the current features into a `p`-wide prompt, and blends it
//! with the prompt returned by the previous block.
//!
//! The prototype compression weights `M` (the first, `n → c`, layer) get a
//! per-sample gradient scale derived from cross-modal relative logit errors.

use ndarray::{Array2, Axis};
use num_traits::{FromPrimitive, Signed};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{softmax_rows, Graph, Var};
use crate::data::{BatchLabels, Modality};
use crate::error::{CompError, Result};
use crate::nn::Mlp;
use crate::params::{Mat, ParamId, ParamStore};

/// Norm floor for cosine similarity; zero rows get similarity 0.
pub const COSINE_EPS: f64 = 1e-12;

/// Per-modality prototype learner: `n → c` linear (`Zᵀ·M + b`), GeLU,
/// `c → c` linear, dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub modality: Modality,
    pub mlp: Mlp,
}

/// Prototypes of one batch. Computed once and read unchanged by every block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrozenPrototypes {
    pub modality: Modality,
    var: Var,
}

impl FrozenPrototypes {
    pub fn var(&self) -> Var {
        self.var
    }
}

impl PrototypeBank {
    pub fn new(
        store: &mut ParamStore,
        modality: Modality,
        batch_n: usize,
        c: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mlp = Mlp::new(store, &format!("{}/proto", modality.name()), &[batch_n, c, c], rng)
            .with_dropout(dropout);
        Self { modality, mlp }
    }

    pub fn batch_n(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn c(&self) -> usize {
        self.mlp.out_dim()
    }

    /// The compression weight matrix `M` (`n × c`).
    pub fn compression_weight(&self) -> ParamId {
        self.mlp.layers[0].weight
    }

    /// `A = MLP(Zᵀ)ᵀ`, shape `c × d`.
    pub fn learn(
        &self,
        g: &mut Graph,
        z: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<FrozenPrototypes> {
        let (n, _) = g.shape(z);
        if n != self.batch_n() {
            return Err(CompError::Shape(format!(
                "{}: prototype layer expects {} rows, got {n} (pad partial batches)",
                self.modality,
                self.batch_n()
            )));
        }
        let zt = g.transpose(z);
        let h = self.mlp.forward(g, zt, rng);
        let a = g.transpose(h);
        Ok(FrozenPrototypes {
            modality: self.modality,
            var: a,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }
}

/// `S = softmax(cos(Z, A) + Mask)`: rows of missing instances are set to
/// `mask_neg` and so come out uniform.
pub fn prototype_attention(
    g: &mut Graph,
    z: Var,
    prototypes: &FrozenPrototypes,
    observed: &[bool],
    mask_neg: f64,
) -> Var {
    let (n, _) = g.shape(z);
    assert_eq!(observed.len(), n, "one indicator per row");
    let zn = g.row_normalize(z, COSINE_EPS);
    let an = g.row_normalize(prototypes.var, COSINE_EPS);
    let at = g.transpose(an);
    let sim = g.matmul(zn, at);
    let c = g.shape(sim).1;
    let mask = Array2::from_shape_fn((n, c), |(i, _)| !observed[i]);
    let masked = g.fill(sim, mask, mask_neg);
    g.softmax_rows(masked)
}

/// Prompt synthesis heads of one block for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGenerator {
    pub ffn_proto: Mlp,
    pub ffn_feature: Mlp,
    pub project: Mlp,
}

impl PromptGenerator {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, p: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ffn_proto: Mlp::new(store, &format!("{name}/ffn1"), &[d, d, d], rng),
            ffn_feature: Mlp::new(store, &format!("{name}/ffn2"), &[d, d, d], rng),
            project: Mlp::new(store, &format!("{name}/mlp_p"), &[d, d, p], rng),
        }
    }

    /// `P̃ = MLP_p(FFN₁(S·A) + FFN₂(Z))`; without attention input only the
    /// feature path is used.
    pub fn generate(&self, g: &mut Graph, attended: Option<(Var, &FrozenPrototypes)>, z: Var) -> Var {
        let feat = self.ffn_feature.forward(g, z, None);
        let mixed = match attended {
            Some((s, protos)) => {
                let sa = g.matmul(s, protos.var);
                let proto = self.ffn_proto.forward(g, sa, None);
                g.add(proto, feat)
            }
            None => feat,
        };
        self.project.forward(g, mixed, None)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.ffn_proto, &self.ffn_feature, &self.project]
            .iter()
            .flat_map(|m| m.params())
            .collect()
    }
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(CompError::Validation(format!("lambda must lie in [0, 1], got {lambda}")))
    }
}

/// `λ·P_prev + (1-λ)·P̃`.
pub fn momentum_update(g: &mut Graph, prev: Var, fresh: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let a = g.scale(prev, lambda);
    let b = g.scale(fresh, 1.0 - lambda);
    Ok(g.add(a, b))
}

pub fn momentum_update_values(prev: &Mat, fresh: &Mat, lambda: f64) -> Result<Mat> {
    check_lambda(lambda)?;
    if prev.dim() != fresh.dim() {
        return Err(CompError::Shape("prompt shapes differ".into()));
    }
    Ok(prev * lambda + fresh * (1.0 - lambda))
}

/// Absolute error of each row's prediction: `|1 - softmax(scores)[y]|` for
/// classes, `|y - score|` for regression.
pub fn logit_error(outputs: &Mat, labels: &BatchLabels) -> Vec<f64> {
    match labels {
        BatchLabels::Class(y) => {
            let probs = softmax_rows(outputs);
            y.iter()
                .enumerate()
                .map(|(i, &c)| (1.0 - probs[[i, c]]).abs())
                .collect()
        }
        BatchLabels::Score(y) => y
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - outputs[[i, 0]]).abs())
            .collect(),
    }
}

/// Leave-one-out relative error weights before clamping:
/// `W^u_i = ½ Σ_{v≠u} Σ_{j≠i}(E^u_j − E^v_j) / Σ_j(E^u_j − E^v_j)`,
/// with any ratio whose denominator is below `eps` in magnitude replaced by 1.
pub fn modulation_weights_raw<T>(errors: &[Vec<T>], eps: T) -> Result<Vec<Vec<T>>>
where
    T: Signed + Copy + PartialOrd + FromPrimitive,
{
    let n = errors.first().map_or(0, Vec::len);
    if n < 2 {
        return Err(CompError::Validation(
            "modulation weights need at least two samples".into(),
        ));
    }
    if errors.iter().any(|e| e.len() != n) {
        return Err(CompError::Shape("error vectors differ in length".into()));
    }
    let half = T::from_f64(0.5).expect("representable");
    let one = T::one();
    let mut out = Vec::with_capacity(errors.len());
    for (u, eu) in errors.iter().enumerate() {
        let mut w = vec![T::zero(); n];
        for (v, ev) in errors.iter().enumerate() {
            if v == u {
                continue;
            }
            let diff: Vec<T> = eu.iter().zip(ev).map(|(&a, &b)| a - b).collect();
            let total = diff.iter().fold(T::zero(), |acc, &x| acc + x);
            let degenerate = total.abs() < eps;
            for (wi, &di) in w.iter_mut().zip(&diff) {
                *wi = *wi + if degenerate { one } else { (total - di) / total };
            }
        }
        out.push(w.into_iter().map(|x| x * half).collect());
    }
    Ok(out)
}

/// Raw weights clamped to `[w_min, w_max]`.
pub fn modulation_weights(errors: &[Vec<f64>], eps: f64, w_min: f64, w_max: f64) -> Result<Vec<Vec<f64>>> {
    Ok(modulation_weights_raw(errors, eps)?
        .into_iter()
        .map(|w| w.into_iter().map(|x| x.clamp(w_min, w_max)).collect())
        .collect())
}

/// Scale row `i` of a gradient by `w[i]`, over however many columns it has.
pub fn apply_gradient_modulation(grad: &mut Mat, weights: &[f64]) {
    assert_eq!(grad.nrows(), weights.len(), "one weight per gradient row");
    for (mut row, &w) in grad.axis_iter_mut(Axis(0)).zip(weights) {
        row.mapv_inplace(|x| x * w);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn missing_row_attention_is_uniform() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let z = g.constant(array![[1.0, 0.0], [0.3, -2.0]]);
        let a = g.constant(array![[1.0, 0.0], [0.0, 1.0], [-1.0, 1.0]]);
        let protos = FrozenPrototypes {
            modality: Modality::Audio,
            var: a,
        };
        let s = prototype_attention(&mut g, z, &protos, &[true, false], -1e9);
        let s = g.value(s);
        for j in 0..3 {
            assert!((s[[1, j]] - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((s.row(0).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn colinear_row_attends_to_its_prototype() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let z = g.constant(array![[0.0, 3.0, 0.0]]);
        let a = g.constant(array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        let protos = FrozenPrototypes {
            modality: Modality::Text,
            var: a,
        };
        let s = prototype_attention(&mut g, z, &protos, &[true], -1e9);
        let row = g.value(s).row(0).to_owned();
        assert!(row[0] > row[1] && row[0] > row[2]);
    }

    #[test]
    fn identity_compression_returns_latents() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mut bank = PrototypeBank::new(&mut store, Modality::Audio, 3, 3, 0.0, &mut rng);
        bank.mlp.set_identity(&mut store);
        let z = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let mut g = Graph::new(&store);
        let zv = g.constant(z.clone());
        let a = bank.learn(&mut g, zv, None).unwrap();
        assert_eq!(g.value(a.var()), &z);
        let short = g.constant(array![[1.0, 2.0]]);
        assert!(bank.learn(&mut g, short, None).is_err());
    }

    #[test]
    fn momentum_boundaries() {
        let prev = array![[2.0]];
        let fresh = array![[4.0]];
        assert_eq!(momentum_update_values(&prev, &fresh, 1.0).unwrap(), prev);
        assert_eq!(momentum_update_values(&prev, &fresh, 0.0).unwrap(), fresh);
        assert_eq!(momentum_update_values(&prev, &fresh, 0.5).unwrap(), array![[3.0]]);
        assert!(momentum_update_values(&prev, &fresh, 1.5).is_err());
        assert!(momentum_update_values(&prev, &fresh, -0.1).is_err());
    }

    #[test]
    fn logit_error_cases() {
        let confident = array![[1000.0, 0.0]];
        assert_eq!(logit_error(&confident, &BatchLabels::Class(vec![0])), vec![0.0]);
        let uniform = array![[0.0, 0.0, 0.0, 0.0]];
        let e = logit_error(&uniform, &BatchLabels::Class(vec![2]));
        assert!((e[0] - 0.75).abs() < 1e-15);
        assert_eq!(logit_error(&array![[-1.0]], &BatchLabels::Score(vec![2.0])), vec![3.0]);
    }

    #[test]
    fn modulation_constant_difference() {
        let base = vec![0.2, 0.4, 0.1, 0.9];
        let eu: Vec<f64> = base.iter().map(|x| x + 0.3).collect();
        let w = modulation_weights(&[eu, base.clone(), base], 1e-8, 0.0, 1.0).unwrap();
        for &x in &w[0] {
            assert!((x - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn modulation_degenerate_is_neutral() {
        let e = vec![0.5, 0.1, 0.7];
        let w = modulation_weights(&[e.clone(), e.clone(), e], 1e-8, 0.0, 1.0).unwrap();
        assert!(w.iter().flatten().all(|&x| x == 1.0));
    }

    #[test]
    fn modulation_needs_two_samples() {
        assert!(modulation_weights(&[vec![0.1], vec![0.2], vec![0.3]], 1e-8, 0.0, 1.0).is_err());
    }

    #[test]
    fn modulation_clamps_negative_weights() {
        let w = modulation_weights(
            &[vec![0.8, 0.2], vec![0.4, 0.4], vec![0.6, 0.1]],
            1e-8,
            0.0,
            1.0,
        )
        .unwrap();
        assert_eq!(w[0][0], 0.0);
    }

    #[test]
    fn gradient_rows_scaled() {
        let mut g = array![[1.0, 2.0], [3.0, 4.0]];
        apply_gradient_modulation(&mut g, &[0.5, 1.0]);
        assert_eq!(g, array![[0.5, 1.0], [3.0, 4.0]]);
        apply_gradient_modulation(&mut g, &[0.0, 0.0]);
        assert!(g.iter().all(|&x| x == 0.0));
    }
}
