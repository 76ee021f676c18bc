//! Coordinator-weighted fusion of the propagated modality features and the
//! task losses.

use ndarray::{concatenate, s, Axis};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{softmax_rows, Graph, Var, LOG_EPS};
use crate::config::LossReduction;
use crate::data::BatchLabels;
use crate::nn::Mlp;
use crate::params::{Mat, ParamId, ParamStore};

/// Maps the concatenated modality features to one raw weight per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Coordinator {
    pub mlp: Mlp,
}

impl Coordinator {
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            mlp: Mlp::new(store, "fusion/coord", &[3 * d, d, 3], rng),
        }
    }

    /// Returns `(omega, omega_bar)`: raw outputs and their row softmax.
    pub fn weights(&self, g: &mut Graph, features: [Var; 3]) -> (Var, Var) {
        let cat = g.concat_cols(&features);
        let omega = self.mlp.forward(g, cat, None);
        let omega_bar = g.softmax_rows(omega);
        (omega, omega_bar)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }
}

/// Weighted concatenation `[ω̄ᵃ·Z̄ᵃ, ω̄ᵗ·Z̄ᵗ, ω̄ᵛ·Z̄ᵛ]`; plain concatenation
/// when no weights are given.
pub fn fuse(g: &mut Graph, features: [Var; 3], omega_bar: Option<Var>) -> Var {
    match omega_bar {
        None => g.concat_cols(&features),
        Some(w) => {
            let scaled: Vec<Var> = features
                .iter()
                .enumerate()
                .map(|(u, &z)| {
                    let col = g.slice_cols(w, u, u + 1);
                    g.scale_rows(z, col)
                })
                .collect();
            g.concat_cols(&scaled)
        }
    }
}

/// Graph-free counterpart of [`fuse`].
pub fn fuse_values(features: [&Mat; 3], omega_bar: Option<&Mat>) -> Mat {
    let parts: Vec<Mat> = features
        .iter()
        .enumerate()
        .map(|(u, z)| match omega_bar {
            Some(w) => *z * &w.slice(s![.., u..u + 1]),
            None => (*z).clone(),
        })
        .collect();
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(1), &views).expect("feature row counts agree")
}

/// Row softmax of raw coordinator outputs.
pub fn coordinator_softmax(omega: &Mat) -> Mat {
    softmax_rows(omega)
}

/// Final classifier over the fused representation.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    pub mlp: Mlp,
}

impl FusionHead {
    pub fn new(store: &mut ParamStore, d: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            mlp: Mlp::new(store, "fusion/cls", &[3 * d, d, out], rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, fused: Var) -> Var {
        self.mlp.forward(g, fused, None)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }
}

fn denom(weights: &[f64], reduction: LossReduction) -> f64 {
    let total: f64 = weights.iter().sum();
    match reduction {
        LossReduction::Mean => total,
        LossReduction::Sum if total > 0.0 => 1.0,
        LossReduction::Sum => 0.0,
    }
}

/// Task loss on raw head outputs inside the graph: cross-entropy over
/// class scores, or mean squared error for scalar scores. Rows with weight
/// 0 are ignored.
pub fn task_loss_graph(
    g: &mut Graph,
    outputs: Var,
    labels: &BatchLabels,
    weights: &[f64],
    reduction: LossReduction,
) -> Var {
    match labels {
        BatchLabels::Class(y) => g.cross_entropy(outputs, y, weights, denom(weights, reduction)),
        BatchLabels::Score(y) => {
            let target = Mat::from_shape_vec((y.len(), 1), y.clone()).expect("one score per row");
            let total: f64 = weights.iter().sum();
            g.squared_error(outputs, target, weights, total)
        }
    }
}

/// Task loss on predictions: `predictions` holds class probabilities
/// (`n × k`) or scores (`n × 1`).
pub fn task_loss(labels: &BatchLabels, predictions: &Mat, reduction: LossReduction) -> f64 {
    match labels {
        BatchLabels::Class(y) => {
            let total: f64 = y
                .iter()
                .enumerate()
                .map(|(i, &c)| -predictions[[i, c]].max(LOG_EPS).ln())
                .sum();
            match reduction {
                LossReduction::Mean => total / y.len().max(1) as f64,
                LossReduction::Sum => total,
            }
        }
        BatchLabels::Score(y) => {
            let total: f64 = y
                .iter()
                .enumerate()
                .map(|(i, &v)| (v - predictions[[i, 0]]).powi(2))
                .sum();
            total / y.len().max(1) as f64
        }
    }
}
