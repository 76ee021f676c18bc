//! Dense layers built on the autodiff graph.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{gelu, Graph, Var};
use crate::params::{Mat, ParamId, ParamStore};

/// Affine map `x·W + b` with `W: [fan_in × fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform `±1/√fan_in` initialisation for weights and bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..=bound));
        let b = Array2::from_shape_simple_fn((1, fan_out), || rng.random_range(-bound..=bound));
        Self {
            weight: store.add(format!("{name}/weight"), w),
            bias: store.add(format!("{name}/bias"), b),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    /// Graph-free evaluation with the same arithmetic as [`Linear::forward`].
    pub fn apply(&self, store: &ParamStore, x: &Mat) -> Mat {
        x.dot(store.get(self.weight)) + store.get(self.bias)
    }

    /// Test fixture: identity weights (truncated or zero-padded) and zero bias.
    pub fn set_identity(&self, store: &mut ParamStore) {
        let mut w = Array2::zeros((self.fan_in, self.fan_out));
        for i in 0..self.fan_in.min(self.fan_out) {
            w[[i, i]] = 1.0;
        }
        *store.get_mut(self.weight) = w;
        *store.get_mut(self.bias) = Array2::zeros((1, self.fan_out));
    }

    pub fn set_zero(&self, store: &mut ParamStore) {
        *store.get_mut(self.weight) = Array2::zeros((self.fan_in, self.fan_out));
        *store.get_mut(self.bias) = Array2::zeros((1, self.fan_out));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Identity,
}

/// Stack of linear layers with an activation between consecutive layers and
/// optional inverted dropout after the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub dropout: f64,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self {
            layers,
            activation: Activation::Gelu,
            dropout: 0.0,
        }
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = p;
        self
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    /// Forward pass. Dropout is active only when a generator is supplied.
    pub fn forward(&self, g: &mut Graph, x: Var, rng: Option<&mut ChaCha8Rng>) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h);
            if i < last && self.activation == Activation::Gelu {
                h = g.gelu(h);
            }
        }
        match rng {
            Some(rng) if self.dropout > 0.0 => {
                let keep = 1.0 - self.dropout;
                let mask = Array2::from_shape_simple_fn(g.shape(h), || {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                g.mul_const(h, mask)
            }
            _ => h,
        }
    }

    /// Graph-free evaluation (no dropout).
    pub fn apply(&self, store: &ParamStore, x: &Mat) -> Mat {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(store, &h);
            if i < last && self.activation == Activation::Gelu {
                h.mapv_inplace(gelu);
            }
        }
        h
    }

    /// Test fixture: every layer identity and no nonlinearity.
    pub fn set_identity(&mut self, store: &mut ParamStore) {
        self.activation = Activation::Identity;
        for l in &self.layers {
            l.set_identity(store);
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}
