use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::params::{Mat, ParamGrads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "sgd")]
    Sgd,
    #[serde(rename = "adaptive-moment")]
    Adam,
}

/// Plain SGD or Adam with bias correction. Parameters without a gradient
/// in a step are left untouched, moments included.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: Vec<u64>,
    first: Vec<Option<Mat>>,
    second: Vec<Option<Mat>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, num_params: usize) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: vec![0; num_params],
            first: vec![None; num_params],
            second: vec![None; num_params],
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        let (b1, b2) = (self.beta1, self.beta2);
        for (id, g) in grads.iter() {
            let i = id.index();
            let p = store.get_mut(id);
            match self.kind {
                OptimizerKind::Sgd => p.scaled_add(-self.lr, g),
                OptimizerKind::Adam => {
                    self.steps[i] += 1;
                    let t = self.steps[i] as i32;
                    let m = self.first[i].get_or_insert_with(|| Array2::zeros(g.dim()));
                    m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
                    let v = self.second[i].get_or_insert_with(|| Array2::zeros(g.dim()));
                    v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
                    let c1 = 1.0 - b1.powi(t);
                    let c2 = 1.0 - b2.powi(t);
                    let (lr, eps) = (self.lr, self.eps);
                    let m = self.first[i].as_ref().unwrap();
                    let v = self.second[i].as_ref().unwrap();
                    ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                        *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                    });
                }
            }
        }
    }
}
