//! Per-modality encoder, decoder, feature updater and classifier head used
//! by the single-modality first training stage.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::LossReduction;
use crate::data::{BatchLabels, Modality};
use crate::error::{CompError, Result};
use crate::fusion::task_loss_graph;
use crate::nn::Mlp;
use crate::params::{Mat, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    pub modality: Modality,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub updater: Mlp,
    pub head: Mlp,
}

impl EncoderStack {
    /// Two-layer GeLU perceptrons throughout; `out` is the class count
    /// (or 1 for regression).
    pub fn new(
        store: &mut ParamStore,
        modality: Modality,
        d_in: usize,
        d: usize,
        out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let m = modality.name();
        Self {
            modality,
            encoder: Mlp::new(store, &format!("{m}/enc"), &[d_in, d, d], rng),
            decoder: Mlp::new(store, &format!("{m}/dec"), &[d, d, d_in], rng),
            updater: Mlp::new(store, &format!("{m}/upd"), &[d, d, d], rng),
            head: Mlp::new(store, &format!("{m}/head"), &[d, out], rng),
        }
    }

    pub fn d_in(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn d(&self) -> usize {
        self.encoder.out_dim()
    }

    pub fn encode(&self, g: &mut Graph, x_hat: Var) -> Var {
        self.encoder.forward(g, x_hat, None)
    }

    pub fn reconstruct(&self, g: &mut Graph, z: Var) -> Var {
        self.decoder.forward(g, z, None)
    }

    /// Class scores (or a scalar score) from a latent: `head(f(z))`.
    pub fn predict(&self, g: &mut Graph, z: Var) -> Var {
        let h = self.updater.forward(g, z, None);
        self.head.forward(g, h, None)
    }

    /// Graph-free encoder evaluation.
    pub fn encode_values(&self, store: &ParamStore, x_hat: &Mat) -> Result<Mat> {
        check_finite(x_hat, self.modality)?;
        if x_hat.ncols() != self.d_in() {
            return Err(CompError::Shape(format!(
                "{}: input width {} but encoder expects {}",
                self.modality,
                x_hat.ncols(),
                self.d_in()
            )));
        }
        Ok(self.encoder.apply(store, x_hat))
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.encoder.params()
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.encoder, &self.decoder, &self.updater, &self.head]
            .iter()
            .flat_map(|m| m.params())
            .collect()
    }
}

pub fn check_finite(x: &Mat, modality: Modality) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CompError::Validation(format!("{modality}: non-finite input features")))
    }
}

/// Mean squared reconstruction error over the rows with non-zero weight,
/// averaged over rows and columns.
pub fn reconstruction_loss(g: &mut Graph, recon: Var, x_hat: &Mat, row_weights: &[f64]) -> Var {
    let denom = row_weights.iter().sum::<f64>() * x_hat.ncols() as f64;
    g.squared_error(recon, x_hat.clone(), row_weights, denom)
}

/// One modality's share of the first-stage objective.
pub struct Stage1Terms<'t> {
    pub modality: Modality,
    pub recon: Var,
    pub x_hat: &'t Mat,
    pub logits: Var,
    /// 1 for observed (and non-padding) instances, 0 otherwise.
    pub observed: Vec<f64>,
}

/// Sum over modalities of reconstruction plus task loss, both restricted
/// to observed instances. A modality with no observed instance adds 0.
pub fn stage1_loss(
    g: &mut Graph,
    terms: &[Stage1Terms<'_>],
    labels: &BatchLabels,
    reduction: LossReduction,
) -> Var {
    let mut total: Option<Var> = None;
    for t in terms {
        if t.observed.iter().all(|&w| w == 0.0) {
            log::debug!("{}: no observed instance in batch, skipping its loss terms", t.modality);
        }
        let rec = reconstruction_loss(g, t.recon, t.x_hat, &t.observed);
        let task = task_loss_graph(g, t.logits, labels, &t.observed, reduction);
        let both = g.add(rec, task);
        total = Some(match total {
            Some(acc) => g.add(acc, both),
            None => both,
        });
    }
    total.unwrap_or_else(|| g.constant(Mat::zeros((1, 1))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::SeedableRng;

    fn stack(d_in: usize, d: usize) -> (ParamStore, EncoderStack) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let s = EncoderStack::new(&mut store, Modality::Audio, d_in, d, 2, &mut rng);
        (store, s)
    }

    #[test]
    fn missing_rows_share_a_latent() {
        let (store, s) = stack(3, 4);
        let x = array![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [0.0, 0.0, 0.0]];
        let z = s.encode_values(&store, &x).unwrap();
        assert_eq!(z.dim(), (3, 4));
        assert_eq!(z.row(0), z.row(2));
        assert!(z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identity_encoder_fixture() {
        let (mut store, mut s) = stack(3, 3);
        s.encoder.set_identity(&mut store);
        let x = array![[0.5, -1.0, 2.0], [0.0, 0.0, 0.0]];
        assert_eq!(s.encode_values(&store, &x).unwrap(), x);
    }

    #[test]
    fn non_finite_input_rejected() {
        let (store, s) = stack(2, 3);
        let x = array![[f64::NAN, 0.0]];
        assert!(s.encode_values(&store, &x).is_err());
    }

    fn eval_loss(recon: Mat, x_hat: Mat, logits: Mat, observed: Vec<f64>, y: Vec<usize>) -> f64 {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let r = g.constant(recon);
        let l = g.constant(logits);
        let terms = [Stage1Terms {
            modality: Modality::Audio,
            recon: r,
            x_hat: &x_hat,
            logits: l,
            observed,
        }];
        let loss = stage1_loss(&mut g, &terms, &BatchLabels::Class(y), LossReduction::Mean);
        g.value(loss)[[0, 0]]
    }

    #[test]
    fn perfect_fit_has_zero_loss() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let logits = array![[1000.0, 0.0], [0.0, 1000.0]];
        assert_eq!(eval_loss(x.clone(), x, logits, vec![1.0, 1.0], vec![0, 1]), 0.0);
    }

    #[test]
    fn fully_missing_modality_contributes_nothing() {
        let x = Array2::zeros((2, 2));
        let recon = array![[5.0, 5.0], [5.0, 5.0]];
        let logits = array![[0.0, 3.0], [3.0, 0.0]];
        assert_eq!(eval_loss(recon, x, logits, vec![0.0, 0.0], vec![0, 1]), 0.0);
    }

    #[test]
    fn unit_reconstruction_error() {
        let x = array![[1.0, 1.0, 1.0, 1.0], [9.0, 9.0, 9.0, 9.0]];
        let recon = array![[2.0, 0.0, 2.0, 0.0], [0.0, 0.0, 0.0, 0.0]];
        let logits = array![[1000.0, 0.0], [0.0, 0.0]];
        let loss = eval_loss(recon, x, logits, vec![1.0, 0.0], vec![0, 1]);
        assert_eq!(loss, 1.0);
    }
}
