//! Independent oracles shared by the integration suites: explicit-loop
//! re-implementations, central finite differences and a least-squares
//! linear probe.
#![allow(dead_code)]

use comp_core::autograd::{Graph, Var};
use comp_core::config::Config;
use comp_core::data::{
    gather_batch, generate_synthetic, make_missing_mask, Batch, Modality, ModalitySynth, SyntheticSpec, Task,
};
use comp_core::model::CompModel;
use comp_core::fusion::{fuse, Coordinator, FusionHead};
use comp_core::nn::Mlp;
use comp_core::prompting::{prototype_attention, PrototypeBank};
use comp_core::propagation::MultiHeadAttention;
use comp_core::params::{Mat, ParamId, ParamStore};
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.dim(), b.dim(), "shape mismatch");
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- loops

pub fn loop_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn loop_matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k) = a.dim();
    let m = b.ncols();
    let mut out = Mat::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[[i, t]] * b[[t, j]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

/// Row-wise softmax of cosine similarities with rows of missing instances
/// replaced by a constant.
pub fn loop_prototype_attention(z: &Mat, a: &Mat, observed: &[bool], mask_neg: f64) -> Mat {
    let (n, d) = z.dim();
    let c = a.nrows();
    let norm = |m: &Mat, i: usize| (0..d).map(|j| m[[i, j]] * m[[i, j]]).sum::<f64>().sqrt().max(1e-12);
    let mut out = Mat::zeros((n, c));
    for i in 0..n {
        let mut row = vec![0.0; c];
        for (k, r) in row.iter_mut().enumerate() {
            if observed[i] {
                let dot: f64 = (0..d).map(|j| z[[i, j]] * a[[k, j]]).sum();
                *r = dot / (norm(z, i) * norm(a, k));
            } else {
                *r = mask_neg;
            }
        }
        for (k, v) in loop_softmax(&row).into_iter().enumerate() {
            out[[i, k]] = v;
        }
    }
    out
}

fn loop_affine(x: &Mat, w: &Mat, b: &Mat) -> Mat {
    let mut out = loop_matmul(x, w);
    for i in 0..out.nrows() {
        for j in 0..out.ncols() {
            out[[i, j]] += b[[0, j]];
        }
    }
    out
}

/// Multi-head attention over rows with per-head loops; unobserved rows
/// are excluded as keys.
#[allow(clippy::too_many_arguments)]
pub fn loop_attention(
    x: &Mat,
    wq: (&Mat, &Mat),
    wk: (&Mat, &Mat),
    wv: (&Mat, &Mat),
    wo: (&Mat, &Mat),
    heads: usize,
    observed: &[bool],
) -> Mat {
    let (n, d) = x.dim();
    let q = loop_affine(x, wq.0, wq.1);
    let k = loop_affine(x, wk.0, wk.1);
    let v = loop_affine(x, wv.0, wv.1);
    let dh = d / heads;
    let mut cat = Mat::zeros((n, d));
    for h in 0..heads {
        for i in 0..n {
            let keys: Vec<usize> = (0..n).filter(|&j| observed[j]).collect();
            let logits: Vec<f64> = keys
                .iter()
                .map(|&j| {
                    let mut s = 0.0;
                    for t in h * dh..(h + 1) * dh {
                        s += q[[i, t]] * k[[j, t]];
                    }
                    s / (dh as f64).sqrt()
                })
                .collect();
            let p = loop_softmax(&logits);
            for t in h * dh..(h + 1) * dh {
                cat[[i, t]] = keys.iter().zip(&p).map(|(&j, &pj)| pj * v[[j, t]]).sum();
            }
        }
    }
    loop_affine(&cat, wo.0, wo.1)
}

/// `[w_a·Z_a, w_t·Z_t, w_v·Z_v]` built element by element.
pub fn loop_fuse(z: [&Mat; 3], w: &Mat) -> Mat {
    let (n, d) = z[0].dim();
    let mut out = Mat::zeros((n, 3 * d));
    for i in 0..n {
        for (u, zu) in z.iter().enumerate() {
            for j in 0..d {
                out[[i, u * d + j]] = w[[i, u]] * zu[[i, j]];
            }
        }
    }
    out
}

pub fn loop_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

// --------------------------------------------------------- finite diffs

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &Mat, b: &Mat, floor: f64) -> f64 {
    let diff = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Central differences of a scalar function of the parameter store, for
/// every entry of `id`.
pub fn numeric_gradient(store: &ParamStore, id: ParamId, step: f64, f: &dyn Fn(&ParamStore) -> f64) -> Mat {
    let mut work = store.clone();
    let shape = store.get(id).dim();
    let mut out = Mat::zeros(shape);
    for i in 0..shape.0 {
        for j in 0..shape.1 {
            let orig = work.get(id)[[i, j]];
            work.get_mut(id)[[i, j]] = orig + step;
            let plus = f(&work);
            work.get_mut(id)[[i, j]] = orig - step;
            let minus = f(&work);
            work.get_mut(id)[[i, j]] = orig;
            out[[i, j]] = (plus - minus) / (2.0 * step);
        }
    }
    out
}

/// Norm below which gradients are compared absolutely: central differences
/// at step 1e-5 carry roughly 1e-11 of roundoff per entry.
pub const GRAD_FLOOR: f64 = 1e-5;

/// Compare backprop against central differences for every parameter.
/// Returns `(name, relative error)` per parameter.
pub fn gradcheck_params(
    store: &ParamStore,
    step: f64,
    build: &dyn Fn(&mut Graph) -> Var,
) -> Vec<(String, f64)> {
    let mut g = Graph::new(store);
    let loss = build(&mut g);
    let grads = g.backward(loss).into_params();
    let scalar = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let l = build(&mut g);
        g.value(l)[[0, 0]]
    };
    let mut out = Vec::new();
    for (id, name, value) in store.iter() {
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Mat::zeros(value.dim()));
        let numeric = numeric_gradient(store, id, step, &scalar);
        out.push((name.to_string(), relative_error(&analytic, &numeric, GRAD_FLOOR)));
    }
    out
}

// ------------------------------------------------------------ lin probe

/// Least-squares linear classifier on one-hot targets (with intercept),
/// solved by SVD; returns training accuracy.
pub fn linear_probe_accuracy(x: &Mat, y: &[usize], classes: usize) -> f64 {
    let (n, d) = x.dim();
    let design = DMatrix::from_fn(n, d + 1, |i, j| if j == d { 1.0 } else { x[[i, j]] });
    let svd = design.clone().svd(true, true);
    let mut correct = 0;
    let mut scores = vec![vec![0.0; classes]; n];
    for k in 0..classes {
        let target = DVector::from_fn(n, |i, _| f64::from(u8::from(y[i] == k)));
        let w = svd.solve(&target, 1e-12).expect("svd solve");
        let fitted = &design * w;
        for i in 0..n {
            scores[i][k] = fitted[i];
        }
    }
    for i in 0..n {
        let best = (0..classes)
            .max_by(|&a, &b| scores[i][a].partial_cmp(&scores[i][b]).unwrap())
            .unwrap();
        correct += usize::from(best == y[i]);
    }
    correct as f64 / n as f64
}

// ------------------------------------------------- random oracle cases

fn random_observed(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut obs: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
    obs[rng.random_range(0..n)] = true;
    obs
}

/// Prototype attention on a random instance: max deviation from the loop
/// oracle.
pub fn case_prototype_attention(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(2..=6);
    let d = r.random_range(1..=8);
    let c = r.random_range(1..=4);
    let mut store = ParamStore::new();
    let bank = PrototypeBank::new(&mut store, Modality::Audio, n, c, 0.0, &mut r);
    let z = random_mat(&mut r, n, d);
    let obs = random_observed(&mut r, n);
    let mut g = Graph::new(&store);
    let zv = g.constant(z.clone());
    let protos = bank.learn(&mut g, zv, None).unwrap();
    let s = prototype_attention(&mut g, zv, &protos, &obs, -1e9);
    let a = g.value(protos.var()).clone();
    max_abs_diff(g.value(s), &loop_prototype_attention(&z, &a, &obs, -1e9))
}

/// The `S·A` term of prompt generation against a loop matrix product.
pub fn case_prompt_product(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(2..=6);
    let d = r.random_range(1..=8);
    let c = r.random_range(1..=4);
    let s = random_mat(&mut r, n, c);
    let a = random_mat(&mut r, c, d);
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let sv = g.constant(s.clone());
    let av = g.constant(a.clone());
    let sa = g.matmul(sv, av);
    max_abs_diff(g.value(sa), &loop_matmul(&s, &a))
}

/// Masked multi-head attention against the per-head loop oracle.
pub fn case_attention(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(2..=6);
    let heads = r.random_range(1..=2);
    let d = heads * r.random_range(1..=4);
    let mut store = ParamStore::new();
    let att = MultiHeadAttention::new(&mut store, "att", d, heads, &mut r);
    let x = random_mat(&mut r, n, d);
    let obs = random_observed(&mut r, n);
    let mut g = Graph::new(&store);
    let xv = g.constant(x.clone());
    let out = att.forward(&mut g, xv, &obs, -1e9).unwrap();
    let p = |l: &comp_core::nn::Linear| (store.get(l.weight), store.get(l.bias));
    let oracle = loop_attention(&x, p(&att.query), p(&att.key), p(&att.value), p(&att.output), heads, &obs);
    max_abs_diff(g.value(out), &oracle)
}

fn loop_mlp(store: &ParamStore, mlp: &Mlp, x: &Mat) -> Mat {
    let mut h = x.clone();
    for (i, layer) in mlp.layers.iter().enumerate() {
        h = loop_affine(&h, store.get(layer.weight), store.get(layer.bias));
        if i + 1 < mlp.layers.len() {
            h.mapv_inplace(loop_gelu);
        }
    }
    h
}

/// Coordinator weights, weighted concatenation and the fusion classifier
/// against loop re-implementations; returns the largest deviation.
pub fn case_fuse_and_classify(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(1..=6);
    let d = r.random_range(1..=8);
    let k = r.random_range(1..=4);
    let mut store = ParamStore::new();
    let coord = Coordinator::new(&mut store, d, &mut r);
    let head = FusionHead::new(&mut store, d, k, &mut r);
    let z = [random_mat(&mut r, n, d), random_mat(&mut r, n, d), random_mat(&mut r, n, d)];
    let mut g = Graph::new(&store);
    let vars = [g.constant(z[0].clone()), g.constant(z[1].clone()), g.constant(z[2].clone())];
    let (_, wbar) = coord.weights(&mut g, vars);
    let f = fuse(&mut g, vars, Some(wbar));
    let y = head.forward(&mut g, f);

    let cat = loop_fuse([&z[0], &z[1], &z[2]], &Mat::ones((n, 3)));
    let omega = loop_mlp(&store, &coord.mlp, &cat);
    let mut w = Mat::zeros((n, 3));
    for i in 0..n {
        let row = loop_softmax(&[omega[[i, 0]], omega[[i, 1]], omega[[i, 2]]]);
        for j in 0..3 {
            w[[i, j]] = row[j];
        }
    }
    let f_oracle = loop_fuse([&z[0], &z[1], &z[2]], &w);
    let y_oracle = loop_mlp(&store, &head.mlp, &f_oracle);
    max_abs_diff(g.value(wbar), &w)
        .max(max_abs_diff(g.value(f), &f_oracle))
        .max(max_abs_diff(g.value(y), &y_oracle))
}

// ------------------------------------------------------------ fixtures

/// Eight-sample, low-dimensional dataset for finite-difference checks.
fn grad_spec(task: Task) -> SyntheticSpec {
    SyntheticSpec {
        n_samples: 8,
        latent_dim: 3,
        task,
        modalities: [(Modality::Audio, 5), (Modality::Text, 4), (Modality::Video, 3)]
            .into_iter()
            .map(|(modality, feature_dim)| ModalitySynth {
                modality,
                feature_dim,
                snr: 2.0,
            })
            .collect(),
        seed: 3,
        ..SyntheticSpec::default()
    }
}

pub fn grad_config() -> Config {
    Config {
        d: 6,
        p: 2,
        c: 2,
        blocks: 1,
        m_msa: 1,
        heads: 2,
        batch_n: 4,
        dropout_pg: 0.0,
        ..Config::default()
    }
}

pub fn grad_fixture(task: Task, cfg: &Config, mr: f64) -> (CompModel, Batch) {
    let ds = generate_synthetic(&grad_spec(task)).unwrap();
    let mask = make_missing_mask(ds.n_samples(), 3, mr, 2).unwrap();
    let masked = ds.with_mask(&mask).unwrap();
    let model = CompModel::new(cfg, ds.dims().unwrap(), task, ds.labels.output_width(), 1).unwrap();
    let batch = gather_batch(&masked, &ds.labels, &[0, 1, 2, 3], cfg.batch_n).unwrap();
    (model, batch)
}
