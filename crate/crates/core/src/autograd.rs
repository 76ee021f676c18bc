//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! pulled in from a [`ParamStore`] as leaves; [`Graph::backward`] walks the
//! tape in reverse and returns gradients for every node plus the parameter
//! gradients in store order.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis, Zip};

use crate::params::{Mat, ParamGrads, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[n × k] + [1 × k]`
    AddRow(Var, Var),
    /// `[n × k] * [n × 1]`
    ScaleRows(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Mat),
    Gelu(Var),
    SoftmaxRows(Var),
    /// Entries where the mask is set are overwritten by a constant.
    Fill(Var, Array2<bool>),
    RowNormalize(Var, f64),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        denom: f64,
        probs: Mat,
        clipped: Vec<bool>,
    },
    SquaredError {
        input: Var,
        target: Mat,
        row_weights: Vec<f64>,
        denom: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

/// Probability floor inside the cross-entropy logarithm.
pub const LOG_EPS: f64 = 1e-12;

pub struct Graph<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn row_norms(x: &Mat, eps: f64) -> Vec<f64> {
    x.rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt().max(eps))
        .collect()
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (_, ak) = self.shape(a);
        let (bk, _) = self.shape(b);
        assert_eq!(ak, bk, "matmul inner dimensions differ");
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, k) = self.shape(a);
        assert_eq!(self.shape(row), (1, k), "row broadcast shape mismatch");
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn scale_rows(&mut self, a: Var, w: Var) -> Var {
        let (n, _) = self.shape(a);
        assert_eq!(self.shape(w), (n, 1), "row scale shape mismatch");
        let value = self.value(a) * self.value(w);
        self.push(value, Op::ScaleRows(a, w))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.push(value, Op::Scale(a, k))
    }

    pub fn mul_const(&mut self, a: Var, c: Mat) -> Var {
        assert_eq!(self.shape(a), c.dim(), "mul_const shape mismatch");
        let value = self.value(a) * &c;
        self.push(value, Op::MulConst(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Overwrite masked entries with `fill`; they receive no gradient.
    pub fn fill(&mut self, a: Var, mask: Array2<bool>, fill: f64) -> Var {
        assert_eq!(self.shape(a), mask.dim(), "fill mask shape mismatch");
        let mut value = self.value(a).clone();
        Zip::from(&mut value).and(&mask).for_each(|v, &m| {
            if m {
                *v = fill;
            }
        });
        self.push(value, Op::Fill(a, mask))
    }

    /// Divide every row by `max(‖row‖, eps)`.
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let norms = row_norms(x, eps);
        let mut value = x.clone();
        for (mut row, n) in value.rows_mut().into_iter().zip(norms) {
            row.mapv_inplace(|v| v / n);
        }
        self.push(value, Op::RowNormalize(a, eps))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat row counts differ");
        self.push(value, Op::Concat(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::Slice(a, start, end))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Weighted cross-entropy over logits: `Σ_i w_i · -ln max(p_{i,t_i}, 1e-12) / denom`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
        denom: f64,
    ) -> Var {
        let x = self.value(logits);
        let (n, k) = x.dim();
        assert_eq!(targets.len(), n);
        assert_eq!(weights.len(), n);
        let probs = softmax_rows(x);
        let mut total = 0.0;
        let mut clipped = vec![false; n];
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            let t = targets[i];
            assert!(t < k, "target class {t} out of range {k}");
            let row = x.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let mut nll = lse - row[t];
            let cap = -LOG_EPS.ln();
            if nll > cap {
                nll = cap;
                clipped[i] = true;
            }
            total += weights[i] * nll;
        }
        let value = Array2::from_elem((1, 1), if denom > 0.0 { total / denom } else { 0.0 });
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                denom,
                probs,
                clipped,
            },
        )
    }

    /// Row-weighted squared error `Σ_i w_i ‖x_i - t_i‖² / denom`.
    pub fn squared_error(&mut self, input: Var, target: Mat, row_weights: &[f64], denom: f64) -> Var {
        let x = self.value(input);
        assert_eq!(x.dim(), target.dim(), "squared error shape mismatch");
        assert_eq!(row_weights.len(), x.nrows());
        let mut total = 0.0;
        for (i, w) in row_weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            let d = &x.row(i) - &target.row(i);
            total += w * d.dot(&d);
        }
        let value = Array2::from_elem((1, 1), if denom > 0.0 { total / denom } else { 0.0 });
        self.push(
            value,
            Op::SquaredError {
                input,
                target,
                row_weights: row_weights.to_vec(),
                denom,
            },
        )
    }

    /// Backpropagate from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar node");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(x) => *x += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant | Op::Param => {}
                Op::MatMul(a, b) => {
                    let ga = gy.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&gy);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, gy.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gy.clone());
                    acc(&mut grads, *b, gy.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&gy);
                    acc(&mut grads, *a, gy.clone());
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &gy * self.value(*b));
                    acc(&mut grads, *b, &gy * self.value(*a));
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, gy.clone());
                }
                Op::ScaleRows(a, w) => {
                    let gw = (&gy * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *a, &gy * self.value(*w));
                    acc(&mut grads, *w, gw);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, &gy * *k),
                Op::MulConst(a, c) => acc(&mut grads, *a, &gy * c),
                Op::Gelu(a) => {
                    let mut g = self.value(*a).mapv(gelu_grad);
                    g *= &gy;
                    acc(&mut grads, *a, g);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut g = Array2::zeros(y.dim());
                    for ((mut gr, yr), gyr) in g.rows_mut().into_iter().zip(y.rows()).zip(gy.rows()) {
                        let dot = yr.dot(&gyr);
                        Zip::from(&mut gr)
                            .and(&yr)
                            .and(&gyr)
                            .for_each(|o, &yv, &gv| *o = yv * (gv - dot));
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Fill(a, mask) => {
                    let mut g = gy.clone();
                    Zip::from(&mut g).and(mask).for_each(|v, &m| {
                        if m {
                            *v = 0.0;
                        }
                    });
                    acc(&mut grads, *a, g);
                }
                Op::RowNormalize(a, eps) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let norms = row_norms(x, *eps);
                    let mut g = Array2::zeros(x.dim());
                    for (i, n) in norms.iter().enumerate() {
                        let raw = x.row(i).dot(&x.row(i)).sqrt();
                        let gyr = gy.row(i);
                        if raw > *eps {
                            let dot = y.row(i).dot(&gyr);
                            let row = (&gyr - &(&y.row(i) * dot)) / *n;
                            g.row_mut(i).assign(&row);
                        } else {
                            g.row_mut(i).assign(&(&gyr / *n));
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        acc(&mut grads, *p, gy.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::Slice(a, start, end) => {
                    let mut g = Array2::zeros(self.shape(*a));
                    g.slice_mut(s![.., *start..*end]).assign(&gy);
                    acc(&mut grads, *a, g);
                }
                Op::Sum(a) => {
                    let g = Array2::from_elem(self.shape(*a), gy[[0, 0]]);
                    acc(&mut grads, *a, g);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    denom,
                    probs,
                    clipped,
                } => {
                    let mut g = Array2::zeros(probs.dim());
                    if *denom > 0.0 {
                        let scale = gy[[0, 0]] / denom;
                        for i in 0..probs.nrows() {
                            if weights[i] == 0.0 || clipped[i] {
                                continue;
                            }
                            let mut row = probs.row(i).to_owned();
                            row[targets[i]] -= 1.0;
                            g.row_mut(i).assign(&(row * (weights[i] * scale)));
                        }
                    }
                    acc(&mut grads, *logits, g);
                }
                Op::SquaredError {
                    input,
                    target,
                    row_weights,
                    denom,
                } => {
                    let x = self.value(*input);
                    let mut g = Array2::zeros(x.dim());
                    if *denom > 0.0 {
                        let scale = 2.0 * gy[[0, 0]] / denom;
                        for (i, w) in row_weights.iter().enumerate() {
                            if *w == 0.0 {
                                continue;
                            }
                            let d = (&x.row(i) - &target.row(i)) * (w * scale);
                            g.row_mut(i).assign(&d);
                        }
                    }
                    acc(&mut grads, *input, g);
                }
            }
            grads[idx] = Some(gy);
        }

        let mut params = ParamGrads::empty(self.params.len());
        for (id, var) in &self.param_nodes {
            if let Some(g) = &grads[var.0] {
                params.accumulate(*id, g.clone());
            }
        }
        Gradients { nodes: grads, params }
    }
}

pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient of the loss with respect to any node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check(build: impl Fn(&mut Graph, Var) -> Var, x0: Mat) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(x0.clone());
        let y = build(&mut g, x);
        let analytic = g.backward(y).wrt(x).cloned().unwrap();
        let h = 1e-6;
        for i in 0..x0.nrows() {
            for j in 0..x0.ncols() {
                let eval = |delta: f64| {
                    let mut xp = x0.clone();
                    xp[[i, j]] += delta;
                    let mut g = Graph::new(&store);
                    let x = g.constant(xp);
                    let y = build(&mut g, x);
                    g.value(y)[[0, 0]]
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                assert!(
                    (num - analytic[[i, j]]).abs() < 1e-6 * (1.0 + num.abs()),
                    "({i},{j}) numeric {num} analytic {}",
                    analytic[[i, j]]
                );
            }
        }
    }

    #[test]
    fn gelu_matches_known_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn softmax_gradient() {
        let x = array![[0.3, -1.2, 0.5], [2.0, 0.1, -0.4]];
        let w = array![[1.0, 2.0, -1.0], [0.5, -0.3, 0.7]];
        fd_check(
            move |g, x| {
                let s = g.softmax_rows(x);
                let c = g.mul_const(s, w.clone());
                g.sum(c)
            },
            x,
        );
    }

    #[test]
    fn row_normalize_gradient() {
        let x = array![[0.3, -1.2, 0.5], [2.0, 0.1, -0.4]];
        fd_check(
            |g, x| {
                let y = g.row_normalize(x, 1e-12);
                let t = g.transpose(y);
                let m = g.matmul(y, t);
                let m2 = g.mul(m, m);
                g.sum(m2)
            },
            x,
        );
    }

    #[test]
    fn gelu_concat_slice_gradient() {
        let x = array![[0.3, -1.2], [2.0, 0.1]];
        fd_check(
            |g, x| {
                let a = g.gelu(x);
                let c = g.concat_cols(&[a, x, a]);
                let s = g.slice_cols(c, 1, 4);
                let w = g.slice_cols(x, 0, 1);
                let r = g.scale_rows(s, w);
                let r2 = g.mul(r, r);
                g.sum(r2)
            },
            x,
        );
    }

    #[test]
    fn cross_entropy_gradient_and_value() {
        let x = array![[0.0, 0.0], [1.0, -1.0]];
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let v = g.constant(x.clone());
        let l = g.cross_entropy(v, &[0, 1], &[1.0, 0.0], 1.0);
        assert!((g.value(l)[[0, 0]] - std::f64::consts::LN_2).abs() < 1e-15);
        fd_check(|g, x| g.cross_entropy(x, &[0, 1], &[1.0, 1.0], 2.0), x);
    }

    #[test]
    fn fill_blocks_gradient() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(array![[1.0, 2.0]]);
        let f = g.fill(x, array![[true, false]], -1e9);
        let s = g.sum(f);
        assert_eq!(g.value(f), &array![[-1e9, 2.0]]);
        let grads = g.backward(s);
        assert_eq!(grads.wrt(x).unwrap(), &array![[0.0, 1.0]]);
    }
}
