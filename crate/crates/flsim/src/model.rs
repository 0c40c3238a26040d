//! Local models: multinomial logistic regression and an optional
//! one-hidden-layer tanh MLP, both over flat parameter vectors with exact
//! full-batch cross-entropy gradients.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    Mlp,
}

/// Model architecture plus current parameters. Parameters are flattened
/// row-major, weights before biases, layer by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Hidden width; ignored for logistic models.
    pub hidden: usize,
    pub params: ParamVector,
}

impl Model {
    pub fn param_dim(kind: ModelKind, feature_dim: usize, num_classes: usize, hidden: usize) -> usize {
        match kind {
            ModelKind::Logistic => num_classes * feature_dim + num_classes,
            ModelKind::Mlp => {
                hidden * feature_dim + hidden + num_classes * hidden + num_classes
            }
        }
    }

    /// Fresh model with small Gaussian parameters, deterministic under seed.
    pub fn init(
        kind: ModelKind,
        feature_dim: usize,
        num_classes: usize,
        hidden: usize,
        seed: u64,
    ) -> Self {
        let dim = Self::param_dim(kind, feature_dim, num_classes, hidden);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let params = ParamVector::from_raw(
            (0..dim).map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal)).collect(),
        );
        Self { kind, feature_dim, num_classes, hidden, params }
    }

    pub fn set_params(&mut self, w: ParamVector) -> Result<()> {
        if w.dim() != self.params.dim() {
            return Err(Error::DimensionMismatch { expected: self.params.dim(), got: w.dim() });
        }
        self.params = w;
        Ok(())
    }

    /// Class logits at parameters `w` for one input.
    fn logits(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        let (f, c, h) = (self.feature_dim, self.num_classes, self.hidden);
        match self.kind {
            ModelKind::Logistic => {
                let (wm, b) = w.split_at(c * f);
                (0..c)
                    .map(|k| {
                        let row = &wm[k * f..(k + 1) * f];
                        row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b[k]
                    })
                    .collect()
            }
            ModelKind::Mlp => {
                let (w1, rest) = w.split_at(h * f);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                let hid: Vec<f64> = (0..h)
                    .map(|k| {
                        let row = &w1[k * f..(k + 1) * f];
                        (row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b1[k]).tanh()
                    })
                    .collect();
                (0..c)
                    .map(|k| {
                        let row = &w2[k * h..(k + 1) * h];
                        row.iter().zip(&hid).map(|(a, v)| a * v).sum::<f64>() + b2[k]
                    })
                    .collect()
            }
        }
    }

    /// Full-batch gradient of the mean cross-entropy loss at `w`, together
    /// with the loss value.
    pub fn gradient(&self, w: &ParamVector, data: &Dataset) -> Result<(ParamVector, f64)> {
        if data.is_empty() {
            return Err(Error::EmptyInput("dataset for gradient"));
        }
        if w.dim() != self.params.dim() {
            return Err(Error::DimensionMismatch { expected: self.params.dim(), got: w.dim() });
        }
        let (f, c, h) = (self.feature_dim, self.num_classes, self.hidden);
        let ws = w.as_slice();
        let m = data.len() as f64;
        let mut grad = vec![0.0; w.dim()];
        let mut loss = 0.0;
        match self.kind {
            ModelKind::Logistic => {
                for ex in &data.examples {
                    let z = self.logits(ws, &ex.features);
                    let (p, nll) = softmax_nll(&z, ex.label);
                    loss += nll / m;
                    for k in 0..c {
                        let delta = (p[k] - if k == ex.label { 1.0 } else { 0.0 }) / m;
                        let row = &mut grad[k * f..(k + 1) * f];
                        for (g, x) in row.iter_mut().zip(&ex.features) {
                            *g += delta * x;
                        }
                        grad[c * f + k] += delta;
                    }
                }
            }
            ModelKind::Mlp => {
                let (w1, rest) = ws.split_at(h * f);
                let (b1, rest) = rest.split_at(h);
                let (w2, _b2) = rest.split_at(c * h);
                let off_b1 = h * f;
                let off_w2 = off_b1 + h;
                let off_b2 = off_w2 + c * h;
                for ex in &data.examples {
                    let pre: Vec<f64> = (0..h)
                        .map(|k| {
                            let row = &w1[k * f..(k + 1) * f];
                            row.iter().zip(&ex.features).map(|(a, v)| a * v).sum::<f64>() + b1[k]
                        })
                        .collect();
                    let hid: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
                    let z: Vec<f64> = (0..c)
                        .map(|k| {
                            let row = &w2[k * h..(k + 1) * h];
                            row.iter().zip(&hid).map(|(a, v)| a * v).sum::<f64>()
                                + ws[off_b2 + k]
                        })
                        .collect();
                    let (p, nll) = softmax_nll(&z, ex.label);
                    loss += nll / m;
                    let delta: Vec<f64> = (0..c)
                        .map(|k| (p[k] - if k == ex.label { 1.0 } else { 0.0 }) / m)
                        .collect();
                    // output layer
                    for k in 0..c {
                        let row = &mut grad[off_w2 + k * h..off_w2 + (k + 1) * h];
                        for (g, v) in row.iter_mut().zip(&hid) {
                            *g += delta[k] * v;
                        }
                        grad[off_b2 + k] += delta[k];
                    }
                    // hidden layer through tanh'
                    for j in 0..h {
                        let back: f64 = (0..c).map(|k| delta[k] * w2[k * h + j]).sum();
                        let dpre = back * (1.0 - hid[j] * hid[j]);
                        let row = &mut grad[j * f..(j + 1) * f];
                        for (g, x) in row.iter_mut().zip(&ex.features) {
                            *g += dpre * x;
                        }
                        grad[off_b1 + j] += dpre;
                    }
                }
            }
        }
        Ok((ParamVector::from_raw(grad), loss))
    }

    /// One local gradient-descent step's model update: the exact full-batch
    /// gradient at the received global model.
    pub fn local_update(&self, w: &ParamVector, shard: &Dataset) -> Result<ParamVector> {
        self.gradient(w, shard).map(|(g, _)| g)
    }

    pub fn loss(&self, w: &ParamVector, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyInput("dataset for loss"));
        }
        let ws = w.as_slice();
        let m = data.len() as f64;
        let mut loss = 0.0;
        for ex in &data.examples {
            let z = self.logits(ws, &ex.features);
            loss += softmax_nll(&z, ex.label).1 / m;
        }
        Ok(loss)
    }

    /// Argmax class at `w`; ties resolve to the lowest class index.
    pub fn predict(&self, w: &ParamVector, x: &[f64]) -> usize {
        let z = self.logits(w.as_slice(), x);
        let mut best = 0;
        for (k, v) in z.iter().enumerate().skip(1) {
            if *v > z[best] {
                best = k;
            }
        }
        best
    }

    /// Smoothness handle for the logistic loss: (1/4) * max_i ||x_i||^2 with
    /// the bias coordinate included. Lets tests check learning-rate
    /// preconditions of the form alpha < 1/((N+2) L).
    pub fn l_smooth_bound(&self, data: &Dataset) -> f64 {
        let max_sq = data
            .examples
            .iter()
            .map(|ex| ex.features.iter().map(|v| v * v).sum::<f64>() + 1.0)
            .fold(0.0, f64::max);
        0.25 * max_sq
    }
}

/// Numerically stable softmax probabilities and negative log-likelihood.
fn softmax_nll(logits: &[f64], label: usize) -> (Vec<f64>, f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let p: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let nll = -(p[label].max(1e-300)).ln();
    (p, nll)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Example};
    use rand_chacha::ChaCha12Rng;

    fn single_example_dataset() -> Dataset {
        Dataset::new(
            vec![Example { features: vec![0.5, -1.5], label: 1 }],
            2,
            2,
        )
        .unwrap()
    }

    #[test]
    fn logistic_gradient_matches_analytic_softmax_formula() {
        let data = single_example_dataset();
        let model = Model::init(ModelKind::Logistic, 2, 2, 0, 3);
        let w = ParamVector::new(vec![0.2, -0.1, 0.05, 0.3, 0.01, -0.02]).unwrap();
        let (grad, _) = model.gradient(&w, &data).unwrap();

        let x = &data.examples[0].features;
        let z0 = 0.2 * x[0] - 0.1 * x[1] + 0.01;
        let z1 = 0.05 * x[0] + 0.3 * x[1] - 0.02;
        let e0 = z0.exp();
        let e1 = z1.exp();
        let p0 = e0 / (e0 + e1);
        let p1 = e1 / (e0 + e1);
        let want = [p0 * x[0], p0 * x[1], (p1 - 1.0) * x[0], (p1 - 1.0) * x[1], p0, p1 - 1.0];
        for (g, w) in grad.as_slice().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    fn finite_difference(model: &Model, w: &ParamVector, data: &Dataset, h: f64) -> Vec<f64> {
        (0..w.dim())
            .map(|i| {
                let mut plus = w.as_slice().to_vec();
                let mut minus = plus.clone();
                plus[i] += h;
                minus[i] -= h;
                let lp = model.loss(&ParamVector::new(plus).unwrap(), data).unwrap();
                let lm = model.loss(&ParamVector::new(minus).unwrap(), data).unwrap();
                (lp - lm) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for kind in [ModelKind::Logistic, ModelKind::Mlp] {
            let data = generate_synthetic(3, 4, 6, 31).unwrap();
            let model = Model::init(kind, 4, 3, 5, 9);
            let w = ParamVector::new(
                (0..model.params.dim()).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            )
            .unwrap();
            let (grad, _) = model.gradient(&w, &data).unwrap();
            let fd = finite_difference(&model, &w, &data, 1e-5);
            let num: f64 = grad
                .as_slice()
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(num / den <= 1e-5, "{kind:?}: relative error {}", num / den);
        }
    }

    #[test]
    fn gradient_vanishes_at_minimum() {
        // Fit a logistic model to convergence on a tiny separable set.
        let data = generate_synthetic(2, 3, 20, 5).unwrap();
        let model = Model::init(ModelKind::Logistic, 3, 2, 0, 1);
        let mut w = model.params.clone();
        // L2-regularized descent so a finite minimum exists.
        let lambda = 0.05;
        for _ in 0..50_000 {
            let (g, _) = model.gradient(&w, &data).unwrap();
            let mut step = g.as_slice().to_vec();
            for (s, wi) in step.iter_mut().zip(w.as_slice()) {
                *s += lambda * wi;
            }
            w = ParamVector::from_raw(
                w.as_slice().iter().zip(&step).map(|(a, b)| a - 0.2 * b).collect(),
            );
        }
        let (g, _) = model.gradient(&w, &data).unwrap();
        let total = ParamVector::from_raw(
            g.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a + lambda * b).collect(),
        );
        assert!(total.l2() <= 1e-6, "stationarity residual {}", total.l2());
    }

    #[test]
    fn gradient_rejects_empty_shard() {
        let model = Model::init(ModelKind::Logistic, 2, 2, 0, 0);
        let empty = Dataset::new(vec![], 2, 2).unwrap();
        assert!(model.gradient(&model.params, &empty).is_err());
    }

    #[test]
    fn central_training_reaches_high_accuracy() {
        let data = generate_synthetic(10, 32, 50, 13).unwrap();
        let model = Model::init(ModelKind::Logistic, 32, 10, 0, 2);
        let mut w = model.params.clone();
        for _ in 0..400 {
            let (g, _) = model.gradient(&w, &data).unwrap();
            w = ParamVector::from_raw(
                w.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a - 0.5 * b).collect(),
            );
        }
        let correct = data
            .examples
            .iter()
            .filter(|ex| model.predict(&w, &ex.features) == ex.label)
            .count();
        let acc = correct as f64 / data.len() as f64;
        assert!(acc >= 0.9, "train accuracy {acc}");
    }
}
