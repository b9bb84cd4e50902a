//! L2-regularized logistic regression on frozen embeddings, the linear-probe
//! comparator for prompt tuning.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::embedding::{check_dim, normalize_vector, Embedding};
use crate::error::{Error, Result};
use crate::smid::{compute_metrics, Label, LabeledExample, Metrics};

const MAX_ITERATIONS: usize = 100;
const TOLERANCE: f64 = 1e-20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub regularization: f64,
    pub iterations: usize,
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl LinearProbe {
    /// Newton's method with backtracking on
    /// `mean(softplus(w.x + b) - y (w.x + b)) + regularization / 2 * |w|^2`,
    /// with `y = 1` for offensive. Inputs are unit-normalized first.
    pub fn fit(train: &[LabeledExample], regularization: f64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyTrainSet);
        }
        if !(regularization.is_finite() && regularization >= 0.0) {
            return Err(Error::InvalidArgument("regularization must be >= 0".into()));
        }
        let dim = train[0].embedding.dimension();
        let n = train.len();
        let rows: Vec<Vec<f64>> = train
            .iter()
            .map(|ex| {
                check_dim(dim, ex.embedding.dimension())?;
                normalize_vector(&ex.embedding.vector)
            })
            .collect::<Result<_>>()?;
        let y: Vec<f64> = train
            .iter()
            .map(|ex| f64::from(u8::from(ex.label == Label::Offensive)))
            .collect();
        if y.iter().all(|&v| v == y[0]) {
            return Err(Error::SingularProblem("training set has a single class".into()));
        }
        // Augmented design matrix with a trailing bias column.
        let x = DMatrix::from_fn(n, dim + 1, |i, j| if j < dim { rows[i][j] } else { 1.0 });
        let y = DVector::from_vec(y);
        let reg_mask = DVector::from_fn(dim + 1, |j, _| if j < dim { regularization } else { 0.0 });

        let objective = |theta: &DVector<f64>| -> f64 {
            let t = &x * theta;
            let data: f64 = t.iter().zip(y.iter()).map(|(ti, yi)| softplus(*ti) - yi * ti).sum();
            let reg: f64 = theta.iter().zip(reg_mask.iter()).map(|(w, r)| r * w * w).sum();
            data / n as f64 + 0.5 * reg
        };

        let mut theta = DVector::zeros(dim + 1);
        let mut value = objective(&theta);
        let mut iterations = 0;
        for it in 0..MAX_ITERATIONS {
            iterations = it + 1;
            let t = &x * &theta;
            let p = t.map(sigmoid);
            let grad = x.transpose() * (&p - &y) / n as f64 + reg_mask.component_mul(&theta);
            let w = p.map(|pi| pi * (1.0 - pi) / n as f64);
            let mut hessian = x.transpose() * DMatrix::from_diagonal(&w) * &x;
            for j in 0..=dim {
                hessian[(j, j)] += reg_mask[j];
            }
            let chol = hessian.cholesky().ok_or_else(|| {
                Error::SingularProblem("Hessian is not positive definite; increase regularization".into())
            })?;
            let step = chol.solve(&grad);
            let decrement = grad.dot(&step);
            if !decrement.is_finite() {
                return Err(Error::SingularProblem("non-finite Newton step".into()));
            }
            if decrement / 2.0 < TOLERANCE {
                break;
            }
            let mut alpha = 1.0;
            loop {
                let candidate = &theta - alpha * &step;
                let v = objective(&candidate);
                if v <= value - 0.25 * alpha * decrement || alpha < 1e-10 {
                    theta = candidate;
                    value = v;
                    break;
                }
                alpha *= 0.5;
            }
        }
        Ok(Self {
            weights: theta.rows(0, dim).iter().copied().collect(),
            bias: theta[dim],
            regularization,
            iterations,
        })
    }

    pub fn score(&self, e: &Embedding) -> Result<f64> {
        check_dim(self.weights.len(), e.dimension())?;
        let x = normalize_vector(&e.vector)?;
        let t: f64 = self.weights.iter().zip(&x).map(|(w, xi)| w * xi).sum::<f64>() + self.bias;
        Ok(sigmoid(t))
    }

    pub fn predict(&self, e: &Embedding) -> Result<Label> {
        Ok(if self.score(e)? > 0.5 {
            Label::Offensive
        } else {
            Label::NonOffensive
        })
    }
}

/// Fits a probe on `train` and reports its metrics on `test`.
pub fn linear_probe_baseline(
    train: &[LabeledExample],
    test: &[LabeledExample],
    regularization: f64,
) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let probe = LinearProbe::fit(train, regularization)?;
    let predictions = test
        .iter()
        .map(|ex| Ok((ex.embedding.id.clone(), probe.predict(&ex.embedding)?)))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<(String, Label)> = test
        .iter()
        .map(|ex| (ex.embedding.id.clone(), ex.label))
        .collect();
    compute_metrics(&predictions, &truth, Label::Offensive)
}
