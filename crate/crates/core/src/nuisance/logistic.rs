//! Logistic regression fitted by iteratively reweighted least squares.
//!
//! Parameters are laid out as `[intercept, b_1, ..., b_p]`. The objective is
//! the mean log-likelihood, so the convergence tolerance does not scale with n.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub params: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
}

impl LogisticModel {
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.params[0] + self.params[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }

    /// Unclipped P(label = 1 | x).
    pub fn probability(&self, x: &[f64]) -> f64 {
        sigmoid(self.linear_predictor(x))
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^t) without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn eta(params: &[f64], x: &[f64]) -> f64 {
    params[0] + params[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
}

/// Mean Bernoulli log-likelihood.
pub fn log_likelihood(params: &[f64], features: &[Vec<f64>], labels: &[f64]) -> f64 {
    let n = features.len() as f64;
    features
        .iter()
        .zip(labels)
        .map(|(x, &y)| {
            let t = eta(params, x);
            y * t - softplus(t)
        })
        .sum::<f64>()
        / n
}

/// Gradient of [`log_likelihood`].
pub fn gradient(params: &[f64], features: &[Vec<f64>], labels: &[f64]) -> Vec<f64> {
    let n = features.len() as f64;
    let mut g = vec![0.0; params.len()];
    for (x, &y) in features.iter().zip(labels) {
        let r = y - sigmoid(eta(params, x));
        g[0] += r;
        for (gj, v) in g[1..].iter_mut().zip(x) {
            *gj += r * v;
        }
    }
    g.iter_mut().for_each(|v| *v /= n);
    g
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn fit(features: &[Vec<f64>], labels: &[f64], tol: f64, max_iter: usize) -> Result<LogisticModel> {
    let n = features.len();
    if n == 0 {
        return Err(Error::Data("empty training set".into()));
    }
    let p = features[0].len() + 1;
    let design = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { features[i][j - 1] });
    let mut params = vec![0.0; p];
    let mut ll = log_likelihood(&params, features, labels);
    let mut grad = gradient(&params, features, labels);
    let mut iterations = 0;
    let mut converged = norm(&grad) <= tol;
    while !converged && iterations < max_iter {
        iterations += 1;
        let mut hess = DMatrix::<f64>::zeros(p, p);
        for i in 0..n {
            let pr = sigmoid(eta(&params, &features[i]));
            let w = (pr * (1.0 - pr)).max(1e-12) / n as f64;
            let row = design.row(i);
            hess += w * row.transpose() * row;
        }
        // Tiny ridge keeps the Newton system solvable for rank-deficient designs.
        for j in 0..p {
            hess[(j, j)] += 1e-12;
        }
        let g = DVector::from_column_slice(&grad);
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => hess
                .svd(true, true)
                .solve(&g, 1e-14)
                .map_err(|e| Error::Numerical(format!("logistic Newton step failed: {e}")))?,
        };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = params.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
            let trial_ll = log_likelihood(&trial, features, labels);
            if trial_ll.is_finite() && trial_ll >= ll {
                params = trial;
                ll = trial_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        grad = gradient(&params, features, labels);
        converged = norm(&grad) <= tol;
        if !accepted {
            break;
        }
    }
    Ok(LogisticModel { gradient_norm: norm(&grad), params, converged, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe() -> (Vec<Vec<f64>>, Vec<f64>) {
        let xs: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64 * 0.37).sin() * 2.0, (i % 5) as f64 - 2.0]).collect();
        let ys: Vec<f64> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| if x[0] + 0.3 * x[1] + ((i * 13) % 7) as f64 / 3.5 - 1.0 > 0.0 { 1.0 } else { 0.0 })
            .collect();
        (xs, ys)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (xs, ys) = probe();
        for k in 0..10 {
            let params = vec![0.3 * k as f64 - 1.0, 0.5 - 0.1 * k as f64, 0.2 * (k as f64).cos()];
            let g = gradient(&params, &xs, &ys);
            for j in 0..3 {
                let h = 1e-5;
                let mut up = params.clone();
                let mut dn = params.clone();
                up[j] += h;
                dn[j] -= h;
                let fd = (log_likelihood(&up, &xs, &ys) - log_likelihood(&dn, &xs, &ys)) / (2.0 * h);
                assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1e-3), "k={k} j={j} fd={fd} g={}", g[j]);
            }
        }
    }

    #[test]
    fn converged_fit_has_small_gradient() {
        let (xs, ys) = probe();
        let m = fit(&xs, &ys, 1e-8, 100).unwrap();
        assert!(m.converged);
        assert!(norm(&gradient(&m.params, &xs, &ys)) <= 1e-8);
    }

    #[test]
    fn balanced_labels_without_signal() {
        let xs: Vec<Vec<f64>> = (0..8).map(|_| vec![0.0]).collect();
        let ys = [0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let m = fit(&xs, &ys, 1e-8, 100).unwrap();
        assert!((m.probability(&[0.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn separable_data_terminates() {
        let xs: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let ys: Vec<f64> = (0..20).map(|i| if i < 10 { 0.0 } else { 1.0 }).collect();
        let m = fit(&xs, &ys, 1e-8, 100).unwrap();
        assert!(m.iterations <= 100);
        assert!(m.probability(&[0.0]) < 0.01);
        assert!(m.probability(&[19.0]) > 0.99);
    }
}
