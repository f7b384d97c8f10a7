use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear model with an unpenalized intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

impl RidgeModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.coefficients.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }
}

/// Solves `(Xc'Xc + lambda I) beta = Xc'yc` on centered data. A rank-deficient
/// system (only possible with `lambda = 0`) gets the minimum-norm solution.
pub fn fit(features: &[Vec<f64>], targets: &[f64], lambda: f64) -> Result<RidgeModel> {
    let n = features.len();
    if n == 0 {
        return Err(Error::Data("empty training set".into()));
    }
    let p = features[0].len();
    let y_mean = targets.iter().sum::<f64>() / n as f64;
    let mut x_mean = vec![0.0; p];
    for row in features {
        for (m, v) in x_mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    if p == 0 {
        return Ok(RidgeModel { intercept: y_mean, coefficients: Vec::new() });
    }
    let xc = DMatrix::from_fn(n, p, |i, j| features[i][j] - x_mean[j]);
    let yc = DVector::from_iterator(n, targets.iter().map(|y| y - y_mean));
    let mut gram = xc.transpose() * &xc;
    for j in 0..p {
        gram[(j, j)] += lambda;
    }
    let rhs = xc.transpose() * yc;
    let beta = match gram.clone().cholesky() {
        Some(ch) if lambda > 0.0 => ch.solve(&rhs),
        _ => gram
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::Numerical(format!("ridge solve failed: {e}")))?,
    };
    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let intercept = y_mean - coefficients.iter().zip(&x_mean).map(|(b, m)| b * m).sum::<f64>();
    if !intercept.is_finite() || coefficients.iter().any(|b| !b.is_finite()) {
        return Err(Error::Numerical("ridge produced non-finite coefficients".into()));
    }
    Ok(RidgeModel { intercept, coefficients })
}
