use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// k-nearest-neighbour regressor on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    k: usize,
    center: Vec<f64>,
    scale: Vec<f64>,
    points: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

impl KnnModel {
    pub fn fit(features: &[Vec<f64>], targets: &[f64], k: usize) -> Result<Self> {
        let n = features.len();
        if n == 0 {
            return Err(Error::Data("empty training set".into()));
        }
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let p = features[0].len();
        let mut center = vec![0.0; p];
        let mut scale = vec![0.0; p];
        for j in 0..p {
            let m = features.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            let v = features.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n as f64;
            center[j] = m;
            scale[j] = if v > 0.0 { v.sqrt() } else { 1.0 };
        }
        let points = features
            .iter()
            .map(|r| r.iter().enumerate().map(|(j, v)| (v - center[j]) / scale[j]).collect())
            .collect();
        Ok(KnnModel { k: k.min(n), center, scale, points, targets: targets.to_vec() })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let q: Vec<f64> = x.iter().enumerate().map(|(j, v)| (v - self.center[j]) / self.scale[j]).collect();
        let mut dist: Vec<(f64, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
            .collect();
        // Ties broken by training order.
        let by = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < dist.len() {
            dist.select_nth_unstable_by(self.k - 1, by);
        }
        let mut nearest: Vec<usize> = dist[..self.k].iter().map(|d| d.1).collect();
        nearest.sort_unstable();
        nearest.iter().map(|&i| self.targets[i]).sum::<f64>() / self.k as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_equals_n_predicts_mean() {
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let ys: Vec<f64> = (0..10).map(|i| (i * i) as f64).collect();
        let m = KnnModel::fit(&xs, &ys, 10).unwrap();
        let mean = ys.iter().sum::<f64>() / 10.0;
        assert!((m.predict(&[3.3]) - mean).abs() < 1e-12);
        assert!((m.predict(&[-100.0]) - mean).abs() < 1e-12);
    }

    #[test]
    fn one_neighbour_recovers_training_target() {
        let xs = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![5.0, 5.0]];
        let ys = [1.0, 2.0, 3.0];
        let m = KnnModel::fit(&xs, &ys, 1).unwrap();
        assert_eq!(m.predict(&[0.9, 1.1]), 2.0);
    }
}
