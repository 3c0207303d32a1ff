use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Ridge regression on standardized features with an unpenalized intercept.
///
/// Minimizes `Σ (y - ŷ)² + λ‖w‖²` over the standardized weights `w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub lambda: f64,
    pub mean: Vec<f64>,
    /// Population standard deviation per feature; 0 marks a constant feature,
    /// which gets weight 0.
    pub std: Vec<f64>,
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl RidgeModel {
    pub fn fit(lambda: f64, x: &[Vec<f64>], y: &[f64]) -> Option<Self> {
        let n = x.len();
        let d = x.first()?.len();
        let nf = n as f64;
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / nf).collect();
        let std: Vec<f64> = (0..d)
            .map(|j| (x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / nf).sqrt())
            .collect();
        let active: Vec<usize> = (0..d).filter(|&j| std[j] > 0.0).collect();
        let ybar = y.iter().sum::<f64>() / nf;
        let mut weights = vec![0.0; d];
        if !active.is_empty() {
            let z = DMatrix::from_fn(n, active.len(), |i, c| {
                let j = active[c];
                (x[i][j] - mean[j]) / std[j]
            });
            let yc = DVector::from_iterator(n, y.iter().map(|v| v - ybar));
            let mut a = z.tr_mul(&z);
            for c in 0..active.len() {
                a[(c, c)] += lambda;
            }
            let b = z.tr_mul(&yc);
            let w = a.clone().cholesky().map(|ch| ch.solve(&b)).or_else(|| a.lu().solve(&b))?;
            for (c, &j) in active.iter().enumerate() {
                weights[j] = w[c];
            }
        }
        Some(RidgeModel { lambda, mean, std, weights, intercept: ybar })
    }

    pub fn predict(&self, q: &[f64]) -> f64 {
        self.intercept
            + (0..self.weights.len())
                .filter(|&j| self.std[j] > 0.0)
                .map(|j| self.weights[j] * (q[j] - self.mean[j]) / self.std[j])
                .sum::<f64>()
    }
}
