use serde::{Deserialize, Serialize};

/// k-nearest-neighbour regressor: euclidean distance, uniform weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub k: usize,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl KnnModel {
    pub fn fit(k: usize, x: Vec<Vec<f64>>, y: Vec<f64>) -> Self {
        assert!(k >= 1 && !x.is_empty() && x.len() == y.len());
        KnnModel { k, x, y }
    }

    /// Mean label of the `k` nearest rows (all rows if `k` exceeds them);
    /// equal distances go to the lower row index.
    pub fn predict(&self, q: &[f64]) -> f64 {
        let mut d: Vec<(f64, usize)> = self
            .x
            .iter()
            .enumerate()
            .map(|(i, row)| (row.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
            .collect();
        let k = self.k.min(d.len());
        let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < d.len() {
            d.select_nth_unstable_by(k - 1, by_dist);
        }
        let mut labels: Vec<f64> = d[..k].iter().map(|&(_, i)| self.y[i]).collect();
        // summing in value order makes the result independent of row order
        labels.sort_by(f64::total_cmp);
        let mean = labels.iter().sum::<f64>() / k as f64;
        mean.clamp(labels[0], labels[k - 1])
    }
}
