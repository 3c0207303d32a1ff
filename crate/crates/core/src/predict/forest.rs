use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Features tried per split.
    pub max_features: usize,
    pub min_samples_leaf: usize,
    pub seed: u64,
}

/// One regression tree as parallel arrays. `feature[i] < 0` marks a leaf
/// holding `value[i]`; otherwise rows with `x[feature] <= threshold` go to
/// `left[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TreeArrays {
    pub feature: Vec<i32>,
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    pub value: Vec<f64>,
}

impl TreeArrays {
    pub fn predict(&self, q: &[f64]) -> f64 {
        let mut i = 0usize;
        while self.feature[i] >= 0 {
            i = if q[self.feature[i] as usize] <= self.threshold[i] { self.left[i] } else { self.right[i] } as usize;
        }
        self.value[i]
    }

    fn push_leaf(&mut self, value: f64) -> usize {
        self.feature.push(-1);
        self.threshold.push(0.0);
        self.left.push(0);
        self.right.push(0);
        self.value.push(value);
        self.feature.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<TreeArrays>,
    pub label_min: f64,
    pub label_max: f64,
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    max_features: usize,
    min_leaf: usize,
    rng: Xoshiro256PlusPlus,
    tree: TreeArrays,
}

struct Split {
    feature: usize,
    threshold: f64,
    sse: f64,
}

fn mean(y: &[f64], rows: &[usize]) -> f64 {
    rows.iter().map(|&r| y[r]).sum::<f64>() / rows.len() as f64
}

impl Builder<'_> {
    fn best_split(&mut self, rows: &[usize]) -> Option<Split> {
        let d = self.x[0].len();
        let n = rows.len();
        let mut best: Option<Split> = None;
        let mut order = rows.to_vec();
        for f in sample(&mut self.rng, d, self.max_features.min(d)).into_vec() {
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let total: f64 = order.iter().map(|&r| self.y[r]).sum();
            let total_sq: f64 = order.iter().map(|&r| self.y[r] * self.y[r]).sum();
            let (mut ls, mut lsq) = (0.0, 0.0);
            for i in 0..n - 1 {
                let yi = self.y[order[i]];
                ls += yi;
                lsq += yi * yi;
                let nl = i + 1;
                let nr = n - nl;
                if nl < self.min_leaf || nr < self.min_leaf {
                    continue;
                }
                let (a, b) = (self.x[order[i]][f], self.x[order[i + 1]][f]);
                if a == b {
                    continue;
                }
                let rs = total - ls;
                let rsq = total_sq - lsq;
                let sse = (lsq - ls * ls / nl as f64) + (rsq - rs * rs / nr as f64);
                if best.as_ref().is_none_or(|s| sse < s.sse) {
                    let mut threshold = a + (b - a) / 2.0;
                    if threshold >= b {
                        threshold = a;
                    }
                    best = Some(Split { feature: f, threshold, sse });
                }
            }
        }
        best
    }

    fn grow(&mut self, rows: Vec<usize>) -> usize {
        let value = mean(self.y, &rows);
        let pure = rows.iter().all(|&r| self.y[r] == self.y[rows[0]]);
        if pure || rows.len() < 2 * self.min_leaf {
            return self.tree.push_leaf(value);
        }
        let Some(split) = self.best_split(&rows) else {
            return self.tree.push_leaf(value);
        };
        let node = self.tree.push_leaf(value);
        let (l, r): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(|&i| self.x[i][split.feature] <= split.threshold);
        let li = self.grow(l);
        let ri = self.grow(r);
        self.tree.feature[node] = split.feature as i32;
        self.tree.threshold[node] = split.threshold;
        self.tree.left[node] = li as u32;
        self.tree.right[node] = ri as u32;
        node
    }
}

impl ForestModel {
    /// Bagged CART trees. Tree `t` uses the `t`-th seed drawn from a master
    /// generator seeded with `params.seed`, so results do not depend on how
    /// trees are scheduled.
    pub fn fit(params: &ForestParams, x: &[Vec<f64>], y: &[f64]) -> Self {
        assert!(!x.is_empty() && x.len() == y.len() && params.n_trees >= 1);
        let mut master = Xoshiro256PlusPlus::seed_from_u64(params.seed);
        let seeds: Vec<u64> = (0..params.n_trees).map(|_| master.next_u64()).collect();
        let build = |seed: u64| {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            let n = x.len();
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut b = Builder {
                x,
                y,
                max_features: params.max_features.max(1),
                min_leaf: params.min_samples_leaf.max(1),
                rng,
                tree: TreeArrays::default(),
            };
            b.grow(rows);
            b.tree
        };
        let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len());
        let chunk = seeds.len().div_ceil(threads);
        let trees: Vec<TreeArrays> = std::thread::scope(|s| {
            let handles: Vec<_> = seeds.chunks(chunk).map(|c| s.spawn(move || c.iter().map(|&sd| build(sd)).collect::<Vec<_>>())).collect();
            handles.into_iter().flat_map(|h| h.join().expect("tree builder panicked")).collect()
        });
        let label_min = y.iter().cloned().fold(f64::INFINITY, f64::min);
        let label_max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        ForestModel { trees, label_min, label_max }
    }

    pub fn predict(&self, q: &[f64]) -> f64 {
        let s: f64 = self.trees.iter().map(|t| t.predict(q)).sum();
        (s / self.trees.len() as f64).clamp(self.label_min, self.label_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn params(seed: u64) -> ForestParams {
        ForestParams { n_trees: 20, max_features: 2, min_samples_leaf: 2, seed }
    }

    fn table(seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let y = x.iter().map(|r| if r[0] > 0.5 { 3.0 } else { 1.0 } + 0.1 * r[1]).collect();
        (x, y)
    }

    #[test]
    fn learns_a_step() {
        let (x, y) = table(1, 300);
        let f = ForestModel::fit(&params(4), &x, &y);
        assert!((f.predict(&[0.9, 0.5, 0.5]) - 3.05).abs() < 0.15);
        assert!((f.predict(&[0.1, 0.5, 0.5]) - 1.05).abs() < 0.15);
    }

    #[test]
    fn deterministic_per_seed() {
        let (x, y) = table(2, 80);
        assert_eq!(ForestModel::fit(&params(9), &x, &y), ForestModel::fit(&params(9), &x, &y));
        assert_ne!(ForestModel::fit(&params(9), &x, &y), ForestModel::fit(&params(10), &x, &y));
    }

    #[test]
    fn leaves_hold_at_least_min_samples() {
        let (x, y) = table(3, 50);
        let f = ForestModel::fit(&ForestParams { n_trees: 1, max_features: 3, min_samples_leaf: 5, seed: 1 }, &x, &y);
        // every internal node's split leaves >= 5 bootstrap rows per side, so
        // a tree over 50 rows has at most 10 leaves
        let leaves = f.trees[0].feature.iter().filter(|&&v| v < 0).count();
        assert!(leaves <= 10, "{leaves}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn predictions_stay_in_label_hull(seed: u64, q in proptest::collection::vec(-1.0..2.0f64, 3)) {
            let (x, y) = table(seed, 40);
            let f = ForestModel::fit(&ForestParams { n_trees: 5, ..params(seed) }, &x, &y);
            let p = f.predict(&q);
            let lo = y.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= p && p <= hi);
        }
    }
}
