//! Scalar local-level Kalman filter and RTS smoother on a daily grid.
//!
//! The prior `N(x0, p0)` sits on the first observation day (the anchor).
//! Grid days before the anchor carry no information of their own: their
//! marginals are the anchor's, widened by `q` per day of distance. This makes
//! every output independent of how much padding the grid has.

use super::{BandSeries, GapfillError, Result, StateSpaceParams};
use chrono::{Days, NaiveDate};
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub grid_dates: Vec<NaiveDate>,
    /// Filtered means `E[x_t | y_1..t]`.
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    /// One-step predicted means, equal to the filtered mean before the update.
    pub predicted_means: Vec<f64>,
    pub predicted_variances: Vec<f64>,
    /// Gaussian log-likelihood of all observations.
    pub loglik: f64,
    anchor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmootherResult {
    pub grid_dates: Vec<NaiveDate>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub loglik: f64,
    /// `Cov(x_t, x_{t-1} | all)` for grid index `t`; zero at and before the anchor.
    pub lag_one_covariances: Vec<f64>,
    pub(crate) anchor: usize,
}

struct DailyGrid {
    dates: Vec<NaiveDate>,
    obs: Vec<Option<f64>>,
    anchor: usize,
}

impl DailyGrid {
    fn build(series: &BandSeries, start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if start > series.first_date() || end < series.last_date() {
            return Err(GapfillError::GridTooSmall { start, end });
        }
        let n = (end - start).num_days() as usize + 1;
        let dates: Vec<NaiveDate> = (0..n as u64).map(|k| start + Days::new(k)).collect();
        let mut obs = vec![None; n];
        for &(d, y) in series.observations() {
            obs[(d - start).num_days() as usize] = Some(y);
        }
        Ok(DailyGrid {
            dates,
            obs,
            anchor: (series.first_date() - start).num_days() as usize,
        })
    }
}

pub fn kalman_filter(series: &BandSeries, params: &StateSpaceParams) -> Result<FilterResult> {
    kalman_filter_over(series, params, series.first_date(), series.last_date())
}

/// Runs the filter on the daily grid `[start, end]`, which must cover every
/// observation.
pub fn kalman_filter_over(
    series: &BandSeries,
    params: &StateSpaceParams,
    start: NaiveDate,
    end: NaiveDate,
) -> Result<FilterResult> {
    params.validate()?;
    let grid = DailyGrid::build(series, start, end)?;
    let n = grid.dates.len();
    let a = grid.anchor;
    let q = params.q;

    let mut means = vec![0.0; n];
    let mut variances = vec![0.0; n];
    let mut predicted_means = vec![0.0; n];
    let mut predicted_variances = vec![0.0; n];
    let mut loglik = 0.0;

    for i in 0..a {
        let widen = (a - i) as f64 * q;
        means[i] = params.x0;
        variances[i] = params.p0 + widen;
        predicted_means[i] = params.x0;
        predicted_variances[i] = params.p0 + widen;
    }

    let (mut m, mut p) = (params.x0, params.p0);
    for t in a..n {
        if t > a {
            p += q;
        }
        predicted_means[t] = m;
        predicted_variances[t] = p;
        if let Some(y) = grid.obs[t] {
            let s = p + params.r;
            let resid = y - m;
            if s > 0.0 {
                let k = p / s;
                m += k * resid;
                p *= 1.0 - k;
                loglik -= 0.5 * ((2.0 * PI * s).ln() + resid * resid / s);
            } else if resid != 0.0 {
                return Err(GapfillError::DegenerateParams(grid.dates[t]));
            }
        }
        means[t] = m;
        variances[t] = p.max(0.0);
    }

    Ok(FilterResult {
        grid_dates: grid.dates,
        means,
        variances,
        predicted_means,
        predicted_variances,
        loglik,
        anchor: a,
    })
}

pub fn kalman_smooth(series: &BandSeries, params: &StateSpaceParams) -> Result<SmootherResult> {
    kalman_smooth_over(series, params, series.first_date(), series.last_date())
}

/// Rauch-Tung-Striebel smoothing over the daily grid `[start, end]`.
pub fn kalman_smooth_over(
    series: &BandSeries,
    params: &StateSpaceParams,
    start: NaiveDate,
    end: NaiveDate,
) -> Result<SmootherResult> {
    let f = kalman_filter_over(series, params, start, end)?;
    let n = f.means.len();
    let a = f.anchor;
    let q = params.q;

    let mut means = f.means.clone();
    let mut variances = f.variances.clone();
    let mut lag_one = vec![0.0; n];
    for t in (a..n - 1).rev() {
        let pred = f.predicted_variances[t + 1];
        let gain = if pred > 0.0 { f.variances[t] / pred } else { 0.0 };
        means[t] = f.means[t] + gain * (means[t + 1] - f.predicted_means[t + 1]);
        variances[t] = (f.variances[t] + gain * gain * (variances[t + 1] - pred)).max(0.0);
        lag_one[t + 1] = gain * variances[t + 1];
    }
    for i in 0..a {
        means[i] = means[a];
        variances[i] = variances[a] + (a - i) as f64 * q;
    }

    Ok(SmootherResult {
        grid_dates: f.grid_dates,
        means,
        variances,
        loglik: f.loglik,
        lag_one_covariances: lag_one,
        anchor: a,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn series(points: &[(u64, f64)]) -> BandSeries {
        let base = d("2020-03-01");
        BandSeries::new("B08", points.iter().map(|&(k, v)| (base + Days::new(k), v)).collect()).unwrap()
    }

    /// Marginals of `x` on grid days `0..n` conditioned on observations, built
    /// from the dense joint covariance of the anchored random walk.
    struct DenseOracle {
        offsets: Vec<i64>,
        ys: Vec<f64>,
        params: StateSpaceParams,
    }

    impl DenseOracle {
        fn cov(&self, i: i64, j: i64) -> f64 {
            let shared = if (i >= 0) == (j >= 0) { i.abs().min(j.abs()) } else { 0 };
            self.params.p0 + self.params.q * shared as f64
        }

        /// (mean, variance) of `x_day` (relative to the anchor) given the
        /// observations with index `< upto`.
        fn marginal(&self, day: i64, upto: usize) -> (f64, f64) {
            let k = upto;
            if k == 0 {
                return (self.params.x0, self.cov(day, day));
            }
            let syy = DMatrix::from_fn(k, k, |a, b| {
                self.cov(self.offsets[a], self.offsets[b]) + if a == b { self.params.r } else { 0.0 }
            });
            let sxy = DVector::from_fn(k, |a, _| self.cov(day, self.offsets[a]));
            let resid = DVector::from_fn(k, |a, _| self.ys[a] - self.params.x0);
            let inv = syy.try_inverse().unwrap();
            let w = &inv * &sxy;
            (self.params.x0 + w.dot(&resid), self.cov(day, day) - w.dot(&sxy))
        }

        fn loglik(&self) -> f64 {
            let k = self.ys.len();
            let syy = DMatrix::from_fn(k, k, |a, b| {
                self.cov(self.offsets[a], self.offsets[b]) + if a == b { self.params.r } else { 0.0 }
            });
            let resid = DVector::from_fn(k, |a, _| self.ys[a] - self.params.x0);
            let chol = syy.clone().cholesky().unwrap();
            let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
            let quad = resid.dot(&chol.solve(&resid));
            -0.5 * (k as f64 * (2.0 * PI).ln() + logdet + quad)
        }
    }

    #[test]
    fn constant_series_noiseless() {
        let s = series(&[(0, 0.4), (3, 0.4), (9, 0.4), (10, 0.4), (20, 0.4)]);
        let p = StateSpaceParams { q: 1e-3, r: 1e-12, x0: 0.1, p0: 1.0 };
        let f = kalman_filter(&s, &p).unwrap();
        assert!(f.means.iter().all(|m| (m - 0.4).abs() < 1e-6));
        let sm = kalman_smooth(&s, &p).unwrap();
        assert!(sm.means.iter().all(|m| (m - 0.4).abs() < 1e-6));
    }

    #[test]
    fn single_observation_is_bayes_update() {
        let s = series(&[(0, 0.7)]);
        let p = StateSpaceParams { q: 0.01, r: 0.04, x0: 0.5, p0: 0.09 };
        let f = kalman_filter(&s, &p).unwrap();
        let expect_mean = (0.5 / 0.09 + 0.7 / 0.04) / (1.0 / 0.09 + 1.0 / 0.04);
        let expect_var = 1.0 / (1.0 / 0.09 + 1.0 / 0.04);
        assert!((f.means[0] - expect_mean).abs() < 1e-15);
        assert!((f.variances[0] - expect_var).abs() < 1e-15);
    }

    #[test]
    fn static_level_limit_is_precision_weighted_mean() {
        let ys = [0.31, 0.35, 0.29, 0.4];
        let s = series(&[(0, ys[0]), (4, ys[1]), (5, ys[2]), (12, ys[3])]);
        let p = StateSpaceParams { q: 0.0, r: 0.01, x0: 0.2, p0: 0.5 };
        let sm = kalman_smooth(&s, &p).unwrap();
        let precision = 1.0 / p.p0 + ys.len() as f64 / p.r;
        let mean = (p.x0 / p.p0 + ys.iter().sum::<f64>() / p.r) / precision;
        for m in &sm.means {
            assert!((m - mean).abs() < 1e-12);
        }
        for v in &sm.variances {
            assert!((v - 1.0 / precision).abs() < 1e-12);
        }
    }

    #[test]
    fn conflicting_noiseless_observations_are_degenerate() {
        let s = series(&[(0, 0.2), (1, 0.3)]);
        let p = StateSpaceParams { q: 0.0, r: 0.0, x0: 0.2, p0: 1.0 };
        assert_eq!(kalman_filter(&s, &p), Err(GapfillError::DegenerateParams(d("2020-03-02"))));
        let s = series(&[(0, 0.2), (1, 0.2)]);
        assert!(kalman_filter(&s, &p).is_ok());
    }

    #[test]
    fn invalid_params_rejected() {
        let s = series(&[(0, 0.2)]);
        let p = StateSpaceParams { q: -1.0, r: 0.1, x0: 0.0, p0: 1.0 };
        assert!(matches!(kalman_filter(&s, &p), Err(GapfillError::InvalidParams(_))));
    }

    #[test]
    fn five_observation_filter_matches_dense_oracle() {
        let pts = [(0, 0.31), (2, 0.36), (7, 0.33), (8, 0.41), (15, 0.38)];
        let s = series(&pts);
        let p = StateSpaceParams { q: 2e-3, r: 5e-3, x0: 0.3, p0: 0.2 };
        let f = kalman_filter(&s, &p).unwrap();
        let oracle = DenseOracle {
            offsets: pts.iter().map(|&(k, _)| k as i64).collect(),
            ys: pts.iter().map(|&(_, v)| v).collect(),
            params: p,
        };
        let (m, v) = oracle.marginal(15, 5);
        let last = f.means.len() - 1;
        assert!((f.means[last] - m).abs() < 1e-8);
        assert!((f.variances[last] - v).abs() < 1e-8);
        assert!((f.loglik - oracle.loglik()).abs() < 1e-8);
    }

    #[test]
    fn randomized_dense_oracle_equivalence() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
        for _ in 0..50 {
            let n_obs = rng.random_range(1..=8);
            let mut day = 0u64;
            let mut pts = Vec::new();
            for i in 0..n_obs {
                if i > 0 {
                    day += rng.random_range(1..12);
                }
                pts.push((day, rng.random_range(0.0..1.0)));
            }
            let p = StateSpaceParams {
                q: rng.random_range(1e-5..0.05),
                r: rng.random_range(1e-5..0.05),
                x0: rng.random_range(0.0..1.0),
                p0: rng.random_range(1e-4..1.0),
            };
            let (pad_before, pad_after) = (rng.random_range(0..6u64), rng.random_range(0..6u64));
            let s = series(&pts);
            let start = s.first_date() - Days::new(pad_before);
            let end = s.last_date() + Days::new(pad_after);
            let f = kalman_filter_over(&s, &p, start, end).unwrap();
            let sm = kalman_smooth_over(&s, &p, start, end).unwrap();
            let oracle = DenseOracle {
                offsets: pts.iter().map(|&(k, _)| k as i64).collect(),
                ys: pts.iter().map(|&(_, v)| v).collect(),
                params: p,
            };
            for (i, date) in f.grid_dates.iter().enumerate() {
                let rel = (*date - s.first_date()).num_days();
                let seen = pts.iter().filter(|&&(k, _)| k as i64 <= rel).count();
                let (fm, fv) = oracle.marginal(rel, seen);
                let (sm_m, sm_v) = oracle.marginal(rel, pts.len());
                assert!((f.means[i] - fm).abs() < 1e-8, "filter mean day {rel}");
                assert!((f.variances[i] - fv).abs() < 1e-8, "filter var day {rel}");
                assert!((sm.means[i] - sm_m).abs() < 1e-8, "smoother mean day {rel}");
                assert!((sm.variances[i] - sm_v).abs() < 1e-8, "smoother var day {rel}");
                assert!(sm.variances[i] <= f.variances[i] + 1e-15);
            }
            assert!((f.loglik - oracle.loglik()).abs() < 1e-8);
        }
    }

    #[test]
    fn padding_does_not_change_shared_days() {
        let s = series(&[(0, 0.2), (6, 0.25), (9, 0.3)]);
        let p = StateSpaceParams { q: 1e-3, r: 2e-3, x0: 0.2, p0: 0.1 };
        let tight = kalman_smooth(&s, &p).unwrap();
        let padded = kalman_smooth_over(&s, &p, s.first_date() - Days::new(4), s.last_date() + Days::new(7)).unwrap();
        for (i, m) in tight.means.iter().enumerate() {
            assert_eq!(*m, padded.means[i + 4]);
            assert_eq!(tight.variances[i], padded.variances[i + 4]);
        }
        assert_eq!(tight.loglik, padded.loglik);
    }

    #[test]
    fn grid_must_cover_observations() {
        let s = series(&[(0, 0.2), (6, 0.25)]);
        let p = StateSpaceParams { q: 1e-3, r: 2e-3, x0: 0.2, p0: 0.1 };
        assert!(matches!(
            kalman_filter_over(&s, &p, s.first_date() + Days::new(1), s.last_date()),
            Err(GapfillError::GridTooSmall { .. })
        ));
    }
}
