//! Temporal gap filling of per-band reflectance series.
//!
//! Two estimators resolve a band's value at an arbitrary date: linear
//! interpolation between the neighbouring acquisitions, and a scalar
//! local-level (random walk plus noise) state-space model on a daily grid,
//! whose parameters are fitted by expectation-maximization and whose state is
//! recovered with a Rauch-Tung-Striebel smoother.

mod em;
mod kalman;

pub use em::{em_fit, EmFit, DEFAULT_MAX_ITER, DEFAULT_TOL, VARIANCE_FLOOR};
pub use kalman::{
    kalman_filter, kalman_filter_over, kalman_smooth, kalman_smooth_over, FilterResult,
    SmootherResult,
};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GapfillError {
    #[error("series has no observations")]
    EmptySeries,
    #[error("series has {found} observations, at least {required} required")]
    TooFewObservations { found: usize, required: usize },
    #[error("duplicate observation date {0}")]
    DuplicateDate(NaiveDate),
    #[error("non-finite observation value on {0}")]
    NonFiniteValue(NaiveDate),
    #[error("invalid state-space parameters: {0}")]
    InvalidParams(String),
    #[error("degenerate parameters: zero predictive variance with conflicting observation on {0}")]
    DegenerateParams(NaiveDate),
    #[error("grid {start}..{end} does not cover the observations")]
    GridTooSmall { start: NaiveDate, end: NaiveDate },
}

pub type Result<T> = std::result::Result<T, GapfillError>;

/// How a resolved reflectance value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSource {
    Observed,
    LinearInterpolated,
    KalmanSmoothed,
}

impl ValueSource {
    pub fn as_str(self) -> &'static str {
        match self {
            ValueSource::Observed => "observed",
            ValueSource::LinearInterpolated => "linear_interpolated",
            ValueSource::KalmanSmoothed => "kalman_smoothed",
        }
    }
}

impl fmt::Display for ValueSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ValueSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "observed" => Ok(ValueSource::Observed),
            "linear_interpolated" => Ok(ValueSource::LinearInterpolated),
            "kalman_smoothed" => Ok(ValueSource::KalmanSmoothed),
            other => Err(format!("unknown value source '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GapfillMethod {
    #[default]
    Linear,
    KalmanEm,
}

impl FromStr for GapfillMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "linear" => Ok(GapfillMethod::Linear),
            "kalman_em" | "kalman-em" => Ok(GapfillMethod::KalmanEm),
            other => Err(format!("unknown gap-fill method '{other}' (expected linear or kalman_em)")),
        }
    }
}

impl fmt::Display for GapfillMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GapfillMethod::Linear => "linear",
            GapfillMethod::KalmanEm => "kalman_em",
        })
    }
}

/// Dated observations of one band, strictly ascending by date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSeries {
    pub band: String,
    observations: Vec<(NaiveDate, f64)>,
}

impl BandSeries {
    /// Builds a series, sorting the observations by date.
    pub fn new(band: impl Into<String>, mut observations: Vec<(NaiveDate, f64)>) -> Result<Self> {
        if observations.is_empty() {
            return Err(GapfillError::EmptySeries);
        }
        if let Some(&(d, _)) = observations.iter().find(|(_, v)| !v.is_finite()) {
            return Err(GapfillError::NonFiniteValue(d));
        }
        observations.sort_by_key(|&(d, _)| d);
        if let Some(w) = observations.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(GapfillError::DuplicateDate(w[0].0));
        }
        Ok(BandSeries {
            band: band.into(),
            observations,
        })
    }

    pub fn observations(&self) -> &[(NaiveDate, f64)] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn first_date(&self) -> NaiveDate {
        self.observations[0].0
    }

    pub fn last_date(&self) -> NaiveDate {
        self.observations[self.observations.len() - 1].0
    }

    pub fn value_on(&self, date: NaiveDate) -> Option<f64> {
        self.observations
            .binary_search_by_key(&date, |&(d, _)| d)
            .ok()
            .map(|i| self.observations[i].1)
    }
}

/// Parameters of the local-level model
/// `x[t] = x[t-1] + w`, `w ~ N(0, q)`; `y[t] = x[t] + v`, `v ~ N(0, r)`,
/// with the state on the first observation day distributed `N(x0, p0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateSpaceParams {
    /// Process variance per day.
    pub q: f64,
    /// Observation variance.
    pub r: f64,
    pub x0: f64,
    pub p0: f64,
}

impl StateSpaceParams {
    /// Default EM starting point: `q = r = 1e-3`, `x0` the first observation, `p0 = 1`.
    pub fn initial_for(series: &BandSeries) -> Self {
        StateSpaceParams {
            q: 1e-3,
            r: 1e-3,
            x0: series.observations[0].1,
            p0: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("q", self.q), ("r", self.r), ("p0", self.p0)] {
            if !v.is_finite() || v < 0.0 {
                return Err(GapfillError::InvalidParams(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !self.x0.is_finite() {
            return Err(GapfillError::InvalidParams(format!("x0 must be finite, got {}", self.x0)));
        }
        Ok(())
    }
}

/// Piecewise-linear interpolation between neighbouring observations, clamped
/// to the end values outside the observed span.
pub fn linear_interpolate(series: &BandSeries, t: NaiveDate) -> Result<f64> {
    let obs = series.observations();
    let (first, last) = match (obs.first(), obs.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Err(GapfillError::EmptySeries),
    };
    if t <= first.0 {
        return Ok(first.1);
    }
    if t >= last.0 {
        return Ok(last.1);
    }
    match obs.binary_search_by_key(&t, |&(d, _)| d) {
        Ok(i) => Ok(obs[i].1),
        Err(i) => {
            let (t0, y0) = obs[i - 1];
            let (t1, y1) = obs[i];
            let frac = (t - t0).num_days() as f64 / (t1 - t0).num_days() as f64;
            Ok(y0 + frac * (y1 - y0))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub source: ValueSource,
    /// Posterior state variance, for smoothed estimates.
    pub variance: Option<f64>,
}

/// Resolves a band value at `t`.
///
/// An observation on `t` is returned as-is. Otherwise `Linear` interpolates
/// and `KalmanEm` fits the local-level model by EM (default settings) and
/// returns the smoothed state mean at `t`, extending the daily grid to reach it.
pub fn estimate_at(series: &BandSeries, t: NaiveDate, method: GapfillMethod) -> Result<Estimate> {
    if let Some(value) = series.value_on(t) {
        return Ok(Estimate {
            value,
            source: ValueSource::Observed,
            variance: None,
        });
    }
    match method {
        GapfillMethod::Linear => Ok(Estimate {
            value: linear_interpolate(series, t)?,
            source: ValueSource::LinearInterpolated,
            variance: None,
        }),
        GapfillMethod::KalmanEm => {
            let fit = em_fit(
                series,
                StateSpaceParams::initial_for(series),
                DEFAULT_MAX_ITER,
                DEFAULT_TOL,
            )?;
            let start = t.min(series.first_date());
            let end = t.max(series.last_date());
            let smoothed = kalman_smooth_over(series, &fit.params, start, end)?;
            let i = (t - start).num_days() as usize;
            Ok(Estimate {
                value: smoothed.means[i],
                source: ValueSource::KalmanSmoothed,
                variance: Some(smoothed.variances[i]),
            })
        }
    }
}

/// One day of a filled series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub date: NaiveDate,
    pub mean: f64,
    /// Smoothed state variance; `None` for linear filling.
    pub variance: Option<f64>,
}

/// Daily estimates over `[from, to]`, which is widened to cover the series.
/// `KalmanEm` fits once and reports the smoothed state on every day, observed
/// days included.
pub fn fill_grid(series: &BandSeries, from: NaiveDate, to: NaiveDate, method: GapfillMethod) -> Result<Vec<GridPoint>> {
    let start = from.min(series.first_date());
    let end = to.max(series.last_date());
    match method {
        GapfillMethod::Linear => start
            .iter_days()
            .take_while(|d| *d <= end)
            .map(|date| Ok(GridPoint { date, mean: linear_interpolate(series, date)?, variance: None }))
            .collect(),
        GapfillMethod::KalmanEm => {
            let fit = em_fit(series, StateSpaceParams::initial_for(series), DEFAULT_MAX_ITER, DEFAULT_TOL)?;
            let s = kalman_smooth_over(series, &fit.params, start, end)?;
            Ok(s.grid_dates
                .iter()
                .zip(s.means.iter().zip(&s.variances))
                .map(|(&date, (&mean, &v))| GridPoint { date, mean, variance: Some(v) })
                .collect())
        }
    }
}
