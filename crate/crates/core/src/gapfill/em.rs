//! Expectation-maximization for the local-level model.

use super::kalman::kalman_smooth;
use super::{BandSeries, GapfillError, Result, StateSpaceParams};
use chrono::Days;

pub const DEFAULT_MAX_ITER: u32 = 50;
pub const DEFAULT_TOL: f64 = 1e-6;
/// Lower bound applied to every fitted variance.
pub const VARIANCE_FLOOR: f64 = 1e-12;

const MIN_OBSERVATIONS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub params: StateSpaceParams,
    /// Log-likelihood under each successive parameter set; the last entry
    /// belongs to `params`.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
}

/// Fits `q`, `r`, `x0` and `p0` by EM.
///
/// Each iteration smooths under the current parameters (E-step) and applies
/// the closed-form maximizers of the expected complete-data log-likelihood
/// (M-step). Stops when the relative log-likelihood gain drops below `tol` or
/// after `max_iter` M-steps.
pub fn em_fit(
    series: &BandSeries,
    init: StateSpaceParams,
    max_iter: u32,
    tol: f64,
) -> Result<EmFit> {
    if series.is_empty() {
        return Err(GapfillError::EmptySeries);
    }
    if series.len() < MIN_OBSERVATIONS {
        return Err(GapfillError::TooFewObservations {
            found: series.len(),
            required: MIN_OBSERVATIONS,
        });
    }
    init.validate()?;

    let mut params = init;
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    loop {
        let sm = kalman_smooth(series, &params)?;
        trace.push(sm.loglik);
        if let [.., prev, last] = trace[..] {
            let gain = (last - prev) / prev.abs().max(f64::MIN_POSITIVE);
            if gain < tol {
                converged = true;
                break;
            }
        }
        if trace.len() > max_iter as usize {
            break;
        }

        let m = &sm.means;
        let p = &sm.variances;
        let c = &sm.lag_one_covariances;
        let transitions = m.len() - 1;
        let mut q_sum = 0.0;
        for t in 1..m.len() {
            let dm = m[t] - m[t - 1];
            q_sum += dm * dm + p[t] + p[t - 1] - 2.0 * c[t];
        }
        let start = series.first_date();
        let mut r_sum = 0.0;
        for &(date, y) in series.observations() {
            let t = (date - start).num_days() as usize;
            debug_assert_eq!(sm.grid_dates[t], start + Days::new(t as u64));
            let e = y - m[t];
            r_sum += e * e + p[t];
        }
        params = StateSpaceParams {
            q: (q_sum / transitions as f64).max(VARIANCE_FLOOR),
            r: (r_sum / series.len() as f64).max(VARIANCE_FLOOR),
            x0: m[0],
            p0: p[0].max(VARIANCE_FLOOR),
        };
    }

    Ok(EmFit {
        params,
        loglik_trace: trace,
        converged,
    })
}
