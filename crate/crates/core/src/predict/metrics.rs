use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("{y} targets but {yhat} predictions")]
    LengthMismatch { y: usize, yhat: usize },
    #[error("metrics need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("non-finite value in targets or predictions")]
    NonFinite,
    #[error("targets have zero variance; r2 and pearson are undefined")]
    ZeroVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
    pub pearson: f64,
    pub n_test: usize,
}

/// RMSE, MAE, R² and Pearson correlation of `yhat` against `y`.
///
/// A constant `yhat` has no defined correlation; its `pearson` is reported
/// as 0.
pub fn compute_metrics(y: &[f64], yhat: &[f64]) -> Result<EvalMetrics, MetricsError> {
    if y.len() != yhat.len() {
        return Err(MetricsError::LengthMismatch { y: y.len(), yhat: yhat.len() });
    }
    let n = y.len();
    if n < 2 {
        return Err(MetricsError::TooFewPoints(n));
    }
    if y.iter().chain(yhat).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let nf = n as f64;
    let my = y.iter().sum::<f64>() / nf;
    let mp = yhat.iter().sum::<f64>() / nf;
    let (mut sse, mut sae, mut syy, mut spp, mut syp) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&a, &b) in y.iter().zip(yhat) {
        let e = a - b;
        sse += e * e;
        sae += e.abs();
        syy += (a - my) * (a - my);
        spp += (b - mp) * (b - mp);
        syp += (a - my) * (b - mp);
    }
    if syy == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    let pearson = if spp == 0.0 { 0.0 } else { (syp / (syy.sqrt() * spp.sqrt())).clamp(-1.0, 1.0) };
    let rmse = (sse / nf).sqrt();
    Ok(EvalMetrics {
        rmse,
        // equal in exact arithmetic when all errors match; keep the bound under rounding
        mae: (sae / nf).min(rmse),
        r2: 1.0 - sse / syy,
        pearson,
        n_test: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    #[test]
    fn perfect_prediction() {
        let y = [1.0, 2.5, 0.3, 4.0];
        let m = compute_metrics(&y, &y).unwrap();
        assert_eq!((m.rmse, m.mae, m.n_test), (0.0, 0.0, 4));
        assert!((m.r2 - 1.0).abs() < 1e-12 && (m.pearson - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_prediction_has_zero_r2() {
        let y = [1.0, 2.0, 6.0];
        let m = compute_metrics(&y, &[3.0; 3]).unwrap();
        assert!(m.r2.abs() < 1e-15);
        assert_eq!(m.pearson, 0.0);
    }

    #[test]
    fn errors() {
        assert_eq!(compute_metrics(&[1.0], &[1.0, 2.0]), Err(MetricsError::LengthMismatch { y: 1, yhat: 2 }));
        assert_eq!(compute_metrics(&[1.0], &[1.0]), Err(MetricsError::TooFewPoints(1)));
        assert_eq!(compute_metrics(&[2.0, 2.0], &[1.0, 3.0]), Err(MetricsError::ZeroVariance));
        assert_eq!(compute_metrics(&[f64::NAN, 2.0], &[1.0, 3.0]), Err(MetricsError::NonFinite));
    }

    /// Textbook two-pass formulas, written independently of the code above.
    fn oracle(y: &[f64], p: &[f64]) -> (f64, f64, f64, f64) {
        let n = y.len() as f64;
        let rmse = (y.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt();
        let mae = y.iter().zip(p).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        let ybar = y.iter().sum::<f64>() / n;
        let pbar = p.iter().sum::<f64>() / n;
        let ss_res: f64 = y.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
        let ss_tot: f64 = y.iter().map(|a| (a - ybar).powi(2)).sum();
        let cov: f64 = y.iter().zip(p).map(|(a, b)| (a - ybar) * (b - pbar)).sum::<f64>() / n;
        let sy = (y.iter().map(|a| (a - ybar).powi(2)).sum::<f64>() / n).sqrt();
        let sp = (p.iter().map(|b| (b - pbar).powi(2)).sum::<f64>() / n).sqrt();
        (rmse, mae, 1.0 - ss_res / ss_tot, cov / (sy * sp))
    }

    #[test]
    fn matches_oracle_on_random_pairs() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
        for _ in 0..100 {
            let y: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..3.0)).collect();
            let p: Vec<f64> = y.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
            let m = compute_metrics(&y, &p).unwrap();
            let (rmse, mae, r2, r) = oracle(&y, &p);
            for (a, b) in [(m.rmse, rmse), (m.mae, mae), (m.r2, r2), (m.pearson, r)] {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    proptest! {
        #[test]
        fn mae_never_exceeds_rmse(pairs in proptest::collection::vec((-1e3..1e3f64, -1e3..1e3f64), 2..50)) {
            let (y, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            if let Ok(m) = compute_metrics(&y, &p) {
                prop_assert!(m.mae <= m.rmse);
                prop_assert!(m.r2 <= 1.0);
                prop_assert!((-1.0..=1.0).contains(&m.pearson));
            }
        }
    }
}
