//! Causal reversible instance normalization.
//!
//! Each step is normalized with the running mean and running standard
//! deviation of the prefix ending at that step, so no statistic ever sees
//! the future. Forecasts anchored at step `t` are mapped back with the
//! statistics of step `t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scan::cumulative_sum;

/// Floor applied to the running standard deviation before dividing.
pub const NORM_EPS: f64 = 1e-5;

/// How the running variance pairs each observation with a mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMode {
    /// `σ²_t = cumsum((μ_i − x_i)²)_t / t`: every observation is paired
    /// with the running mean of its own prefix. Single pass.
    #[default]
    ElementwiseCumsum,
    /// `σ²_t` is the population variance of `x_1..x_t`.
    ExactPrefixVariance,
}

/// Running statistics, one entry per step. `sigma` is already clamped to
/// at least [`NORM_EPS`]; `variance` is the unclamped running variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub variance: Vec<f64>,
}

impl CausalStats {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Statistics at 1-based step `t`.
    pub fn at(&self, t: usize) -> Result<(f64, f64)> {
        if t == 0 || t > self.len() {
            return Err(Error::Index { index: t, len: self.len() });
        }
        Ok((self.mu[t - 1], self.sigma[t - 1]))
    }
}

/// Normalizes a fully observed series. Returns the normalized series and
/// the per-step statistics.
pub fn causal_normalize(x: &[f64], mode: VarianceMode) -> Result<(Vec<f64>, CausalStats)> {
    causal_normalize_masked(x, None, mode)
}

/// Normalizes a series in which `missing[t] == true` marks placeholder
/// steps. Missing steps do not update the running statistics (they carry
/// the statistics of the last observed step) and normalize to 0.
pub fn causal_normalize_masked(
    x: &[f64],
    missing: Option<&[bool]>,
    mode: VarianceMode,
) -> Result<(Vec<f64>, CausalStats)> {
    if x.is_empty() {
        return Err(Error::Validation("cannot normalize an empty series".into()));
    }
    if let Some(m) = missing {
        if m.len() != x.len() {
            return Err(crate::error::dim(format!(
                "mask has {} entries for a series of {}",
                m.len(),
                x.len()
            )));
        }
    }
    let observed = |t: usize| missing.is_none_or(|m| !m[t]);
    if let Some(t) = (0..x.len()).find(|&t| observed(t) && !x[t].is_finite()) {
        return Err(Error::Validation(format!("non-finite value {} at step {}", x[t], t + 1)));
    }

    let l = x.len();
    let obs: Vec<f64> = (0..l).map(|t| if observed(t) { 1.0 } else { 0.0 }).collect();
    let vals: Vec<f64> = (0..l).map(|t| if observed(t) { x[t] } else { 0.0 }).collect();
    let counts = cumulative_sum(&obs);
    let sums = cumulative_sum(&vals);

    let mut mu = vec![0.0; l];
    let mut last_mu = 0.0;
    for t in 0..l {
        if observed(t) {
            last_mu = sums[t] / counts[t];
        }
        mu[t] = last_mu;
    }

    let variance = match mode {
        VarianceMode::ElementwiseCumsum => {
            let sq: Vec<f64> = (0..l)
                .map(|t| if observed(t) { (mu[t] - x[t]).powi(2) } else { 0.0 })
                .collect();
            let sq_sums = cumulative_sum(&sq);
            let mut var = vec![0.0; l];
            let mut last = 0.0;
            for t in 0..l {
                if observed(t) {
                    last = sq_sums[t] / counts[t];
                }
                var[t] = last;
            }
            var
        }
        VarianceMode::ExactPrefixVariance => {
            // Welford
            let (mut n, mut mean, mut m2) = (0.0f64, 0.0f64, 0.0f64);
            let mut var = vec![0.0; l];
            for t in 0..l {
                if observed(t) {
                    n += 1.0;
                    let d = x[t] - mean;
                    mean += d / n;
                    m2 += d * (x[t] - mean);
                }
                var[t] = if n > 0.0 { (m2 / n).max(0.0) } else { 0.0 };
            }
            var
        }
    };

    let sigma: Vec<f64> = variance.iter().map(|v| v.sqrt().max(NORM_EPS)).collect();
    let x_norm = (0..l)
        .map(|t| if observed(t) { (x[t] - mu[t]) / sigma[t] } else { 0.0 })
        .collect();
    Ok((x_norm, CausalStats { mu, sigma, variance }))
}

/// Maps a normalized `T × K` forecast (row-major) back to data units with
/// the statistics at 1-based step `t`.
pub fn denormalize_forecast(y_norm: &[f64], stats: &CausalStats, t: usize) -> Result<Vec<f64>> {
    let (mu, sigma) = stats.at(t)?;
    Ok(y_norm.iter().map(|v| v * sigma + mu).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_series_normalizes_to_zero() {
        let x = vec![3.7; 50];
        for mode in [VarianceMode::ElementwiseCumsum, VarianceMode::ExactPrefixVariance] {
            let (xn, stats) = causal_normalize(&x, mode).unwrap();
            assert!(xn.iter().all(|v| v.abs() < 1e-9));
            assert!(stats.sigma.iter().all(|&s| s >= NORM_EPS));
        }
    }

    #[test]
    fn two_point_elementwise() {
        let (xn, stats) = causal_normalize(&[1.0, 3.0], VarianceMode::ElementwiseCumsum).unwrap();
        assert_eq!(stats.mu, vec![1.0, 2.0]);
        assert_eq!(stats.variance, vec![0.0, 0.5]);
        assert_eq!(xn[0], 0.0);
        assert!((xn[1] - std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn two_point_exact_variance() {
        let (xn, stats) =
            causal_normalize(&[1.0, 3.0], VarianceMode::ExactPrefixVariance).unwrap();
        assert_eq!(stats.variance[1], 1.0);
        assert!((xn[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn modes_coincide_for_single_step() {
        let a = causal_normalize(&[4.2], VarianceMode::ElementwiseCumsum).unwrap();
        let b = causal_normalize(&[4.2], VarianceMode::ExactPrefixVariance).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.mu[0], 4.2);
        assert_eq!(a.0[0], 0.0);
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(causal_normalize(&[1.0, f64::NAN], VarianceMode::default()).is_err());
        assert!(causal_normalize(&[], VarianceMode::default()).is_err());
    }

    #[test]
    fn denormalize_examples() {
        let stats = CausalStats {
            mu: vec![1.0, 2.0],
            sigma: vec![NORM_EPS, 0.5f64.sqrt()],
            variance: vec![0.0, 0.5],
        };
        let out = denormalize_forecast(&[1.0], &stats, 2).unwrap();
        assert!((out[0] - 2.707_106_781_186_547_5).abs() < 1e-12);
        let zeros = denormalize_forecast(&[0.0; 6], &stats, 2).unwrap();
        assert!(zeros.iter().all(|&v| v == 2.0));
        assert!(denormalize_forecast(&[0.0], &stats, 0).is_err());
        assert!(denormalize_forecast(&[0.0], &stats, 3).is_err());
    }

    #[test]
    fn masked_steps_freeze_statistics() {
        let x = [1.0, 2.0, 4.0, 0.0, 0.0, 7.0];
        let missing = [false, false, false, true, true, false];
        let (xn, stats) =
            causal_normalize_masked(&x, Some(&missing), VarianceMode::ElementwiseCumsum).unwrap();
        assert_eq!(stats.mu[3], stats.mu[2]);
        assert_eq!(stats.sigma[4], stats.sigma[2]);
        assert_eq!(xn[3], 0.0);
        let (_, unmasked) = causal_normalize(&[1.0, 2.0, 4.0, 7.0], VarianceMode::default()).unwrap();
        assert!((stats.mu[5] - unmasked.mu[3]).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn prefix_mean_telescopes(x in prop::collection::vec(-100.0f64..100.0, 1..60)) {
            let (_, stats) = causal_normalize(&x, VarianceMode::default()).unwrap();
            for t in 0..x.len() {
                let resid: f64 = x[..=t].iter().map(|v| v - stats.mu[t]).sum::<f64>() / (t + 1) as f64;
                prop_assert!(resid.abs() < 1e-12 * 100.0);
            }
        }

        #[test]
        fn round_trip_recovers_input(x in prop::collection::vec(-50.0f64..50.0, 1..60)) {
            for mode in [VarianceMode::ElementwiseCumsum, VarianceMode::ExactPrefixVariance] {
                let (xn, stats) = causal_normalize(&x, mode).unwrap();
                for t in 0..x.len() {
                    if stats.variance[t].sqrt() > NORM_EPS {
                        let back = denormalize_forecast(&[xn[t]], &stats, t + 1).unwrap()[0];
                        prop_assert!((back - x[t]).abs() < 1e-12 * x[t].abs().max(1.0) * 10.0);
                    }
                }
            }
        }

        #[test]
        fn suffix_mutation_leaves_prefix_untouched(
            x in prop::collection::vec(-10.0f64..10.0, 2..40),
            cut in 1usize..39,
            noise in prop::collection::vec(-10.0f64..10.0, 40),
        ) {
            let cut = cut.min(x.len() - 1);
            let mut y = x.clone();
            for (t, v) in y.iter_mut().enumerate().skip(cut) {
                *v = noise[t];
            }
            for mode in [VarianceMode::ElementwiseCumsum, VarianceMode::ExactPrefixVariance] {
                let (xa, sa) = causal_normalize(&x, mode).unwrap();
                let (xb, sb) = causal_normalize(&y, mode).unwrap();
                prop_assert_eq!(&xa[..cut], &xb[..cut]);
                prop_assert_eq!(&sa.mu[..cut], &sb.mu[..cut]);
                prop_assert_eq!(&sa.sigma[..cut], &sb.sigma[..cut]);
            }
        }
    }
}
