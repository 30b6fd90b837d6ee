//! Evaluation metrics: relative full-scale error, per-channel RMSE, angular
//! RGB error, and rg-chromaticity.

use crate::numerics::{angular_distance, Matrix, NumericsError};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("channel {0} of the reference has no positive maximum")]
    ZeroChannel(usize),
    #[error("angular error is undefined for a zero vector")]
    ZeroVector,
    #[error("chromaticity is undefined when R+G+B is not positive")]
    ZeroSum,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Per-channel and across-channel relative full-scale errors.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorReport {
    /// Mean of the three per-channel relative errors.
    pub re_mean: f64,
    pub re_per_channel: [f64; 3],
    pub rmse_per_channel: [f64; 3],
}

/// Relative full-scale error between an estimate and a reference n x 3
/// matrix: per channel, RMSE divided by the reference channel maximum;
/// averaged across channels. Both arguments are expected on a common scale
/// (max-normalize before calling when comparing reconstructions).
pub fn relative_full_scale_error(s_hat: &Matrix, s: &Matrix) -> Result<ErrorReport, MetricsError> {
    if s_hat.rows() != s.rows() || s_hat.cols() != 3 || s.cols() != 3 {
        return Err(MetricsError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            s_hat.rows(),
            s_hat.cols(),
            s.rows(),
            s.cols()
        )));
    }
    let n = s.rows();
    let mut re = [0.0; 3];
    let mut rmse = [0.0; 3];
    for k in 0..3 {
        let mut sq = 0.0;
        let mut maxv = f64::NEG_INFINITY;
        for i in 0..n {
            let d = s_hat[(i, k)] - s[(i, k)];
            sq += d * d;
            maxv = maxv.max(s[(i, k)]);
        }
        if maxv <= 0.0 {
            return Err(MetricsError::ZeroChannel(k));
        }
        rmse[k] = (sq / n as f64).sqrt();
        re[k] = rmse[k] / maxv;
    }
    Ok(ErrorReport {
        re_mean: (re[0] + re[1] + re[2]) / 3.0,
        re_per_channel: re,
        rmse_per_channel: rmse,
    })
}

/// Angle between two RGB triplets (the 3-vector specialization of the
/// matrix angular distance).
pub fn angular_rgb_error(actual: [f64; 3], predicted: [f64; 3]) -> Result<f64, MetricsError> {
    let u = Matrix::new(1, 3, actual.to_vec()).map_err(|_| MetricsError::ZeroVector)?;
    let v = Matrix::new(1, 3, predicted.to_vec()).map_err(|_| MetricsError::ZeroVector)?;
    angular_distance(&u, &v).map_err(|e| match e {
        NumericsError::ZeroMatrix => MetricsError::ZeroVector,
        other => MetricsError::ShapeMismatch(other.to_string()),
    })
}

/// rg-chromaticity: (R/(R+G+B), B/(R+G+B)).
pub fn chromaticity(rgb: [f64; 3]) -> Result<(f64, f64), MetricsError> {
    let sum = rgb[0] + rgb[1] + rgb[2];
    if sum <= 0.0 {
        return Err(MetricsError::ZeroSum);
    }
    Ok((rgb[0] / sum, rgb[2] / sum))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn re_zero_for_identical() {
        let s = Matrix::from_fn(31, 3, |i, k| (i + k) as f64 * 0.01 + 0.1);
        let rep = relative_full_scale_error(&s, &s).unwrap();
        assert_eq!(rep.re_mean, 0.0);
        assert_eq!(rep.re_per_channel, [0.0; 3]);
    }

    #[test]
    fn re_constant_offset() {
        let s = Matrix::from_fn(10, 3, |i, k| (i as f64 * 0.1) * (k + 1) as f64);
        let c = [0.05, 0.02, 0.07];
        let s_hat = Matrix::from_fn(10, 3, |i, k| s[(i, k)] + c[k]);
        let rep = relative_full_scale_error(&s_hat, &s).unwrap();
        for k in 0..3 {
            let maxv = (0..10).map(|i| s[(i, k)]).fold(f64::NEG_INFINITY, f64::max);
            assert!((rep.re_per_channel[k] - c[k] / maxv).abs() < 1e-12);
        }
        let mean = (rep.re_per_channel[0] + rep.re_per_channel[1] + rep.re_per_channel[2]) / 3.0;
        assert_eq!(rep.re_mean, mean);
    }

    #[test]
    fn re_matches_two_loop_oracle() {
        let mut rng = SplitMix64::new(31);
        let s = Matrix::from_fn(31, 3, |_, _| rng.uniform(0.05, 1.0));
        let s_hat = Matrix::from_fn(31, 3, |_, _| rng.uniform(0.05, 1.0));
        let rep = relative_full_scale_error(&s_hat, &s).unwrap();
        // independent computation
        let mut acc = 0.0;
        for k in 0..3 {
            let mut sq = 0.0;
            let mut m = 0.0f64;
            for i in 0..31 {
                sq += (s_hat[(i, k)] - s[(i, k)]).powi(2);
                m = m.max(s[(i, k)]);
            }
            acc += (sq / 31.0).sqrt() / m;
        }
        assert!((rep.re_mean - acc / 3.0).abs() < 1e-12);
    }

    #[test]
    fn re_joint_scale_invariance() {
        let mut rng = SplitMix64::new(77);
        let s = Matrix::from_fn(11, 3, |_, _| rng.uniform(0.1, 1.0));
        let s_hat = Matrix::from_fn(11, 3, |_, _| rng.uniform(0.1, 1.0));
        let a = relative_full_scale_error(&s_hat, &s).unwrap();
        let b = relative_full_scale_error(&s_hat.scaled(3.7), &s.scaled(3.7)).unwrap();
        assert!((a.re_mean - b.re_mean).abs() < 1e-12);
        // not invariant when scaling the estimate alone
        let c = relative_full_scale_error(&s_hat.scaled(3.7), &s).unwrap();
        assert!((a.re_mean - c.re_mean).abs() > 1e-6);
    }

    #[test]
    fn re_zero_channel_errors() {
        let s = Matrix::zeros(5, 3);
        let s_hat = Matrix::from_fn(5, 3, |_, _| 0.1);
        assert!(matches!(
            relative_full_scale_error(&s_hat, &s),
            Err(MetricsError::ZeroChannel(0))
        ));
    }

    #[test]
    fn angular_rgb_cases() {
        assert!(angular_rgb_error([1.0, 1.0, 1.0], [2.0, 2.0, 2.0]).unwrap() < 2e-6);
        let d = angular_rgb_error([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]).unwrap();
        assert!((d - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let d = angular_rgb_error([1.0, 2.0, 3.0], [3.0, 2.0, 1.0]).unwrap();
        assert!((d - (10.0f64 / 14.0).acos()).abs() < 1e-12); // = 0.775193...
        assert!((d - 0.7754).abs() < 1e-3);
        assert!(matches!(
            angular_rgb_error([0.0; 3], [1.0, 0.0, 0.0]),
            Err(MetricsError::ZeroVector)
        ));
    }

    #[test]
    fn chromaticity_cases() {
        assert_eq!(chromaticity([1.0, 1.0, 1.0]).unwrap(), (1.0 / 3.0, 1.0 / 3.0));
        assert_eq!(chromaticity([2.0, 0.0, 0.0]).unwrap(), (1.0, 0.0));
        let (r, b) = chromaticity([0.3, 0.5, 0.2]).unwrap();
        let (r2, b2) = chromaticity([3.0, 5.0, 2.0]).unwrap();
        assert!((r - r2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        assert!(r >= 0.0 && b >= 0.0 && r + b <= 1.0);
        assert!(matches!(chromaticity([0.0; 3]), Err(MetricsError::ZeroSum)));
    }
}
