//! Fitting and exploiting the entropy/performance law `R = -a*exp(H) + b`.
//!
//! Substituting `u = exp(H)` turns the law into a straight line `R = -a*u + b`
//! solved by ordinary least squares in closed form — no iterative solver.
//! Points are sorted internally before accumulation so the fit is bitwise
//! permutation-invariant. The ceiling `b - a` is the predicted performance at
//! zero entropy.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum FitError {
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("rank deficiency: all entropy values identical")]
    RankDeficient,
    #[error("non-finite input at point {0}")]
    NonFinite(usize),
    #[error("sizes must be positive, got {0}")]
    NonPositiveSize(f64),
    #[error("need at least 2 distinct sizes")]
    TooFewSizes,
    #[error("prediction truths length {truths} does not match entropies {preds}")]
    LengthMismatch { preds: usize, truths: usize },
}

/// Coefficients of the fitted law, serialized as `{a, b, rmse, n_points,
/// ceiling}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub a: f64,
    pub b: f64,
    /// RMSE of the fit over its own input points, recomputed from residuals.
    pub rmse: f64,
    pub n_points: usize,
    /// `b - a`: predicted performance when entropy is exhausted (H = 0).
    pub ceiling: f64,
}

/// Least-squares fit of `R = -a*exp(H) + b` over `(H, R)` pairs.
pub fn fit_exponential(points: &[(f64, f64)]) -> Result<FitResult, FitError> {
    if points.len() < 2 {
        return Err(FitError::TooFewPoints(points.len()));
    }
    for (i, (h, r)) in points.iter().enumerate() {
        if !h.is_finite() || !r.is_finite() {
            return Err(FitError::NonFinite(i));
        }
    }
    // Fixed summation order: sort by (H, R) so permutations of the input give
    // bitwise-identical results.
    let mut pts = points.to_vec();
    pts.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));

    let n = pts.len() as f64;
    let us: Vec<f64> = pts.iter().map(|(h, _)| h.exp()).collect();
    let mean_u = us.iter().sum::<f64>() / n;
    let mean_r = pts.iter().map(|(_, r)| r).sum::<f64>() / n;
    let sxx: f64 = us.iter().map(|u| (u - mean_u) * (u - mean_u)).sum();
    if sxx == 0.0 {
        return Err(FitError::RankDeficient);
    }
    let sxy: f64 = us
        .iter()
        .zip(pts.iter())
        .map(|(u, (_, r))| (u - mean_u) * (r - mean_r))
        .sum();
    let slope = sxy / sxx;
    let intercept = mean_r - slope * mean_u;
    let a = -slope;
    let b = intercept;

    let mut sq = 0.0;
    for (u, (_, r)) in us.iter().zip(pts.iter()) {
        let resid = r - (-a * u + b);
        sq += resid * resid;
    }
    Ok(FitResult {
        a,
        b,
        rmse: (sq / n).sqrt(),
        n_points: pts.len(),
        ceiling: b - a,
    })
}

/// `R_hat = -a*exp(H) + b` per entropy value.
pub fn predict_performance(fit: &FitResult, entropies: &[f64]) -> Vec<f64> {
    entropies.iter().map(|h| -fit.a * h.exp() + fit.b).collect()
}

/// Predictions plus RMSE against supplied truths (same units as R).
pub fn predict_with_rmse(
    fit: &FitResult,
    entropies: &[f64],
    truths: &[f64],
) -> Result<(Vec<f64>, f64), FitError> {
    if entropies.len() != truths.len() {
        return Err(FitError::LengthMismatch {
            preds: entropies.len(),
            truths: truths.len(),
        });
    }
    if entropies.is_empty() {
        return Err(FitError::TooFewPoints(0));
    }
    let preds = predict_performance(fit, entropies);
    let sq: f64 = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((preds, (sq / truths.len() as f64).sqrt()))
}

/// Log-linear fit of a coefficient against model size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    pub residuals: Vec<f64>,
}

impl ScalingFit {
    /// Extrapolated coefficient at a new size: `slope * ln(size) + intercept`.
    pub fn extrapolate(&self, size: f64) -> f64 {
        self.slope * size.ln() + self.intercept
    }
}

/// OLS of `coef` against `ln(size)`.
pub fn fit_loglinear_coeffs(sizes: &[f64], coefs: &[f64]) -> Result<ScalingFit, FitError> {
    if sizes.len() != coefs.len() {
        return Err(FitError::LengthMismatch {
            preds: sizes.len(),
            truths: coefs.len(),
        });
    }
    if sizes.len() < 2 {
        return Err(FitError::TooFewSizes);
    }
    for &s in sizes {
        if !(s > 0.0) || !s.is_finite() {
            return Err(FitError::NonPositiveSize(s));
        }
    }
    let xs: Vec<f64> = sizes.iter().map(|s| s.ln()).collect();
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = coefs.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mean_x) * (x - mean_x)).sum();
    if sxx == 0.0 {
        return Err(FitError::TooFewSizes);
    }
    let sxy: f64 = xs
        .iter()
        .zip(coefs)
        .map(|(x, y)| (x - mean_x) * (y - mean_y))
        .sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let residuals = xs
        .iter()
        .zip(coefs)
        .map(|(x, y)| y - (slope * x + intercept))
        .collect();
    Ok(ScalingFit {
        slope,
        intercept,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recovers_exact_coefficients_from_noiseless_points() {
        let (a, b) = (0.2, 0.9);
        let points: Vec<(f64, f64)> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&h: &f64| (h, -a * h.exp() + b))
            .collect();
        let fit = fit_exponential(&points).unwrap();
        assert_abs_diff_eq!(fit.a, a, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.b, b, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.ceiling, 0.7, epsilon = 1e-10);
        assert!(fit.rmse < 1e-12);
    }

    #[test]
    fn two_point_exact_solve() {
        let points = [(0.0, 0.7), (2.0_f64.ln(), 0.5)];
        let fit = fit_exponential(&points).unwrap();
        assert_abs_diff_eq!(fit.a, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.b, 0.9, epsilon = 1e-12);
    }

    #[test]
    fn shifting_rewards_shifts_only_b() {
        let base = [(0.1, 0.6), (0.8, 0.4), (1.5, 0.1)];
        let shifted: Vec<(f64, f64)> = base.iter().map(|(h, r)| (*h, r + 0.25)).collect();
        let f0 = fit_exponential(&base).unwrap();
        let f1 = fit_exponential(&shifted).unwrap();
        assert_abs_diff_eq!(f0.a, f1.a, epsilon = 1e-12);
        assert_abs_diff_eq!(f1.b - f0.b, 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(f1.ceiling - f0.ceiling, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn permutation_invariance_is_bitwise() {
        let points = vec![(0.3, 0.55), (1.2, 0.21), (0.9, 0.33), (0.05, 0.68)];
        let mut perm = points.clone();
        perm.reverse();
        perm.swap(0, 2);
        let f0 = fit_exponential(&points).unwrap();
        let f1 = fit_exponential(&perm).unwrap();
        assert_eq!(f0.a.to_bits(), f1.a.to_bits());
        assert_eq!(f0.b.to_bits(), f1.b.to_bits());
        assert_eq!(f0.rmse.to_bits(), f1.rmse.to_bits());
    }

    #[test]
    fn residuals_orthogonal_to_design() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let points: Vec<(f64, f64)> = (0..40)
            .map(|_| {
                let h: f64 = rng.gen_range(0.0..2.0);
                (h, -0.3 * h.exp() + 1.1 + rng.gen_range(-0.05..0.05))
            })
            .collect();
        let fit = fit_exponential(&points).unwrap();
        let mut dot_u = 0.0;
        let mut dot_1 = 0.0;
        for (h, r) in &points {
            let u = h.exp();
            let resid = r - (-fit.a * u + fit.b);
            dot_u += resid * u;
            dot_1 += resid;
        }
        assert_abs_diff_eq!(dot_u, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(dot_1, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn degenerate_inputs_error() {
        assert!(matches!(
            fit_exponential(&[(0.5, 0.2)]),
            Err(FitError::TooFewPoints(1))
        ));
        assert!(matches!(
            fit_exponential(&[(0.5, 0.2), (0.5, 0.4)]),
            Err(FitError::RankDeficient)
        ));
        assert!(fit_exponential(&[(f64::NAN, 0.2), (0.5, 0.4)]).is_err());
    }

    #[test]
    fn prediction_at_zero_entropy_is_ceiling() {
        let fit = FitResult { a: 0.2, b: 0.9, rmse: 0.0, n_points: 3, ceiling: 0.7 };
        let preds = predict_performance(&fit, &[0.0]);
        assert_abs_diff_eq!(preds[0], fit.ceiling, epsilon = 1e-15);
    }

    #[test]
    fn predicting_training_points_reproduces_fit_rmse() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let points: Vec<(f64, f64)> = (0..25)
            .map(|_| {
                let h: f64 = rng.gen_range(0.0..1.5);
                (h, -0.4 * h.exp() + 1.3 + rng.gen_range(-0.02..0.02))
            })
            .collect();
        let fit = fit_exponential(&points).unwrap();
        let hs: Vec<f64> = points.iter().map(|p| p.0).collect();
        let rs: Vec<f64> = points.iter().map(|p| p.1).collect();
        let (_, rmse) = predict_with_rmse(&fit, &hs, &rs).unwrap();
        assert_abs_diff_eq!(rmse, fit.rmse, epsilon = 1e-12);
    }

    #[test]
    fn early_fit_predicts_heldout_within_noise() {
        // Known generator: H decays exponentially, R follows the law plus
        // Gaussian-ish noise of sigma = 0.01; fitting the first 15% of steps
        // must predict the rest within 2 sigma.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (a, b) = (0.25, 0.85);
        let sigma = 0.01;
        let steps = 200;
        let mut all: Vec<(f64, f64)> = Vec::with_capacity(steps);
        for t in 0..steps {
            let h = 1.8 * (-(t as f64) / 40.0).exp();
            // Sum of 12 uniforms: mean 0, roughly normal, sd ~ 1.
            let noise: f64 = (0..12).map(|_| rng.gen_range(-0.5..0.5)).sum();
            all.push((h, -a * h.exp() + b + sigma * noise));
        }
        let cut = steps * 15 / 100;
        let fit = fit_exponential(&all[..cut]).unwrap();
        let hs: Vec<f64> = all[cut..].iter().map(|p| p.0).collect();
        let rs: Vec<f64> = all[cut..].iter().map(|p| p.1).collect();
        let (_, rmse) = predict_with_rmse(&fit, &hs, &rs).unwrap();
        assert!(rmse <= 2.0 * sigma, "held-out rmse {rmse}");
    }

    #[test]
    fn loglinear_two_point_exact() {
        let fit = fit_loglinear_coeffs(&[1.0, std::f64::consts::E], &[0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(fit.slope, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.intercept, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn loglinear_constant_coefs_zero_slope() {
        let fit = fit_loglinear_coeffs(&[0.5, 1.5, 7.0], &[0.4, 0.4, 0.4]).unwrap();
        assert_abs_diff_eq!(fit.slope, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.intercept, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn loglinear_recovers_known_line() {
        let sizes = [0.5, 3.0, 14.0];
        let coefs: Vec<f64> = sizes.iter().map(|s: &f64| 0.3 * s.ln() + 0.1).collect();
        let fit = fit_loglinear_coeffs(&sizes, &coefs).unwrap();
        assert_abs_diff_eq!(fit.slope, 0.3, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.intercept, 0.1, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.extrapolate(32.0), 0.3 * 32.0_f64.ln() + 0.1, epsilon = 1e-10);
        for r in &fit.residuals {
            assert_abs_diff_eq!(*r, 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn loglinear_rejects_bad_sizes() {
        assert!(fit_loglinear_coeffs(&[0.0, 1.0], &[0.1, 0.2]).is_err());
        assert!(fit_loglinear_coeffs(&[-1.0, 1.0], &[0.1, 0.2]).is_err());
        assert!(fit_loglinear_coeffs(&[2.0, 2.0], &[0.1, 0.2]).is_err());
        assert!(fit_loglinear_coeffs(&[2.0], &[0.1]).is_err());
    }
}
