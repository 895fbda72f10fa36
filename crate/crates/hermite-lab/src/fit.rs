//! Least-squares fitting used by the scale estimators and verification
//! experiments. Everything here is ordinary dense OLS on short vectors.

use serde::{Deserialize, Serialize};

/// Outcome of a one-dimensional linear fit `y ~ intercept + slope * x`,
/// together with the abscissa range it was computed on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub r2: f64,
    pub fit_lo: f64,
    pub fit_hi: f64,
    pub n_points: usize,
}

/// Ordinary least squares with slope standard error and R².
///
/// Panics if fewer than two points are supplied; the standard error is NaN
/// for exactly two points (zero residual degrees of freedom).
pub fn ols(xs: &[f64], ys: &[f64]) -> EstimatorReport {
    assert_eq!(xs.len(), ys.len(), "mismatched fit inputs");
    let n = xs.len();
    assert!(n >= 2, "need at least two points to fit a line");
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    assert!(sxx > 0.0, "degenerate fit: all abscissae equal");
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res = (syy - slope * sxy).max(0.0);
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    let slope_stderr = if n > 2 {
        (ss_res / (nf - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    let (fit_lo, fit_hi) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    EstimatorReport {
        slope,
        intercept,
        slope_stderr,
        r2,
        fit_lo,
        fit_hi,
        n_points: n,
    }
}

/// Least squares for `y ~ coef * x` (no intercept). Returns `(coef, r2)`
/// where R² is computed against the zero function, matching the
/// through-origin model.
pub fn ols_through_origin(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len(), "mismatched fit inputs");
    assert!(!xs.is_empty());
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let syy: f64 = ys.iter().map(|y| y * y).sum();
    assert!(sxx > 0.0, "degenerate fit: zero abscissae");
    let coef = sxy / sxx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - coef * x;
            r * r
        })
        .sum();
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    (coef, r2)
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    assert!(n >= 1.0);
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Sample variance (unbiased) together with the standard error of the
/// variance estimate, from the fourth central moment:
/// `se(s²) ≈ sqrt((m4 - s⁴ (n-3)/(n-1)) / n)`.
pub fn variance_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    assert!(xs.len() >= 4, "variance stderr needs a few samples");
    let mean = xs.iter().sum::<f64>() / n;
    let mut m2 = 0.0;
    let mut m4 = 0.0;
    for &x in xs {
        let d = x - mean;
        m2 += d * d;
        m4 += d * d * d * d;
    }
    m2 /= n;
    m4 /= n;
    let var = m2 * n / (n - 1.0);
    let se = ((m4 - m2 * m2 * (n - 3.0) / (n - 1.0)) / n).max(0.0).sqrt();
    (var, se)
}
