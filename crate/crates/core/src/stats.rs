//! Small statistical utilities shared by the samplers, convergence
//! diagnostics, and test oracles: log-domain reductions, empirical moments,
//! kernel bandwidth selection, and classic goodness-of-fit statistics.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

/// `ln Σ exp(x_i)` without overflow; −∞ for an empty slice or all-(−∞) input.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Mean of a column-per-sample matrix.
pub fn empirical_mean(samples: &DMatrix<f64>) -> DVector<f64> {
    let n = samples.ncols().max(1);
    let mut mean = DVector::zeros(samples.nrows());
    for c in samples.column_iter() {
        mean += c;
    }
    mean / n as f64
}

/// Unbiased empirical covariance of a column-per-sample matrix. Zero matrix
/// for fewer than two samples.
pub fn empirical_covariance(samples: &DMatrix<f64>) -> DMatrix<f64> {
    let d = samples.nrows();
    let n = samples.ncols();
    if n < 2 {
        return DMatrix::zeros(d, d);
    }
    let mean = empirical_mean(samples);
    let mut cov = DMatrix::zeros(d, d);
    for c in samples.column_iter() {
        let diff = c - &mean;
        cov += &diff * diff.transpose();
    }
    cov / (n - 1) as f64
}

/// Largest eigenvalue of a symmetric matrix (clamped at zero for the tiny
/// negative values roundoff can produce on PSD inputs).
pub fn max_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    if sym.nrows() == 0 {
        return 0.0;
    }
    let eig = nalgebra::SymmetricEigen::new(sym.clone());
    eig.eigenvalues.iter().copied().fold(0.0_f64, f64::max)
}

/// Silverman's rule-of-thumb bandwidth multiplier for a Gaussian kernel in
/// `dim` dimensions with `n` samples; multiplied by a scale (per-axis standard
/// deviation or a whitening factor) to get the kernel bandwidth.
pub fn silverman_factor(dim: usize, n: usize) -> f64 {
    let d = dim as f64;
    let n = n.max(1) as f64;
    (4.0 / (d + 2.0)).powf(1.0 / (d + 4.0)) * n.powf(-1.0 / (d + 4.0))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64, mean: f64, sigma: f64) -> f64 {
    Normal::new(mean, sigma).expect("valid normal").cdf(x)
}

/// Two-sided Kolmogorov–Smirnov statistic of `samples` against a model CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let n = sorted.len() as f64;
    let mut worst = 0.0_f64;
    for (i, x) in sorted.iter().enumerate() {
        let model = cdf(*x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        worst = worst.max((model - lo).abs()).max((hi - model).abs());
    }
    worst
}

/// Asymptotic Kolmogorov–Smirnov critical value at level `alpha`.
pub fn ks_critical_value(alpha: f64, n: usize) -> f64 {
    ((-0.5 * (alpha / 2.0).ln()) / n as f64).sqrt()
}

/// Quantile of the chi-squared distribution with `df` degrees of freedom.
pub fn chi_square_quantile(p: f64, df: f64) -> f64 {
    ChiSquared::new(df).expect("positive dof").inverse_cdf(p)
}
