//! Sample statistics used by the verification checks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standard error of the sample mean.
pub fn stderr_of_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Standard error of the sample variance, `√((m₄ − s⁴(n−3)/(n−1)) / n)`.
pub fn stderr_of_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 4 {
        return f64::NAN;
    }
    let m = mean(xs);
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    let s2 = variance(xs);
    ((m4 - s2 * s2 * (n - 3.0) / (n - 1.0)) / n).max(0.0).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Linear-interpolation quantile, `p ∈ [0, 1]`.
pub fn quantile(xs: &[f64], p: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn mean_vector(samples: &[DVector<f64>]) -> DVector<f64> {
    let dim = samples.first().map_or(0, |s| s.len());
    let sum = samples.iter().fold(DVector::zeros(dim), |acc, s| acc + s);
    sum / samples.len().max(1) as f64
}

/// Unbiased sample covariance of vector samples.
pub fn covariance(samples: &[DVector<f64>]) -> DMatrix<f64> {
    let dim = samples.first().map_or(0, |s| s.len());
    if samples.len() < 2 {
        return DMatrix::zeros(dim, dim);
    }
    let m = mean_vector(samples);
    let mut c = DMatrix::zeros(dim, dim);
    for s in samples {
        let dev = s - &m;
        c.ger(1.0, &dev, &dev, 1.0);
    }
    c / (samples.len() - 1) as f64
}

pub const BOOTSTRAP_RESAMPLES: usize = 200;

/// Entrywise bootstrap standard error of the sample covariance.
pub fn bootstrap_covariance_stderr(samples: &[DVector<f64>], resamples: usize, seed: u64) -> DMatrix<f64> {
    let dim = samples.first().map_or(0, |s| s.len());
    let n = samples.len();
    if n < 2 || resamples < 2 {
        return DMatrix::zeros(dim, dim);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = DMatrix::zeros(dim, dim);
    let mut sum_sq = DMatrix::zeros(dim, dim);
    let mut draw = Vec::with_capacity(n);
    for _ in 0..resamples {
        draw.clear();
        draw.extend((0..n).map(|_| samples[rng.random_range(0..n)].clone()));
        let c = covariance(&draw);
        sum_sq += c.component_mul(&c);
        sum += c;
    }
    let r = resamples as f64;
    let m = &sum / r;
    ((sum_sq / r - m.component_mul(&m)) * (r / (r - 1.0))).map(|v| v.max(0.0).sqrt())
}

/// Entrywise standard error of the sample mean of vector samples.
pub fn mean_stderr(samples: &[DVector<f64>]) -> DVector<f64> {
    let n = samples.len().max(1) as f64;
    covariance(samples).diagonal().map(|v| (v / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_moments() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&xs), 2.5);
        assert!((variance(&xs) - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(median(&xs), 2.5);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(quantile(&xs, 0.0), 1.0);
        assert_eq!(quantile(&xs, 1.0), 4.0);
        assert!(mean(&[]).is_nan());
    }

    #[test]
    fn covariance_matches_scalar() {
        let s: Vec<_> = [1.0, 4.0, 2.0, 8.0].iter().map(|&x| DVector::from_vec(vec![x, -x])).collect();
        let c = covariance(&s);
        let v = variance(&[1.0, 4.0, 2.0, 8.0]);
        assert!((c[(0, 0)] - v).abs() < 1e-12);
        assert!((c[(0, 1)] + v).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_is_seeded_and_positive() {
        let s: Vec<_> = (0..50).map(|i| DVector::from_vec(vec![(i as f64).sin(), (i as f64).cos()])).collect();
        let a = bootstrap_covariance_stderr(&s, 100, 7);
        assert_eq!(a, bootstrap_covariance_stderr(&s, 100, 7));
        assert!(a.iter().all(|&x| x > 0.0));
    }
}
