//! Per-trial metrics and their aggregation.

use num_complex::Complex64;
use thiserror::Error;

use crate::numerics::{fro_norm_sqr, CMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("NMSE is undefined for a zero channel")]
    ZeroChannel,
    #[error("empirical CDF needs at least one sample")]
    Empty,
}

/// `‖Ĥ − H‖²_F / ‖H‖²_F`.
pub fn nmse(h_hat: &CMatrix, h: &CMatrix) -> Result<f64, MetricError> {
    if h_hat.shape() != h.shape() {
        return Err(MetricError::Shape(h_hat.shape(), h.shape()));
    }
    let energy = fro_norm_sqr(h);
    if energy == 0.0 {
        return Err(MetricError::ZeroChannel);
    }
    Ok(fro_norm_sqr(&(h_hat - h)) / energy)
}

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Gray-mapped QPSK bits: the sign of the real part carries the first bit
/// and the sign of the imaginary part the second.
fn qpsk_bits(z: Complex64) -> (bool, bool) {
    (z.re < 0.0, z.im < 0.0)
}

/// Bit error rate of hard QPSK decisions on `x_hat` against `x_true`.
pub fn ber_qpsk(x_hat: &CMatrix, x_true: &CMatrix) -> Result<f64, MetricError> {
    if x_hat.shape() != x_true.shape() {
        return Err(MetricError::Shape(x_hat.shape(), x_true.shape()));
    }
    if x_true.is_empty() {
        return Err(MetricError::Empty);
    }
    let errors: usize = x_hat
        .iter()
        .zip(x_true.iter())
        .map(|(&a, &b)| {
            let (a0, a1) = qpsk_bits(a);
            let (b0, b1) = qpsk_bits(b);
            usize::from(a0 != b0) + usize::from(a1 != b1)
        })
        .sum();
    Ok(errors as f64 / (2 * x_true.len()) as f64)
}

/// Fraction of `errors` at or below each threshold.
pub fn ecdf(errors: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>, MetricError> {
    if errors.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| (t, sorted.partition_point(|&e| e <= t) as f64 / m))
        .collect())
}

/// Entry-wise absolute estimation errors `|ĥ_j − h_j|`.
pub fn abs_errors(h_hat: &CMatrix, h: &CMatrix) -> Vec<f64> {
    h_hat.iter().zip(h.iter()).map(|(a, b)| (a - b).norm()).collect()
}

/// Welford running mean and variance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StreamingStats {
    n: usize,
    mean: f64,
    m2: f64,
}

impl StreamingStats {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Standard error of the mean from the unbiased sample variance; zero
    /// for fewer than two samples.
    pub fn stderr(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        (self.m2 / (self.n - 1) as f64 / self.n as f64).sqrt()
    }
}

/// Two-pass mean and standard error.
pub fn batch_stats(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Mean and standard error in dB of the linear mean, using the first-order
/// delta method for the error.
pub fn db_stats(xs: &[f64]) -> (f64, f64) {
    let (mean, se) = batch_stats(xs);
    (to_db(mean), 10.0 / std::f64::consts::LN_10 * se / mean)
}
