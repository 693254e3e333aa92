//! Order-insensitive reductions.

const BLOCK: usize = 32;

/// Pairwise (cascade) summation. The result depends only on the slice order,
/// never on how callers split the work, and error grows as `O(log n)`.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(values) / values.len() as f64
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let m = mean(values);
    let sq: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    (pairwise_sum(&sq) / values.len() as f64).sqrt()
}

/// Population variance of small integer values.
pub fn variance_u8(values: &[u8]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let sum: u64 = values.iter().map(|&v| v as u64).sum();
    let sq: u64 = values.iter().map(|&v| (v as u64) * (v as u64)).sum();
    let m = sum as f64 / n;
    (sq as f64 / n - m * m).max(0.0)
}
