//! Small statistics helpers shared by the estimators.

use std::ops::Range;

use statrs::distribution::{ContinuousCDF, Normal};

/// Two-sided critical value of the standard normal at the 1% level.
pub const Z_CRIT_1PCT: f64 = 2.575_829_303_548_901;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean with the naive i.i.d. standard error.
pub fn mean_se(values: &[f64]) -> MeanSe {
    let n = values.len();
    let m = mean(values);
    if n < 2 {
        return MeanSe { mean: m, se: f64::NAN };
    }
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    MeanSe { mean: m, se: (ss / (n - 1) as f64 / n as f64).sqrt() }
}

/// Splits `0..n` into `batches` contiguous, nearly equal ranges.
pub fn batch_ranges(n: usize, batches: usize) -> Vec<Range<usize>> {
    let b = batches.clamp(1, n.max(1));
    (0..b).map(|i| (i * n / b)..((i + 1) * n / b)).collect()
}

/// Batch-means estimate of the mean of a correlated sequence.
pub fn batch_mean_se(values: &[f64], batches: &[Range<usize>]) -> MeanSe {
    let m = mean(values);
    let means: Vec<f64> = batches.iter().filter(|r| !r.is_empty()).map(|r| mean(&values[r.clone()])).collect();
    if means.len() < 2 {
        return MeanSe { mean: m, se: f64::NAN };
    }
    let MeanSe { se, .. } = mean_se(&means);
    MeanSe { mean: m, se }
}

/// Sample variance (about the overall mean) with a batch-means standard error.
pub fn batch_var_se(values: &[f64], batches: &[Range<usize>]) -> MeanSe {
    let m = mean(values);
    let sq: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    let n = values.len() as f64;
    let r = batch_mean_se(&sq, batches);
    MeanSe { mean: r.mean * n / (n - 1.0).max(1.0), se: r.se }
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").cdf(x)
}

/// z statistic of the difference of two independent estimates.
pub fn two_sample_z(a: MeanSe, b: MeanSe) -> f64 {
    let s = (a.se * a.se + b.se * b.se).sqrt();
    if s == 0.0 {
        if a.mean == b.mean {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (a.mean - b.mean) / s
    }
}

/// `ln(Σ exp(v))` without overflow.
pub fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
