//! Small order-statistics helpers shared by the calibrators and analyzers.

use statrs::distribution::{ContinuousCDF, Normal};

/// Scale factor turning a median absolute deviation into a consistent
/// estimate of the standard deviation for normally distributed data.
pub const MAD_TO_SIGMA: f64 = 1.4826;

pub fn median_u64(values: &[u64]) -> Option<u64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let mid = sorted.len() / 2;
    Some(if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        // Lower-biased integer midpoint of the two middle samples.
        sorted[mid - 1] + (sorted[mid] - sorted[mid - 1]) / 2
    })
}

pub fn median_f64(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Some(if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    })
}

pub fn median_i64(values: &[i64]) -> Option<f64> {
    let as_f: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    median_f64(&as_f)
}

/// Median absolute deviation around the median.
pub fn mad(values: &[f64]) -> Option<f64> {
    let center = median_f64(values)?;
    let deviations: Vec<f64> = values.iter().map(|v| (v - center).abs()).collect();
    median_f64(&deviations)
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Unbiased sample variance.
pub fn variance(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values)?;
    Some(values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64)
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let mx = mean(xs)?;
    let my = mean(ys)?;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Two-sided standard-normal critical value at family-wise level `alpha`
/// spread over `tests` comparisons (Bonferroni).
pub fn bonferroni_z(alpha: f64, tests: usize) -> f64 {
    let normal = Normal::standard();
    normal.inverse_cdf(1.0 - alpha / (2.0 * tests.max(1) as f64))
}

/// Summary of a set of cycle measurements.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CycleStats {
    pub count: usize,
    pub min: u64,
    pub median: u64,
    pub mean: f64,
    pub max: u64,
}

impl CycleStats {
    pub fn from_samples(samples: &[u64]) -> Option<Self> {
        let median = median_u64(samples)?;
        Some(Self {
            count: samples.len(),
            min: *samples.iter().min()?,
            median,
            mean: samples.iter().map(|&s| s as f64).sum::<f64>() / samples.len() as f64,
            max: *samples.iter().max()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median_u64(&[3, 1, 2]), Some(2));
        assert_eq!(median_u64(&[40, 300]), Some(170));
        assert_eq!(median_f64(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median_u64(&[]), None);
    }

    #[test]
    fn mad_of_symmetric_set() {
        // deviations from 3: 2,1,0,1,2 -> median 1
        assert_eq!(mad(&[1.0, 2.0, 3.0, 4.0, 5.0]), Some(1.0));
    }

    #[test]
    fn pearson_perfect_and_degenerate() {
        let r = pearson(&[1.0, 2.0, 3.0], &[1000.0, 1150.0, 1300.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), None);
    }

    #[test]
    fn bonferroni_matches_normal_table() {
        // alpha 0.05 over one two-sided test is the familiar 1.96.
        assert!((bonferroni_z(0.05, 1) - 1.959964).abs() < 1e-5);
        assert!(bonferroni_z(0.01, 512) > 4.0);
    }
}
