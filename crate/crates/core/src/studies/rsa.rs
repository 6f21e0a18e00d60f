//! Square-and-multiply exponent recovery from taken-branch counts, one
//! counter delta per exponent bit, averaged over many traces.

use num_bigint::BigUint;
use num_traits::One;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::counterleak::{CounterLeak, TraceMetadata, TraceSeries};
use crate::error::{Error, Result};
use crate::harness::{MicroEvent, VictimContext};

pub const BRANCH_EVENT: &str = "BR_INST_RETIRED.NEAR_TAKEN";
/// Taken branches a simulated square step reports.
pub const SQUARE_BRANCHES: u64 = 6;
/// Extra taken branches of the multiply step: the bit-0/1 separation.
pub const MULTIPLY_BRANCHES: u64 = 4;
pub const DEFAULT_TRACES: usize = 10_000;
pub const DEFAULT_KEY_BITS: usize = 2048;
/// Minimum distance between the two cluster means, in pooled within-cluster
/// standard deviations, for the per-bit averages to count as bimodal. A
/// single Gaussian split at its own 2-means threshold scores about 2.65.
pub const MIN_CLUSTER_SEPARATION: f64 = 3.0;
pub const COUNTER_BYTES: usize = 2;

/// Left-to-right binary exponentiation (window size 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SquareMultiplyVictim {
    pub modulus: BigUint,
    pub base: BigUint,
    pub exponent: BigUint,
}

impl SquareMultiplyVictim {
    pub fn new(modulus: BigUint, base: BigUint, exponent: BigUint) -> Result<Self> {
        if modulus <= BigUint::one() {
            return Err(Error::InvalidArgument("modulus must exceed 1".into()));
        }
        Ok(Self {
            modulus,
            base,
            exponent,
        })
    }

    /// Exponent bits, most significant first.
    pub fn exponent_bits(&self) -> Vec<bool> {
        let n = self.exponent.bits();
        (0..n).rev().map(|i| self.exponent.bit(i)).collect()
    }

    pub fn stepper(&self) -> Stepper<'_> {
        Stepper {
            victim: self,
            bits: self.exponent_bits(),
            next: 0,
            acc: BigUint::one() % &self.modulus,
        }
    }

    /// Run to completion in `ctx`.
    pub fn run(&self, ctx: &mut dyn VictimContext) -> BigUint {
        let mut s = self.stepper();
        while s.step(ctx).is_some() {}
        s.result()
    }
}

/// The exponentiation loop, one exponent bit per [`step`](Stepper::step):
/// the hook an attacker synchronizes on.
pub struct Stepper<'v> {
    victim: &'v SquareMultiplyVictim,
    bits: Vec<bool>,
    next: usize,
    acc: BigUint,
}

impl Stepper<'_> {
    /// Process the next bit; `None` once all bits are done.
    pub fn step(&mut self, ctx: &mut dyn VictimContext) -> Option<bool> {
        let bit = *self.bits.get(self.next)?;
        self.next += 1;
        let m = &self.victim.modulus;
        self.acc = (&self.acc * &self.acc) % m;
        ctx.retire(MicroEvent::TakenBranch, SQUARE_BRANCHES);
        if bit {
            self.acc = (&self.acc * &self.victim.base) % m;
            ctx.retire(MicroEvent::TakenBranch, MULTIPLY_BRANCHES);
        }
        Some(bit)
    }

    pub fn remaining(&self) -> usize {
        self.bits.len() - self.next
    }

    pub fn result(&self) -> BigUint {
        self.acc.clone()
    }
}

/// Uniform random exponent of exactly `bits` bits.
pub fn random_exponent(rng: &mut impl Rng, bits: usize) -> BigUint {
    let mut bytes = vec![0u8; bits.div_ceil(8)];
    rng.fill(&mut bytes[..]);
    let mut e = BigUint::from_bytes_be(&bytes);
    let excess = bytes.len() * 8 - bits;
    e >>= excess;
    if bits > 0 {
        e.set_bit(bits as u64 - 1, true);
    }
    e
}

/// One trace through the real pipeline: leak once, then after every victim
/// step leak again and record the delta minus the primitive's self-count.
pub fn collect_trace<B: Backend>(
    leak: &mut CounterLeak<'_, B>,
    victim: &SquareMultiplyVictim,
    repetition: u64,
) -> Result<TraceSeries> {
    let noise = leak.self_noise()?;
    let mut series = TraceSeries::new(
        leak.selector().clone(),
        TraceMetadata::new("square-multiply", repetition),
    );
    let mut stepper = victim.stepper();
    let mut prev = leak.leak()?.value;
    while stepper.remaining() > 0 {
        stepper.step(leak.backend().victim());
        let value = leak.leak()?.value;
        series.push(crate::counterleak::wrap_delta(prev, value, leak.bytes()) - noise);
        prev = value;
    }
    Ok(series)
}

/// Synthetic per-bit deltas: `offset + separation * bit` plus rounded
/// Gaussian noise of standard deviation `noise * separation`.
pub struct SyntheticTraces {
    bits: Vec<bool>,
    offset: f64,
    separation: f64,
    noise: Option<Normal<f64>>,
    rng: ChaCha8Rng,
}

impl SyntheticTraces {
    pub fn new(bits: Vec<bool>, noise: f64, seed: u64) -> Result<Self> {
        let separation = MULTIPLY_BRANCHES as f64;
        let noise = if noise > 0.0 {
            Some(
                Normal::new(0.0, noise * separation)
                    .map_err(|e| Error::InvalidArgument(format!("noise: {e}")))?,
            )
        } else if noise == 0.0 {
            None
        } else {
            return Err(Error::InvalidArgument("noise must be non-negative".into()));
        };
        Ok(Self {
            bits,
            offset: SQUARE_BRANCHES as f64,
            separation,
            noise,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn next_trace(&mut self) -> Vec<i64> {
        self.bits
            .iter()
            .map(|&b| {
                let clean = self.offset + if b { self.separation } else { 0.0 };
                let noise = self.noise.map_or(0.0, |n| n.sample(&mut self.rng));
                (clean + noise).round() as i64
            })
            .collect()
    }
}

/// Running per-bit sums over traces.
#[derive(Debug, Clone, PartialEq)]
pub struct BitAverager {
    sums: Vec<f64>,
    traces: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitRecovery {
    pub bits: Vec<bool>,
    pub threshold: f64,
    pub low_mean: f64,
    pub high_mean: f64,
    /// Cluster mean distance over pooled within-cluster standard deviation.
    pub separation: f64,
    pub traces: usize,
}

impl BitAverager {
    pub fn new(bits: usize) -> Self {
        Self {
            sums: vec![0.0; bits],
            traces: 0,
        }
    }

    pub fn add(&mut self, deltas: &[i64]) -> Result<()> {
        if deltas.len() != self.sums.len() {
            return Err(Error::InvalidArgument(format!(
                "trace has {} deltas, expected {}",
                deltas.len(),
                self.sums.len()
            )));
        }
        for (s, &d) in self.sums.iter_mut().zip(deltas) {
            *s += d as f64;
        }
        self.traces += 1;
        Ok(())
    }

    pub fn traces(&self) -> usize {
        self.traces
    }

    pub fn averages(&self) -> Vec<f64> {
        let n = self.traces.max(1) as f64;
        self.sums.iter().map(|s| s / n).collect()
    }

    /// Split the per-bit averages into two clusters and threshold at the
    /// midpoint of their means.
    pub fn recover(&self) -> Result<BitRecovery> {
        if self.traces == 0 {
            return Err(Error::DegenerateDistribution("no traces".into()));
        }
        let avgs = self.averages();
        let (threshold, low, high) = two_means(&avgs)?;
        let within = pooled_sd(&avgs, threshold, low, high);
        let separation = if within == 0.0 {
            f64::INFINITY
        } else {
            (high - low) / within
        };
        if separation < MIN_CLUSTER_SEPARATION {
            return Err(Error::DegenerateDistribution(format!(
                "cluster separation {separation:.2} below {MIN_CLUSTER_SEPARATION}"
            )));
        }
        Ok(BitRecovery {
            bits: avgs.iter().map(|&a| a > threshold).collect(),
            threshold,
            low_mean: low,
            high_mean: high,
            separation,
            traces: self.traces,
        })
    }
}

/// 1-D 2-means by Lloyd iterations from the range midpoint. Returns the
/// final threshold and the two cluster means.
fn two_means(values: &[f64]) -> Result<(f64, f64, f64)> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.partial_cmp(&min) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::DegenerateDistribution(
            "all per-bit averages are equal".into(),
        ));
    }
    let mut threshold = (min + max) / 2.0;
    let mut means = (min, max);
    for _ in 0..100 {
        let (mut lo, mut nlo, mut hi, mut nhi) = (0.0, 0usize, 0.0, 0usize);
        for &v in values {
            if v > threshold {
                hi += v;
                nhi += 1;
            } else {
                lo += v;
                nlo += 1;
            }
        }
        if nlo == 0 || nhi == 0 {
            return Err(Error::DegenerateDistribution("one cluster is empty".into()));
        }
        means = (lo / nlo as f64, hi / nhi as f64);
        let next = (means.0 + means.1) / 2.0;
        if next == threshold {
            break;
        }
        threshold = next;
    }
    Ok((threshold, means.0, means.1))
}

fn pooled_sd(values: &[f64], threshold: f64, low: f64, high: f64) -> f64 {
    let ss: f64 = values
        .iter()
        .map(|&v| {
            if v > threshold {
                (v - high).powi(2)
            } else {
                (v - low).powi(2)
            }
        })
        .sum();
    (ss / values.len().saturating_sub(2).max(1) as f64).sqrt()
}

pub fn bit_accuracy(recovered: &[bool], truth: &[bool]) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let right = recovered.iter().zip(truth).filter(|(a, b)| a == b).count();
    right as f64 / truth.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub traces: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsaResult {
    pub key_bits: usize,
    pub traces: usize,
    pub recovered_hex: String,
    pub accuracy: f64,
    pub checkpoints: Vec<Checkpoint>,
}

fn bits_to_hex(bits: &[bool]) -> String {
    let mut value = BigUint::default();
    for &b in bits {
        value <<= 1;
        if b {
            value += 1u32;
        }
    }
    value.to_str_radix(16)
}

fn finish(
    averager: &BitAverager,
    truth: &[bool],
    checkpoints: Vec<Checkpoint>,
) -> Result<RsaResult> {
    let recovery = averager.recover()?;
    Ok(RsaResult {
        key_bits: truth.len(),
        traces: averager.traces(),
        recovered_hex: bits_to_hex(&recovery.bits),
        accuracy: bit_accuracy(&recovery.bits, truth),
        checkpoints,
    })
}

fn checkpoint(averager: &BitAverager, truth: &[bool], at: &[usize], out: &mut Vec<Checkpoint>) {
    if at.contains(&averager.traces()) {
        // A degenerate split counts as chance level.
        let accuracy = averager
            .recover()
            .map(|r| bit_accuracy(&r.bits, truth))
            .unwrap_or(0.5);
        out.push(Checkpoint {
            traces: averager.traces(),
            accuracy,
        });
    }
}

/// Recover `exponent` from `traces` synthetic traces with per-bit noise of
/// `noise` times the bit-0/1 separation, recording accuracy at `at`.
pub fn recover_synthetic(
    exponent: &BigUint,
    traces: usize,
    noise: f64,
    seed: u64,
    at: &[usize],
) -> Result<RsaResult> {
    let victim = SquareMultiplyVictim::new(BigUint::from(3u32), BigUint::one(), exponent.clone())?;
    let truth = victim.exponent_bits();
    let mut source = SyntheticTraces::new(truth.clone(), noise, seed)?;
    let mut averager = BitAverager::new(truth.len());
    let mut checkpoints = Vec::new();
    for _ in 0..traces {
        averager.add(&source.next_trace())?;
        checkpoint(&averager, &truth, at, &mut checkpoints);
    }
    finish(&averager, &truth, checkpoints)
}

/// Recover the victim's exponent through the counter-leak pipeline.
pub fn recover<B: Backend>(
    leak: &mut CounterLeak<'_, B>,
    victim: &SquareMultiplyVictim,
    traces: usize,
    at: &[usize],
) -> Result<RsaResult> {
    let truth = victim.exponent_bits();
    let mut averager = BitAverager::new(truth.len());
    let mut checkpoints = Vec::new();
    for t in 0..traces {
        let series = collect_trace(leak, victim, t as u64)?;
        averager.add(&series.deltas())?;
        checkpoint(&averager, &truth, at, &mut checkpoints);
    }
    finish(&averager, &truth, checkpoints)
}
