//! Turning per-slot hit tallies into verdicts.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::harness::TimerReliability;
use crate::stats::pearson;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierParams {
    /// Minimum rounds a value has to reproduce in.
    pub confirm_threshold: u64,
    /// Required ratio between a value's hit rate and its rate in a control
    /// run that encodes nothing.
    pub control_factor: f64,
    /// Decode passes retried when more than one slot is hot.
    pub multi_hit_retries: usize,
    /// Minimum Pearson correlation between leaked timestamps and timer ticks.
    pub min_correlation: f64,
    /// Minimum fraction of consecutive leaked timestamps that increase.
    pub min_increasing_fraction: f64,
}

impl Default for ClassifierParams {
    fn default() -> Self {
        Self {
            confirm_threshold: 5,
            control_factor: 10.0,
            multi_hit_retries: 3,
            min_correlation: 0.9,
            min_increasing_fraction: 0.9,
        }
    }
}

impl ClassifierParams {
    /// `count` hits out of `rounds` stand out against `control_count` hits
    /// out of `control_rounds` with nothing encoded. A silent control still
    /// demands what a single control hit would, capped at half the rounds,
    /// so stray hits on a quiet channel do not count as a value.
    pub fn significant(
        &self,
        count: u64,
        rounds: u64,
        control_count: u64,
        control_rounds: u64,
    ) -> bool {
        if count < self.confirm_threshold || rounds == 0 {
            return false;
        }
        let scale = rounds as f64 / control_rounds.max(1) as f64;
        let floor = (self.control_factor * scale).min(rounds as f64 / 2.0);
        let required = (self.control_factor * control_count as f64 * scale).max(floor);
        count as f64 >= required
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakStatus {
    NoLeak,
    Unverified,
    ZeroForward,
    Leaks,
}

impl LeakStatus {
    /// Short form used in leak summaries: `(ZF)` and `(U)` suffixes.
    pub fn annotation(self) -> Option<&'static str> {
        match self {
            LeakStatus::ZeroForward => Some("ZF"),
            LeakStatus::Unverified => Some("U"),
            _ => None,
        }
    }
}

impl fmt::Display for LeakStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LeakStatus::Leaks => "Leaks",
            LeakStatus::ZeroForward => "ZeroForward",
            LeakStatus::Unverified => "Unverified",
            LeakStatus::NoLeak => "NoLeak",
        })
    }
}

/// Decode results for one bit offset (or for the control run).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffsetTally {
    pub bit_offset: u32,
    pub rounds: u64,
    /// Single-hit rounds per slot.
    pub hits: Vec<u64>,
    /// Rounds still multi-hit after all retries.
    pub discarded_rounds: u64,
}

impl OffsetTally {
    pub fn new(bit_offset: u32, slot_count: usize) -> Self {
        Self {
            bit_offset,
            rounds: 0,
            hits: vec![0; slot_count],
            discarded_rounds: 0,
        }
    }

    pub fn single_hit_rounds(&self) -> u64 {
        self.hits.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueCount {
    pub value: u64,
    pub hits: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteEvidence {
    pub bit_offset: u32,
    /// The significant value at this offset, if any.
    pub value: Option<u64>,
    pub hits: u64,
    pub single_hit_rounds: u64,
    pub discarded_rounds: u64,
    pub control_hits: u64,
    /// Most frequent values seen, descending.
    pub observed: Vec<ValueCount>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperandEvidence {
    pub operand: u64,
    pub status: LeakStatus,
    /// Reassembled from every offset when each one produced a value.
    pub value: Option<u64>,
    pub bytes: Vec<ByteEvidence>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestampSample {
    pub ticks: u64,
    pub value: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestampEvidence {
    pub complete_samples: u64,
    pub control_complete: u64,
    pub increasing_fraction: Option<f64>,
    pub correlation: Option<f64>,
    pub timer: TimerReliability,
    pub first_values: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakVerdict {
    pub status: LeakStatus,
    pub rounds: u64,
    pub stride_bytes: usize,
    pub operands: Vec<OperandEvidence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<TimestampEvidence>,
}

impl LeakVerdict {
    /// Hits backing the verdict, used to rank strides.
    pub fn strength(&self) -> u64 {
        let byte_hits: u64 = self
            .operands
            .iter()
            .flat_map(|o| o.bytes.iter())
            .filter(|b| b.value.is_some())
            .map(|b| b.hits)
            .sum();
        byte_hits + self.timestamp.as_ref().map_or(0, |t| t.complete_samples)
    }

    /// First reconstructed nonzero value, if any.
    pub fn leaked_value(&self) -> Option<u64> {
        self.operands
            .iter()
            .filter(|o| o.status == LeakStatus::Leaks)
            .find_map(|o| o.value)
    }
}

fn byte_evidence(
    tally: &OffsetTally,
    control: &OffsetTally,
    params: &ClassifierParams,
) -> ByteEvidence {
    let significant = |slot: usize| {
        params.significant(
            tally.hits[slot],
            tally.rounds,
            control.hits[slot],
            control.rounds,
        )
    };
    let mut ranked: Vec<ValueCount> = tally
        .hits
        .iter()
        .enumerate()
        .filter(|(_, &h)| h > 0)
        .map(|(v, &h)| ValueCount {
            value: v as u64,
            hits: h,
        })
        .collect();
    ranked.sort_by(|a, b| b.hits.cmp(&a.hits).then(a.value.cmp(&b.value)));
    let chosen = ranked
        .iter()
        .find(|vc| significant(vc.value as usize))
        .copied();
    ranked.truncate(3);
    ByteEvidence {
        bit_offset: tally.bit_offset,
        value: chosen.map(|c| c.value),
        hits: chosen.map_or(0, |c| c.hits),
        single_hit_rounds: tally.single_hit_rounds(),
        discarded_rounds: tally.discarded_rounds,
        control_hits: chosen.map_or(0, |c| control.hits[c.value as usize]),
        observed: ranked,
    }
}

/// Verdict for one operand from its per-offset tallies and a control tally.
///
/// A value is significant when it reproduced at least `confirm_threshold`
/// times and at `control_factor` times its control rate. Any significant
/// nonzero value means the register leaks; only zeros means zero forwarding.
pub fn classify_offsets(
    operand: u64,
    tallies: &[OffsetTally],
    control: &OffsetTally,
    params: &ClassifierParams,
) -> OperandEvidence {
    let bytes: Vec<ByteEvidence> = tallies
        .iter()
        .map(|t| byte_evidence(t, control, params))
        .collect();
    let status = if bytes.iter().any(|b| matches!(b.value, Some(v) if v != 0)) {
        LeakStatus::Leaks
    } else if bytes.iter().any(|b| b.value == Some(0)) {
        LeakStatus::ZeroForward
    } else {
        LeakStatus::NoLeak
    };
    let value =
        (status == LeakStatus::Leaks && bytes.iter().all(|b| b.value.is_some())).then(|| {
            bytes
                .iter()
                .fold(0u64, |acc, b| acc | (b.value.unwrap_or(0) << b.bit_offset))
        });
    OperandEvidence {
        operand,
        status,
        value,
        bytes,
    }
}

/// Fraction of increasing steps and tick/value correlation of a leaked
/// timestamp series. Values are 32-bit and unwrapped through signed deltas.
pub fn timestamp_correlation(samples: &[TimestampSample]) -> (Option<f64>, Option<f64>) {
    if samples.len() < 2 {
        return (None, None);
    }
    let mut unwrapped = Vec::with_capacity(samples.len());
    let mut acc = 0i64;
    let mut increasing = 0usize;
    unwrapped.push(0.0);
    for pair in samples.windows(2) {
        let delta = (pair[1].value.wrapping_sub(pair[0].value) as u32) as i32 as i64;
        if delta > 0 {
            increasing += 1;
        }
        acc += delta;
        unwrapped.push(acc as f64);
    }
    let ticks: Vec<f64> = samples.iter().map(|s| s.ticks as f64).collect();
    (
        Some(increasing as f64 / (samples.len() - 1) as f64),
        pearson(&ticks, &unwrapped),
    )
}

/// Verdict for a timestamp probe from complete 4-byte samples.
pub fn classify_timestamps(
    samples: &[TimestampSample],
    control_complete: u64,
    rounds: u64,
    timer: TimerReliability,
    params: &ClassifierParams,
) -> (LeakStatus, TimestampEvidence) {
    let (increasing_fraction, correlation) = timestamp_correlation(samples);
    let evidence = TimestampEvidence {
        complete_samples: samples.len() as u64,
        control_complete,
        increasing_fraction,
        correlation,
        timer,
        first_values: samples.iter().take(8).map(|s| s.value).collect(),
    };
    let status = if !params.significant(samples.len() as u64, rounds, control_complete, rounds) {
        LeakStatus::NoLeak
    } else if samples.iter().all(|s| s.value == 0) {
        LeakStatus::ZeroForward
    } else if timer == TimerReliability::Degraded {
        LeakStatus::Unverified
    } else {
        match (increasing_fraction, correlation) {
            (Some(inc), Some(r))
                if samples.len() >= 3
                    && inc >= params.min_increasing_fraction
                    && r >= params.min_correlation =>
            {
                LeakStatus::Leaks
            }
            _ => LeakStatus::Unverified,
        }
    };
    (status, evidence)
}
