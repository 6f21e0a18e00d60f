//! Page-granular Flush+Reload covert channel.
//!
//! A value `v` of symbol `k` is encoded by loading the first line of slot `v`
//! in the `k`-th symbol region of a lookup buffer. Decoding times a reload of
//! every slot of that region and reports the slots faster than the calibrated
//! threshold. The memory behind the buffer is a [`Medium`]: real cache lines
//! on hardware, a hot/cold map in simulation.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::median_u64;

pub const CACHE_LINE: usize = 64;
pub const HARDWARE_STRIDES: [usize; 3] = [1024, 2048, 4096];
pub const DEFAULT_STRIDE: usize = 4096;
pub const DEFAULT_CALIBRATION_ITERATIONS: usize = 10_000;
pub const MAX_SYMBOLS: usize = 4;

/// Multiplier of the slot permutation used while probing.
const PROBE_STEP: usize = 167;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    Hardware,
    Simulation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub slot_count: usize,
    pub stride_bytes: usize,
    pub symbol_count: usize,
    /// `None` until [`Channel::calibrate`] succeeds.
    pub threshold_cycles: Option<u64>,
}

impl ChannelConfig {
    pub fn new(
        slot_count: usize,
        stride_bytes: usize,
        symbol_count: usize,
        mode: ChannelMode,
    ) -> Result<Self> {
        if slot_count == 0 {
            return Err(Error::InvalidGeometry("slot_count must be positive".into()));
        }
        if !(1..=MAX_SYMBOLS).contains(&symbol_count) {
            return Err(Error::InvalidGeometry(format!(
                "symbol_count {symbol_count} outside 1..={MAX_SYMBOLS}"
            )));
        }
        let stride_ok = match mode {
            ChannelMode::Hardware => HARDWARE_STRIDES.contains(&stride_bytes),
            ChannelMode::Simulation => stride_bytes > 0 && stride_bytes % CACHE_LINE == 0,
        };
        if !stride_ok {
            return Err(Error::InvalidGeometry(format!(
                "stride {stride_bytes} not allowed in {mode:?} mode"
            )));
        }
        Ok(Self {
            slot_count,
            stride_bytes,
            symbol_count,
            threshold_cycles: None,
        })
    }

    /// One byte per symbol over 256 slots.
    pub fn bytes(symbol_count: usize, stride_bytes: usize, mode: ChannelMode) -> Result<Self> {
        Self::new(256, stride_bytes, symbol_count, mode)
    }

    pub fn region_len(&self) -> usize {
        self.slot_count * self.stride_bytes
    }

    pub fn buffer_len(&self) -> usize {
        self.region_len() * self.symbol_count
    }

    pub fn is_calibrated(&self) -> bool {
        matches!(self.threshold_cycles, Some(t) if t > 0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelObservation {
    pub symbol_index: usize,
    /// `(slot, cycles)` in probe order.
    pub per_slot_cycles: Vec<(usize, u64)>,
    pub hit_slots: BTreeSet<usize>,
}

impl ChannelObservation {
    pub fn single_hit(&self) -> Option<usize> {
        if self.hit_slots.len() == 1 {
            self.hit_slots.iter().next().copied()
        } else {
            None
        }
    }

    pub fn is_multi_hit(&self) -> bool {
        self.hit_slots.len() > 1
    }
}

/// Memory backing a channel buffer. Offsets are byte offsets into the buffer.
pub trait Medium {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Load one byte at `offset`, bringing its line into the cache.
    fn touch(&mut self, offset: usize);

    /// Evict the line holding `offset`.
    fn flush(&mut self, offset: usize);

    /// Time a load of `offset` in cycles of the medium's timer.
    fn timed_reload(&mut self, offset: usize) -> u64;

    /// Order all outstanding flushes before subsequent loads.
    fn fence(&mut self) {}

    /// Called once before each decode pass over one symbol region.
    fn begin_pass(&mut self, _region_start: usize, _slot_count: usize, _stride: usize) {}
}

#[derive(Debug, Clone)]
pub struct Channel<M> {
    config: ChannelConfig,
    medium: M,
    order: Vec<usize>,
    probes_issued: u64,
}

impl<M: Medium> Channel<M> {
    pub fn new(config: ChannelConfig, medium: M) -> Result<Self> {
        if medium.len() != config.buffer_len() {
            return Err(Error::InvalidGeometry(format!(
                "buffer holds {} bytes, geometry needs {}",
                medium.len(),
                config.buffer_len()
            )));
        }
        let order = probe_order(config.slot_count);
        Ok(Self {
            config,
            medium,
            order,
            probes_issued: 0,
        })
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    pub fn medium(&self) -> &M {
        &self.medium
    }

    pub fn medium_mut(&mut self) -> &mut M {
        &mut self.medium
    }

    pub fn into_medium(self) -> M {
        self.medium
    }

    /// Total slot probes issued by [`Channel::decode`] so far.
    pub fn probes_issued(&self) -> u64 {
        self.probes_issued
    }

    pub fn slot_offset(&self, symbol: usize, slot: usize) -> usize {
        symbol * self.config.region_len() + slot * self.config.stride_bytes
    }

    pub fn set_threshold(&mut self, threshold: u64) -> Result<()> {
        if threshold == 0 {
            return Err(Error::InvalidArgument("threshold must be positive".into()));
        }
        self.config.threshold_cycles = Some(threshold);
        Ok(())
    }

    /// Measure `iterations` uncached/cached reload pairs and set the
    /// threshold to the midpoint of the two medians.
    pub fn calibrate(&mut self, iterations: usize) -> Result<u64> {
        if iterations == 0 {
            return Err(Error::InvalidArgument(
                "calibration needs at least one iteration".into(),
            ));
        }
        let mut hits = Vec::with_capacity(iterations);
        let mut misses = Vec::with_capacity(iterations);
        for i in 0..iterations {
            let offset = self.slot_offset(0, i % self.config.slot_count);
            self.medium.flush(offset);
            self.medium.fence();
            misses.push(self.medium.timed_reload(offset));
            hits.push(self.medium.timed_reload(offset));
            self.medium.flush(offset);
        }
        self.medium.fence();
        let hit_median = median_u64(&hits).unwrap_or(0);
        let miss_median = median_u64(&misses).unwrap_or(0);
        // An integer strictly between the medians must exist.
        if miss_median < hit_median + 2 {
            return Err(Error::CalibrationFailed {
                hit_median,
                miss_median,
            });
        }
        let threshold = hit_median + (miss_median - hit_median) / 2;
        self.config.threshold_cycles = Some(threshold);
        Ok(threshold)
    }

    /// Architectural encode: make slot `value` of symbol `symbol` cache-hot.
    pub fn encode(&mut self, value: usize, symbol: usize) {
        assert!(
            value < self.config.slot_count,
            "value {value} outside slot range"
        );
        assert!(
            symbol < self.config.symbol_count,
            "symbol {symbol} outside geometry"
        );
        let offset = self.slot_offset(symbol, value);
        self.medium.touch(offset);
    }

    pub fn flush_all(&mut self) {
        for symbol in 0..self.config.symbol_count {
            for slot in 0..self.config.slot_count {
                let offset = self.slot_offset(symbol, slot);
                self.medium.flush(offset);
            }
        }
        self.medium.fence();
    }

    /// Probe every slot of `symbol` in permuted order, flushing each after
    /// timing it.
    pub fn decode(&mut self, symbol: usize) -> Result<ChannelObservation> {
        let threshold = match self.config.threshold_cycles {
            Some(t) if t > 0 => t,
            _ => return Err(Error::Uncalibrated),
        };
        if symbol >= self.config.symbol_count {
            return Err(Error::InvalidArgument(format!(
                "symbol {symbol} outside geometry of {} symbols",
                self.config.symbol_count
            )));
        }
        let region = symbol * self.config.region_len();
        let stride = self.config.stride_bytes;
        self.medium
            .begin_pass(region, self.config.slot_count, stride);
        let mut per_slot_cycles = Vec::with_capacity(self.order.len());
        let mut hit_slots = BTreeSet::new();
        for &slot in &self.order {
            let offset = region + slot * stride;
            let cycles = self.medium.timed_reload(offset);
            self.medium.flush(offset);
            if cycles < threshold {
                hit_slots.insert(slot);
            }
            per_slot_cycles.push((slot, cycles));
        }
        self.medium.fence();
        self.probes_issued += self.order.len() as u64;
        Ok(ChannelObservation {
            symbol_index: symbol,
            per_slot_cycles,
            hit_slots,
        })
    }
}

/// Slot visiting order `i * step mod n` with `step` coprime to `n`, so
/// consecutive probes never walk the buffer with a constant small stride.
pub fn probe_order(slot_count: usize) -> Vec<usize> {
    let mut step = PROBE_STEP % slot_count.max(1);
    while slot_count > 1 && gcd(step, slot_count) != 1 {
        step += 1;
    }
    if slot_count == 1 {
        return vec![0];
    }
    (0..slot_count).map(|i| (i * step) % slot_count).collect()
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Simulated channel memory at cache-line granularity: each line is hot or
/// cold, reloads cost a fixed hit or miss latency.
#[derive(Debug, Clone)]
pub struct SimMedium {
    lines: Vec<bool>,
    hit_cycles: u64,
    miss_cycles: u64,
    spurious_hit_rate: f64,
    rng: ChaCha8Rng,
    elapsed: u64,
    spurious_injected: u64,
}

impl SimMedium {
    pub fn new(len: usize, hit_cycles: u64, miss_cycles: u64) -> Self {
        Self {
            lines: vec![false; len.div_ceil(CACHE_LINE)],
            hit_cycles,
            miss_cycles,
            spurious_hit_rate: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
            elapsed: 0,
            spurious_injected: 0,
        }
    }

    /// Before each decode pass, with probability `rate`, one uniformly
    /// chosen slot of the probed region turns hot.
    pub fn with_spurious_hits(mut self, rate: f64, seed: u64) -> Self {
        self.spurious_hit_rate = rate.clamp(0.0, 1.0);
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn is_hot(&self, offset: usize) -> bool {
        self.lines[offset / CACHE_LINE]
    }

    /// Virtual cycles spent in reloads.
    pub fn elapsed_cycles(&self) -> u64 {
        self.elapsed
    }

    pub fn spurious_injected(&self) -> u64 {
        self.spurious_injected
    }
}

impl Medium for SimMedium {
    fn len(&self) -> usize {
        self.lines.len() * CACHE_LINE
    }

    fn touch(&mut self, offset: usize) {
        self.lines[offset / CACHE_LINE] = true;
    }

    fn flush(&mut self, offset: usize) {
        self.lines[offset / CACHE_LINE] = false;
    }

    fn timed_reload(&mut self, offset: usize) -> u64 {
        let line = &mut self.lines[offset / CACHE_LINE];
        let cycles = if *line {
            self.hit_cycles
        } else {
            self.miss_cycles
        };
        *line = true;
        self.elapsed += cycles;
        cycles
    }

    fn begin_pass(&mut self, region_start: usize, slot_count: usize, stride: usize) {
        if self.spurious_hit_rate > 0.0 && self.rng.random_bool(self.spurious_hit_rate) {
            let slot = self.rng.random_range(0..slot_count);
            self.lines[(region_start + slot * stride) / CACHE_LINE] = true;
            self.spurious_injected += 1;
        }
    }
}
