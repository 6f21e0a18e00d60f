//! Transient-execution scaffolding shared by both backends.
//!
//! The hardware fault machinery (signal recovery, TSX, speculative
//! suppression) lives in [`x86`]; this module holds the portable parts: the
//! description of a transient body, the counting-worker timer, and the
//! execution context victims run in.

use std::fs;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probes::ProbeKind;

#[cfg(all(target_arch = "x86_64", target_os = "linux"))]
pub mod x86;

pub const DEFAULT_MISTRAIN_ROUNDS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultStrategy {
    /// Catch the fault in a SIGSEGV/SIGILL/SIGBUS handler and resume at the
    /// recovery label. Works everywhere.
    #[default]
    SignalHandler,
    /// Run the body inside an RTM transaction; the fault aborts it.
    TransactionAbort,
    /// Run the body only on a mispredicted return path so the fault never
    /// retires.
    SpeculativeSuppression,
}

/// Which bits of a transiently read value are encoded, and into how many
/// channel symbols. Symbol `k` receives `(value >> (bit_offset + 8k)) & mask`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeWindow {
    pub bit_offset: u32,
    pub bits: u32,
    pub symbols: usize,
}

impl EncodeWindow {
    pub fn byte_at(bit_offset: u32) -> Self {
        Self {
            bit_offset,
            bits: 8,
            symbols: 1,
        }
    }

    pub fn low_bytes(symbols: usize) -> Self {
        Self {
            bit_offset: 0,
            bits: 8,
            symbols,
        }
    }

    pub fn mask(&self) -> u64 {
        (1u64 << self.bits) - 1
    }

    /// Slot encoded into symbol `symbol` for register value `value`.
    pub fn slot(&self, value: u64, symbol: usize) -> usize {
        let shift = self.bit_offset as u64 + 8 * symbol as u64;
        if shift >= 64 {
            0
        } else {
            ((value >> shift) & self.mask()) as usize
        }
    }
}

/// The attacker-supplied sequence run by `run_transient`: a fault-free
/// prefix, at most one faulting access, and a continuation that only touches
/// the channel buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransientBody {
    /// No faulting access at all.
    Nop,
    /// Read a privileged register and encode the selected bits.
    Probe {
        probe: ProbeKind,
        operand: u64,
        window: EncodeWindow,
    },
    /// Load from a (kernel) address and discard the result.
    Touch { address: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TransientOutcome {
    /// The designated access faulted and control came back through recovery.
    pub faulted: bool,
    pub signal: Option<i32>,
    /// Cycles from entering the body to regaining control.
    pub encode_cycles: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimerReliability {
    Reliable,
    /// No sibling hyperthread to run the counting worker on.
    Degraded,
}

/// High-resolution timer built from a worker thread incrementing a shared
/// counter. The worker is the only writer of the cell.
pub struct CountingTimer {
    cell: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
    worker: Option<JoinHandle<()>>,
    reliability: TimerReliability,
    pinned_cpu: Option<usize>,
    resolution_estimate: f64,
}

impl CountingTimer {
    pub const DEFAULT_WARMUP: Duration = Duration::from_millis(100);

    pub fn start() -> Result<Self> {
        Self::start_with_warmup(Self::DEFAULT_WARMUP)
    }

    pub fn start_with_warmup(warmup: Duration) -> Result<Self> {
        let cell = Arc::new(AtomicU64::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let sibling = sibling_of_current_cpu();
        let worker = {
            let cell = Arc::clone(&cell);
            let stop = Arc::clone(&stop);
            std::thread::Builder::new()
                .name("counting-timer".into())
                .spawn(move || {
                    if let Some(cpu) = sibling {
                        pin_current_thread(cpu);
                    }
                    let mut n = 0u64;
                    while !stop.load(Ordering::Relaxed) {
                        n += 1;
                        cell.store(n, Ordering::Release);
                    }
                })
                .map_err(|e| {
                    Error::TimerUnavailable(format!("cannot spawn counting worker: {e}"))
                })?
        };
        let mut timer = Self {
            cell,
            stop,
            worker: Some(worker),
            reliability: if sibling.is_some() {
                TimerReliability::Reliable
            } else {
                TimerReliability::Degraded
            },
            pinned_cpu: sibling,
            resolution_estimate: 0.0,
        };
        timer.resolution_estimate = timer.measure_resolution(warmup);
        Ok(timer)
    }

    #[inline]
    pub fn read(&self) -> u64 {
        self.cell.load(Ordering::Acquire)
    }

    /// Counter ticks per cycle-counter cycle (per nanosecond off x86).
    pub fn resolution_estimate(&self) -> f64 {
        self.resolution_estimate
    }

    pub fn reliability(&self) -> TimerReliability {
        self.reliability
    }

    pub fn pinned_cpu(&self) -> Option<usize> {
        self.pinned_cpu
    }

    fn measure_resolution(&self, window: Duration) -> f64 {
        let start = Instant::now();
        let c0 = cycle_counter();
        let t0 = self.read();
        while start.elapsed() < window {
            std::thread::sleep(Duration::from_millis(1).min(window));
        }
        let t1 = self.read();
        let c1 = cycle_counter();
        let cycles = c1.saturating_sub(c0).max(1);
        (t1.saturating_sub(t0)) as f64 / cycles as f64
    }
}

impl Drop for CountingTimer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(worker) = self.worker.take() {
            let _ = worker.join();
        }
    }
}

/// Time stamp counter on x86_64, monotonic nanoseconds elsewhere.
pub fn cycle_counter() -> u64 {
    #[cfg(target_arch = "x86_64")]
    {
        // SAFETY: rdtsc has no memory effects.
        unsafe { core::arch::x86_64::_rdtsc() }
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        use std::sync::OnceLock;
        static EPOCH: OnceLock<Instant> = OnceLock::new();
        EPOCH.get_or_init(Instant::now).elapsed().as_nanos() as u64
    }
}

/// Parse a sysfs CPU list such as `0-3,8,10-11`.
pub fn parse_cpu_list(list: &str) -> Vec<usize> {
    let mut cpus = Vec::new();
    for part in list.trim().split(',').filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                if let (Ok(a), Ok(b)) = (a.trim().parse::<usize>(), b.trim().parse::<usize>()) {
                    cpus.extend(a..=b);
                }
            }
            None => {
                if let Ok(c) = part.trim().parse() {
                    cpus.push(c);
                }
            }
        }
    }
    cpus
}

pub fn current_cpu() -> Option<usize> {
    #[cfg(target_os = "linux")]
    {
        // SAFETY: plain syscall wrapper without arguments.
        let cpu = unsafe { libc::sched_getcpu() };
        (cpu >= 0).then_some(cpu as usize)
    }
    #[cfg(not(target_os = "linux"))]
    {
        None
    }
}

/// A hyperthread sharing the physical core of the calling thread.
pub fn sibling_of_current_cpu() -> Option<usize> {
    let cpu = current_cpu()?;
    let list = fs::read_to_string(format!(
        "/sys/devices/system/cpu/cpu{cpu}/topology/thread_siblings_list"
    ))
    .ok()?;
    parse_cpu_list(&list).into_iter().find(|&c| c != cpu)
}

pub fn pin_current_thread(cpu: usize) -> bool {
    #[cfg(target_os = "linux")]
    {
        // SAFETY: cpu_set_t is plain data; sched_setaffinity(0) targets the
        // calling thread.
        unsafe {
            let mut set: libc::cpu_set_t = std::mem::zeroed();
            libc::CPU_SET(cpu, &mut set);
            libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0
        }
    }
    #[cfg(not(target_os = "linux"))]
    {
        let _ = cpu;
        false
    }
}

/// Microarchitectural events a victim reports to a simulated PMU. On real
/// hardware the counters observe these directly and reports are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MicroEvent {
    TakenBranch,
    InstructionRetired,
    DividerBusy,
    PageWalk,
}

pub type BranchSite = u32;

/// Where victim code executes.
pub trait VictimContext {
    fn retire(&mut self, event: MicroEvent, count: u64);

    /// A conditional branch at `site`; `body` runs architecturally when
    /// `condition` holds and may run transiently when the branch is
    /// mispredicted.
    fn guarded(
        &mut self,
        site: BranchSite,
        condition: bool,
        body: &mut dyn FnMut(&mut dyn VictimContext),
    );
}

/// Plain native execution: a real branch, events left to the hardware.
#[derive(Debug, Default, Clone, Copy)]
pub struct NativeContext;

impl VictimContext for NativeContext {
    fn retire(&mut self, _event: MicroEvent, _count: u64) {}

    #[inline(never)]
    fn guarded(
        &mut self,
        _site: BranchSite,
        condition: bool,
        body: &mut dyn FnMut(&mut dyn VictimContext),
    ) {
        if std::hint::black_box(condition) {
            body(self);
        }
    }
}

/// In-place mistraining: run `call` (a victim invocation with an in-bounds
/// input) `rounds` times so its guarding branch is predicted taken.
pub fn mistrain_inplace(
    ctx: &mut dyn VictimContext,
    rounds: usize,
    mut call: impl FnMut(&mut dyn VictimContext),
) -> Result<()> {
    if rounds == 0 {
        return Err(Error::InvalidArgument(
            "mistraining needs at least one round".into(),
        ));
    }
    for _ in 0..rounds {
        call(ctx);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cpu_lists() {
        assert_eq!(parse_cpu_list("0-3,8\n"), vec![0, 1, 2, 3, 8]);
        assert_eq!(parse_cpu_list("5"), vec![5]);
        assert!(parse_cpu_list("").is_empty());
    }

    #[test]
    fn window_slots() {
        let w = EncodeWindow::low_bytes(4);
        assert_eq!(w.slot(0xDEADBEEF, 0), 0xEF);
        assert_eq!(w.slot(0xDEADBEEF, 3), 0xDE);
        let w = EncodeWindow::byte_at(8);
        assert_eq!(w.slot(0x1234, 0), 0x12);
        let bit = EncodeWindow {
            bit_offset: 3,
            bits: 1,
            symbols: 1,
        };
        assert_eq!(bit.slot(0b1000, 0), 1);
        assert_eq!(EncodeWindow::byte_at(64).slot(u64::MAX, 0), 0);
    }

    #[test]
    fn mistraining_rejects_zero_rounds() {
        let mut ctx = NativeContext;
        assert!(mistrain_inplace(&mut ctx, 0, |_| {}).is_err());
        let mut calls = 0;
        mistrain_inplace(&mut ctx, 10, |_| calls += 1).unwrap();
        assert_eq!(calls, 10);
    }

    #[test]
    fn counting_timer_is_monotone_and_advances() {
        let timer = CountingTimer::start_with_warmup(Duration::from_millis(20)).unwrap();
        assert!(timer.resolution_estimate().is_finite());
        assert!(timer.resolution_estimate() > 0.0);
        let t1 = timer.read();
        std::thread::sleep(Duration::from_millis(1));
        let t2 = timer.read();
        assert!(t2 > t1);
        let mut last = 0;
        for _ in 0..10_000 {
            let now = timer.read();
            assert!(now >= last);
            last = now;
        }
    }

    #[test]
    fn counting_timer_monotone_under_concurrent_readers() {
        let timer = Arc::new(CountingTimer::start_with_warmup(Duration::from_millis(5)).unwrap());
        let readers: Vec<_> = (0..3)
            .map(|_| {
                let timer = Arc::clone(&timer);
                std::thread::spawn(move || {
                    let mut last = 0;
                    for _ in 0..20_000 {
                        let now = timer.read();
                        assert!(now >= last);
                        last = now;
                    }
                })
            })
            .collect();
        for r in readers {
            r.join().unwrap();
        }
    }
}
