//! Hardware backend: real transient bodies through the signal harness, a
//! page-aligned Flush+Reload buffer and perf-programmed counters.

use std::alloc::{self, Layout};
use std::arch::x86_64::{_mm_clflush, _mm_lfence, _mm_mfence, _rdtsc};
use std::fs;
use std::sync::Arc;

use super::{Backend, BackendCapabilities, BackendKind, CpuIdentity};
use crate::channel::{
    Channel, ChannelConfig, ChannelMode, Medium, DEFAULT_CALIBRATION_ITERATIONS, DEFAULT_STRIDE,
};
use crate::counterleak::{CounterSelector, ProgrammedBy};
use crate::error::{Error, Result};
use crate::harness::x86::{has_rtm, BodyKind, SignalHarness, TransientArgs};
use crate::harness::{
    sibling_of_current_cpu, CountingTimer, FaultStrategy, NativeContext, TimerReliability,
    TransientBody, TransientOutcome, VictimContext,
};
use crate::probes::ProbeKind;

const PAGE: usize = 4096;

/// Clock used for reload timing.
#[derive(Clone)]
enum Clock {
    Tsc,
    /// While `rdtsc` traps, time with the counting worker instead.
    Counting(Arc<CountingTimer>),
}

impl Clock {
    #[inline(always)]
    fn now(&self) -> u64 {
        match self {
            // SAFETY: rdtsc has no memory effects.
            Clock::Tsc => unsafe { _rdtsc() },
            Clock::Counting(t) => t.read(),
        }
    }
}

/// Byte distance to the translation-warming line; below the smallest
/// hardware stride, so never a slot.
const TLB_WARM_OFFSET: usize = 512;

/// Page-aligned lookup buffer with every line backed by a distinct page.
pub struct HwMedium {
    ptr: *mut u8,
    layout: Layout,
    clock: Clock,
}

// SAFETY: the buffer is owned exclusively by the medium.
unsafe impl Send for HwMedium {}

impl HwMedium {
    fn new(len: usize, clock: Clock) -> Result<Self> {
        let layout = Layout::from_size_align(len.max(PAGE), PAGE)
            .map_err(|e| Error::InvalidGeometry(e.to_string()))?;
        // SAFETY: nonzero size.
        let ptr = unsafe { alloc::alloc(layout) };
        if ptr.is_null() {
            return Err(Error::HarnessFailure(format!(
                "cannot allocate {len} bytes"
            )));
        }
        // Write every line so no page stays mapped to the shared zero page.
        for off in (0..layout.size()).step_by(64) {
            // SAFETY: in bounds of the allocation.
            unsafe { ptr.add(off).write_volatile(1) };
        }
        Ok(Self { ptr, layout, clock })
    }

    fn base(&self) -> u64 {
        self.ptr as u64
    }
}

impl Drop for HwMedium {
    fn drop(&mut self) {
        // SAFETY: allocated with this layout in `new`.
        unsafe { alloc::dealloc(self.ptr, self.layout) };
    }
}

impl Medium for HwMedium {
    fn len(&self) -> usize {
        self.layout.size()
    }

    fn touch(&mut self, offset: usize) {
        assert!(offset < self.len());
        // SAFETY: offset checked above.
        unsafe { std::ptr::read_volatile(self.ptr.add(offset)) };
    }

    fn flush(&mut self, offset: usize) {
        assert!(offset < self.len());
        // SAFETY: offset checked above.
        unsafe { _mm_clflush(self.ptr.add(offset)) };
    }

    fn timed_reload(&mut self, offset: usize) -> u64 {
        assert!(offset < self.len());
        // Warm the translation through a line of the same page that no slot
        // uses at hardware strides, so a page walk doesn't turn a hit into a
        // miss.
        let warm = offset ^ TLB_WARM_OFFSET;
        // SAFETY: offset checked above, `warm` lies in the same page; fences
        // only order memory.
        unsafe {
            if warm < self.len() {
                std::ptr::read_volatile(self.ptr.add(warm));
            }
            _mm_mfence();
            _mm_lfence();
            let t0 = self.clock.now();
            _mm_lfence();
            std::ptr::read_volatile(self.ptr.add(offset));
            _mm_lfence();
            let t1 = self.clock.now();
            t1.wrapping_sub(t0)
        }
    }

    fn fence(&mut self) {
        // SAFETY: plain fence.
        unsafe { _mm_mfence() };
    }
}

/// One event opened through `perf_event_open`, kept alive so it keeps
/// counting.
struct PerfEvent {
    fd: libc::c_int,
    page: *mut libc::c_void,
}

impl Drop for PerfEvent {
    fn drop(&mut self) {
        // SAFETY: both came from successful mmap/perf_event_open calls.
        unsafe {
            if !self.page.is_null() {
                libc::munmap(self.page, PAGE);
            }
            libc::close(self.fd);
        }
    }
}

#[repr(C)]
#[derive(Default)]
struct PerfEventAttr {
    kind: u32,
    size: u32,
    config: u64,
    sample_period: u64,
    sample_type: u64,
    read_format: u64,
    flags: u64,
    wakeup_events: u32,
    bp_type: u32,
    config1: u64,
    config2: u64,
    branch_sample_type: u64,
    sample_regs_user: u64,
    sample_stack_user: u32,
    clockid: i32,
    sample_regs_intr: u64,
    aux_watermark: u32,
    sample_max_stack: u16,
    reserved: u16,
    aux_sample_size: u32,
    reserved2: u32,
    sig_data: u64,
    config3: u64,
}

const PERF_TYPE_HARDWARE: u32 = 0;
const PERF_TYPE_RAW: u32 = 4;
const PERF_COUNT_HW_INSTRUCTIONS: u64 = 1;
const FLAG_EXCLUDE_HV: u64 = 1 << 6;

/// `(type, config)` for the counter events the case studies use. Raw codes
/// are `umask << 8 | event` for Intel cores; `raw:0x...` passes a code
/// through.
pub fn perf_event_code(event_name: &str) -> Option<(u32, u64)> {
    if let Some(hex) = event_name.strip_prefix("raw:") {
        let hex = hex.trim_start_matches("0x");
        return u64::from_str_radix(hex, 16)
            .ok()
            .map(|c| (PERF_TYPE_RAW, c));
    }
    Some(match event_name {
        "INSTR_RETIRED" | "INST_RETIRED.ANY" => (PERF_TYPE_HARDWARE, PERF_COUNT_HW_INSTRUCTIONS),
        "BR_INST_RETIRED.NEAR_TAKEN" => (PERF_TYPE_RAW, 0x20C4),
        "CYCLES_DIV_BUSY.ALL" => (PERF_TYPE_RAW, 0x00CD),
        "DTLB_LOAD_MISSES.WALK_COMPLETED_2M_4M" => (PERF_TYPE_RAW, 0x0408),
        _ => return None,
    })
}

fn open_perf_event(selector: &CounterSelector) -> Result<PerfEvent> {
    let (kind, config) = perf_event_code(&selector.event_name).ok_or_else(|| {
        Error::CounterUnavailable(format!("no event code known for {}", selector.event_name))
    })?;
    let attr = PerfEventAttr {
        kind,
        size: std::mem::size_of::<PerfEventAttr>() as u32,
        config,
        flags: FLAG_EXCLUDE_HV,
        ..Default::default()
    };
    // SAFETY: attr is a valid, fully initialized perf_event_attr.
    let fd = unsafe {
        libc::syscall(
            libc::SYS_perf_event_open,
            &attr as *const PerfEventAttr,
            0,
            -1,
            -1,
            0,
        )
    } as libc::c_int;
    if fd < 0 {
        return Err(Error::CounterUnavailable(format!(
            "perf_event_open({}): {}",
            selector.event_name,
            std::io::Error::last_os_error()
        )));
    }
    // SAFETY: mapping the first (metadata) page of a perf fd.
    let page = unsafe {
        libc::mmap(
            std::ptr::null_mut(),
            PAGE,
            libc::PROT_READ,
            libc::MAP_SHARED,
            fd,
            0,
        )
    };
    let page = if page == libc::MAP_FAILED {
        std::ptr::null_mut()
    } else {
        page
    };
    Ok(PerfEvent { fd, page })
}

/// Hardware counter index assigned to an event, from the `index` field of
/// the perf metadata page (1-based, 0 when not user-readable).
fn assigned_index(event: &PerfEvent) -> Option<u32> {
    if event.page.is_null() {
        return None;
    }
    // SAFETY: the metadata page is at least 16 bytes; `index` is at 12.
    let index = unsafe { std::ptr::read_volatile((event.page as *const u8).add(12) as *const u32) };
    index.checked_sub(1)
}

pub fn read_cpu_identity() -> CpuIdentity {
    let text = fs::read_to_string("/proc/cpuinfo").unwrap_or_default();
    let field = |name: &str| {
        text.lines()
            .find(|l| l.split(':').next().map(str::trim) == Some(name))
            .and_then(|l| l.split_once(':'))
            .map(|(_, v)| v.trim().to_string())
    };
    CpuIdentity {
        model: field("model name").unwrap_or_else(|| "unknown".into()),
        microcode: field("microcode").unwrap_or_else(|| "unknown".into()),
        microarchitecture: None,
    }
}

pub struct HwBackend {
    harness: SignalHarness,
    strategy: FaultStrategy,
    channel: Channel<HwMedium>,
    timer: Option<Arc<CountingTimer>>,
    tsc_trapped: bool,
    scratch: Box<[u8; 16]>,
    victim: NativeContext,
    events: Vec<PerfEvent>,
    identity: CpuIdentity,
}

impl HwBackend {
    /// Install fault handlers and calibrate a one-byte channel. Blocks while
    /// another hardware backend exists in the process.
    pub fn new(strategy: FaultStrategy) -> Result<Self> {
        if strategy == FaultStrategy::TransactionAbort && !has_rtm() {
            return Err(Error::Unsupported(
                "this CPU has no transactional memory".into(),
            ));
        }
        let harness = SignalHarness::install()?;
        let channel = Self::build_channel(Clock::Tsc, DEFAULT_STRIDE, 1, 8)?;
        Ok(Self {
            harness,
            strategy,
            channel,
            timer: None,
            tsc_trapped: false,
            scratch: Box::new([0; 16]),
            victim: NativeContext,
            events: Vec::new(),
            identity: read_cpu_identity(),
        })
    }

    pub fn strategy(&self) -> FaultStrategy {
        self.strategy
    }

    fn build_channel(
        clock: Clock,
        stride: usize,
        symbols: usize,
        bits: u32,
    ) -> Result<Channel<HwMedium>> {
        if !(1..=8).contains(&bits) {
            return Err(Error::InvalidGeometry(format!(
                "{bits}-bit symbols are not supported"
            )));
        }
        let config = ChannelConfig::new(1 << bits, stride, symbols, ChannelMode::Hardware)?;
        let medium = HwMedium::new(config.buffer_len(), clock)?;
        let mut channel = Channel::new(config, medium)?;
        channel.calibrate(DEFAULT_CALIBRATION_ITERATIONS)?;
        Ok(channel)
    }

    fn clock(&self) -> Clock {
        match (&self.timer, self.tsc_trapped) {
            (Some(t), true) => Clock::Counting(Arc::clone(t)),
            _ => Clock::Tsc,
        }
    }

    fn ensure_timer(&mut self) -> Result<Arc<CountingTimer>> {
        if self.timer.is_none() {
            self.timer = Some(Arc::new(CountingTimer::start()?));
        }
        Ok(Arc::clone(self.timer.as_ref().expect("just started")))
    }

    fn set_tsc_trap(&mut self, trapped: bool) -> Result<()> {
        let mode = if trapped {
            libc::PR_TSC_SIGSEGV
        } else {
            libc::PR_TSC_ENABLE
        };
        // SAFETY: PR_SET_TSC only changes this thread's rdtsc permission.
        if unsafe { libc::prctl(libc::PR_SET_TSC, mode, 0, 0, 0) } != 0 {
            return Err(Error::Unsupported(format!(
                "cannot change rdtsc permission: {}",
                std::io::Error::last_os_error()
            )));
        }
        self.tsc_trapped = trapped;
        Ok(())
    }

    fn now(&self) -> u64 {
        self.clock().now()
    }

    fn run_body(&mut self, kind: BodyKind, args: &mut TransientArgs) -> Result<(Option<i32>, u64)> {
        args.scratch = self.scratch.as_mut_ptr() as u64;
        let start = self.now();
        // SAFETY: `args` was filled by the callers below from the live
        // channel geometry; scratch points at 16 owned bytes.
        let sig = unsafe { self.harness.run(kind, self.strategy, args)? };
        let cycles = self.now().wrapping_sub(start);
        Ok((sig, cycles))
    }
}

impl Drop for HwBackend {
    fn drop(&mut self) {
        if self.tsc_trapped {
            let _ = self.set_tsc_trap(false);
        }
    }
}

impl Backend for HwBackend {
    type Medium = HwMedium;

    fn kind(&self) -> BackendKind {
        BackendKind::Hardware
    }

    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities {
            has_cycle_counter: true,
            has_transactional_memory: has_rtm(),
            has_sibling_threads: sibling_of_current_cpu().is_some(),
            is_simulation: false,
        }
    }

    fn identity(&self) -> CpuIdentity {
        self.identity.clone()
    }

    fn channel(&mut self) -> &mut Channel<HwMedium> {
        &mut self.channel
    }

    fn configure_channel(&mut self, stride: usize, symbols: usize, bits: u32) -> Result<()> {
        self.channel = Self::build_channel(self.clock(), stride, symbols, bits)?;
        Ok(())
    }

    fn run_transient(&mut self, body: &TransientBody) -> Result<TransientOutcome> {
        let mut args = TransientArgs::default();
        let kind = match *body {
            TransientBody::Nop => BodyKind::Nop,
            TransientBody::Touch { address } => {
                args.operand = address;
                BodyKind::Touch
            }
            TransientBody::Probe {
                probe,
                operand,
                window,
            } => {
                let config = self.channel.config();
                if (1usize << window.bits) != config.slot_count
                    || window.symbols > config.symbol_count
                {
                    return Err(Error::HarnessFailure(format!(
                        "{}-bit window over {} symbols does not fit a channel of {} slots x {} symbols",
                        window.bits, window.symbols, config.slot_count, config.symbol_count
                    )));
                }
                args.operand = operand;
                args.bit_offset = window.bit_offset as u64;
                args.symbols = window.symbols as u64;
                args.buffer = self.channel.medium().base();
                args.stride = config.stride_bytes as u64;
                args.mask = window.mask();
                args.region_len = config.region_len() as u64;
                BodyKind::Probe(probe)
            }
        };
        let (signal, encode_cycles) = self.run_body(kind, &mut args)?;
        Ok(TransientOutcome {
            faulted: signal.is_some(),
            signal,
            encode_cycles,
        })
    }

    fn architectural_read(&mut self, probe: ProbeKind, operand: u64) -> Result<Option<u64>> {
        let mut args = TransientArgs {
            operand,
            ..Default::default()
        };
        let (signal, _) = self.run_body(BodyKind::Probe(probe), &mut args)?;
        Ok(signal.is_none().then_some(args.result))
    }

    fn enter_probe(&mut self, probe: ProbeKind) -> Result<()> {
        if probe.is_timestamp() {
            self.ensure_timer()?;
            self.set_tsc_trap(true)?;
        }
        Ok(())
    }

    fn leave_probe(&mut self, probe: ProbeKind) {
        if probe.is_timestamp() && self.tsc_trapped {
            let _ = self.set_tsc_trap(false);
        }
    }

    fn cycles(&mut self) -> u64 {
        self.now()
    }

    fn timer_ticks(&mut self) -> Result<u64> {
        Ok(self.ensure_timer()?.read())
    }

    fn timer_reliability(&mut self) -> TimerReliability {
        match self.ensure_timer() {
            Ok(t) => t.reliability(),
            Err(_) => TimerReliability::Degraded,
        }
    }

    fn victim(&mut self) -> &mut dyn VictimContext {
        &mut self.victim
    }

    fn program_counter(&mut self, selector: &CounterSelector) -> Result<()> {
        if selector.programmed_by == ProgrammedBy::PreExisting {
            return Ok(());
        }
        let event = open_perf_event(selector)?;
        match assigned_index(&event) {
            Some(index) if index == selector.counter_index => {
                self.events.push(event);
                Ok(())
            }
            Some(index) => Err(Error::CounterUnavailable(format!(
                "{} was scheduled on counter {index}, not {}",
                selector.event_name, selector.counter_index
            ))),
            None => Err(Error::CounterUnavailable(format!(
                "{} is open but not on a user-visible counter",
                selector.event_name
            ))),
        }
    }
}
