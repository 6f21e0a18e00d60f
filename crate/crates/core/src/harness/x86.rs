//! x86-64 Linux transient bodies and fault recovery.
//!
//! Each probe instruction gets three hand-written bodies, one per
//! [`FaultStrategy`]. A body reads the register into `rax` (or `edx:eax`),
//! shifts the selected bits down and touches one slot per symbol of the
//! channel buffer. With the signal strategy the body publishes the address
//! of its faulting instruction and of its recovery label in two statics; the
//! SIGSEGV/SIGILL/SIGBUS handler moves the interrupted `rip` to the recovery
//! label when the fault came from inside that window.

use std::sync::atomic::{AtomicBool, AtomicI32, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Mutex, MutexGuard};

use super::FaultStrategy;
use crate::error::{Error, Result};
use crate::probes::ProbeKind;

static WINDOW_START: AtomicUsize = AtomicUsize::new(0);
static WINDOW_END: AtomicUsize = AtomicUsize::new(0);
static ARMED: AtomicBool = AtomicBool::new(false);
static LAST_SIGNAL: AtomicI32 = AtomicI32::new(0);
static RECOVERED: AtomicU64 = AtomicU64::new(0);
static HARNESS_LOCK: Mutex<()> = Mutex::new(());

const HANDLED_SIGNALS: [libc::c_int; 3] = [libc::SIGSEGV, libc::SIGILL, libc::SIGBUS];

/// Argument block read by the bodies. Field offsets are hard-coded in the
/// assembly below.
#[repr(C)]
#[derive(Debug, Default, Clone, Copy)]
pub struct TransientArgs {
    /// `ecx`/`rcx` operand: counter index, MSR address or load address.
    pub operand: u64,
    /// 16 bytes of scratch for `sidt`/`sgdt`.
    pub scratch: u64,
    /// Register value, written only if the read retires.
    pub result: u64,
    pub bit_offset: u64,
    pub symbols: u64,
    pub buffer: u64,
    pub stride: u64,
    pub mask: u64,
    pub region_len: u64,
    /// Set by the transactional body when the transaction commits.
    pub committed: u64,
}

type BodyFn = unsafe extern "C" fn(*mut TransientArgs);

macro_rules! arm_window {
    () => {
        concat!(
            "lea {tmp}, [rip + 2f]\n",
            "mov qword ptr [rip + {ws}], {tmp}\n",
            "lea {tmp}, [rip + 3f]\n",
            "mov qword ptr [rip + {we}], {tmp}\n",
        )
    };
}

macro_rules! load_operands {
    () => {
        concat!(
            "mov rcx, qword ptr [{args}]\n",
            "mov rsi, qword ptr [{args} + 8]\n",
            "xor edx, edx\n",
            "xor eax, eax\n",
        )
    };
}

// rax holds the value; encode `symbols` slots, 8 bits apart.
macro_rules! encode_value {
    () => {
        concat!(
            "shl rdx, 32\n",
            "or rax, rdx\n",
            "mov qword ptr [{args} + 16], rax\n",
            "mov rcx, qword ptr [{args} + 24]\n",
            "shr rax, cl\n",
            "mov r8, qword ptr [{args} + 32]\n",
            "mov r9, qword ptr [{args} + 40]\n",
            "mov r10, qword ptr [{args} + 48]\n",
            "mov r11, qword ptr [{args} + 56]\n",
            "mov rsi, qword ptr [{args} + 64]\n",
            "4:\n",
            "test r8, r8\n",
            "jz 5f\n",
            "mov rdx, rax\n",
            "and rdx, r11\n",
            "imul rdx, r10\n",
            "mov rdx, qword ptr [r9 + rdx]\n",
            "shr rax, 8\n",
            "add r9, rsi\n",
            "dec r8\n",
            "jmp 4b\n",
            "5:\n",
        )
    };
}

macro_rules! bodies {
    ($name:ident: $($insn:literal),+) => {
        mod $name {
            use super::*;

            pub unsafe extern "C" fn signal(args: *mut TransientArgs) {
                core::arch::asm!(
                    arm_window!(),
                    load_operands!(),
                    "mfence\n",
                    "2:\n",
                    $(concat!($insn, "\n"),)+
                    encode_value!(),
                    "3:\n",
                    args = in(reg) args,
                    tmp = out(reg) _,
                    ws = sym WINDOW_START,
                    we = sym WINDOW_END,
                    out("rax") _, out("rcx") _, out("rdx") _, out("rsi") _,
                    out("r8") _, out("r9") _, out("r10") _, out("r11") _,
                    options(nostack),
                );
            }

            pub unsafe extern "C" fn transaction(args: *mut TransientArgs) {
                core::arch::asm!(
                    load_operands!(),
                    "xor edi, edi\n",
                    "xbegin 3f\n",
                    $(concat!($insn, "\n"),)+
                    encode_value!(),
                    "mov edi, 1\n",
                    "xend\n",
                    "3:\n",
                    "mov qword ptr [{args} + 72], rdi\n",
                    args = in(reg) args,
                    out("rax") _, out("rcx") _, out("rdx") _, out("rsi") _, out("rdi") _,
                    out("r8") _, out("r9") _, out("r10") _, out("r11") _,
                    options(nostack),
                );
            }

            // The body sits behind a call whose return address is replaced;
            // it only ever runs on the mispredicted return path.
            pub unsafe extern "C" fn speculative(args: *mut TransientArgs) {
                core::arch::asm!(
                    load_operands!(),
                    "call 7f\n",
                    $(concat!($insn, "\n"),)+
                    encode_value!(),
                    "6:\n",
                    "pause\n",
                    "lfence\n",
                    "jmp 6b\n",
                    "7:\n",
                    "lea rax, [rip + 3f]\n",
                    "mov qword ptr [rsp], rax\n",
                    "ret\n",
                    "3:\n",
                    args = in(reg) args,
                    out("rax") _, out("rcx") _, out("rdx") _, out("rsi") _,
                    out("r8") _, out("r9") _, out("r10") _, out("r11") _,
                );
            }
        }
    };
}

bodies!(nop: "nop");
bodies!(touch: "mov rax, qword ptr [rcx]");
bodies!(rdpmc: "rdpmc");
bodies!(rdtsc: "rdtsc");
bodies!(rdtscp: "rdtscp");
bodies!(cr0: "mov rax, cr0");
bodies!(cr2: "mov rax, cr2");
bodies!(cr3: "mov rax, cr3");
bodies!(cr4: "mov rax, cr4");
bodies!(cr8: "mov rax, cr8");
bodies!(dr0: "mov rax, dr0");
bodies!(dr1: "mov rax, dr1");
bodies!(dr2: "mov rax, dr2");
bodies!(dr3: "mov rax, dr3");
bodies!(dr4: "mov rax, dr4");
bodies!(dr5: "mov rax, dr5");
bodies!(dr6: "mov rax, dr6");
bodies!(dr7: "mov rax, dr7");
bodies!(rdfsbase: "rdfsbase rax");
bodies!(rdgsbase: "rdgsbase rax");
bodies!(rdmsr: "rdmsr");
bodies!(str_: "str ax");
bodies!(sldt: "sldt ax");
bodies!(sidt: "sidt [rsi]", "mov rax, qword ptr [rsi + 2]");
bodies!(sgdt: "sgdt [rsi]", "mov rax, qword ptr [rsi + 2]");
bodies!(smsw: "smsw ax");

/// What a body does at its designated faulting instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BodyKind {
    Nop,
    Touch,
    Probe(ProbeKind),
}

macro_rules! pick {
    ($m:ident, $strategy:expr) => {
        match $strategy {
            FaultStrategy::SignalHandler => $m::signal as BodyFn,
            FaultStrategy::TransactionAbort => $m::transaction as BodyFn,
            FaultStrategy::SpeculativeSuppression => $m::speculative as BodyFn,
        }
    };
}

fn body_fn(kind: BodyKind, operand: u64, strategy: FaultStrategy) -> Result<BodyFn> {
    use ProbeKind::*;
    let bad = |what: &str| Err(Error::InvalidArgument(format!("no {what}{operand}")));
    Ok(match kind {
        BodyKind::Nop => pick!(nop, strategy),
        BodyKind::Touch => pick!(touch, strategy),
        BodyKind::Probe(probe) => match probe {
            Rdpmc => pick!(rdpmc, strategy),
            Rdtsc => pick!(rdtsc, strategy),
            Rdtscp => pick!(rdtscp, strategy),
            MovCr => match operand {
                0 => pick!(cr0, strategy),
                2 => pick!(cr2, strategy),
                3 => pick!(cr3, strategy),
                4 => pick!(cr4, strategy),
                8 => pick!(cr8, strategy),
                _ => return bad("control register cr"),
            },
            MovDr => match operand {
                0 => pick!(dr0, strategy),
                1 => pick!(dr1, strategy),
                2 => pick!(dr2, strategy),
                3 => pick!(dr3, strategy),
                4 => pick!(dr4, strategy),
                5 => pick!(dr5, strategy),
                6 => pick!(dr6, strategy),
                7 => pick!(dr7, strategy),
                _ => return bad("debug register dr"),
            },
            Rdfsbase => pick!(rdfsbase, strategy),
            Rdgsbase => pick!(rdgsbase, strategy),
            Rdmsr => pick!(rdmsr, strategy),
            Str => pick!(str_, strategy),
            Sldt => pick!(sldt, strategy),
            Sidt => pick!(sidt, strategy),
            Sgdt => pick!(sgdt, strategy),
            Smsw => pick!(smsw, strategy),
        },
    })
}

extern "C" fn on_fault(sig: libc::c_int, _info: *mut libc::siginfo_t, ctx: *mut libc::c_void) {
    // SAFETY: the kernel passes a valid ucontext for SA_SIGINFO handlers.
    unsafe {
        let uc = ctx as *mut libc::ucontext_t;
        let rip = &mut (*uc).uc_mcontext.gregs[libc::REG_RIP as usize];
        let start = WINDOW_START.load(Ordering::Relaxed);
        let end = WINDOW_END.load(Ordering::Relaxed);
        let at = *rip as usize;
        if ARMED.load(Ordering::Relaxed) && at >= start && at < end {
            *rip = end as libc::greg_t;
            LAST_SIGNAL.store(sig, Ordering::Relaxed);
            RECOVERED.fetch_add(1, Ordering::Relaxed);
            return;
        }
        // Not ours: fall back to the default action, which fires again when
        // the faulting instruction restarts.
        libc::signal(sig, libc::SIG_DFL);
    }
}

/// Installed fault handlers. Only one harness exists per process at a time;
/// a second `install` blocks until the first is dropped.
pub struct SignalHarness {
    previous: Vec<(libc::c_int, libc::sigaction)>,
    _exclusive: MutexGuard<'static, ()>,
}

impl SignalHarness {
    pub fn install() -> Result<Self> {
        let guard = HARNESS_LOCK.lock().unwrap_or_else(|p| p.into_inner());
        let mut previous = Vec::new();
        for sig in HANDLED_SIGNALS {
            // SAFETY: zeroed sigaction is valid; the handler has the
            // SA_SIGINFO signature.
            unsafe {
                let mut action: libc::sigaction = std::mem::zeroed();
                action.sa_sigaction = on_fault as *const () as usize;
                action.sa_flags = libc::SA_SIGINFO;
                libc::sigemptyset(&mut action.sa_mask);
                let mut old: libc::sigaction = std::mem::zeroed();
                if libc::sigaction(sig, &action, &mut old) != 0 {
                    let err = std::io::Error::last_os_error();
                    for (s, o) in &previous {
                        libc::sigaction(*s, o, std::ptr::null_mut());
                    }
                    return Err(Error::HarnessFailure(format!("sigaction({sig}): {err}")));
                }
                previous.push((sig, old));
            }
        }
        Ok(Self {
            previous,
            _exclusive: guard,
        })
    }

    /// Faults recovered so far in this process.
    pub fn recovered_faults() -> u64 {
        RECOVERED.load(Ordering::Relaxed)
    }

    /// Run one body. Returns the signal that interrupted it, if any.
    ///
    /// # Safety
    ///
    /// `args.buffer` must point to `args.symbols * args.region_len` readable
    /// bytes with every slot offset `(value & mask) * stride` in range, and
    /// `args.scratch` to 16 writable bytes when the probe is `sidt`/`sgdt`.
    pub unsafe fn run(
        &mut self,
        kind: BodyKind,
        strategy: FaultStrategy,
        args: &mut TransientArgs,
    ) -> Result<Option<i32>> {
        let body = body_fn(kind, args.operand, strategy)?;
        LAST_SIGNAL.store(0, Ordering::Relaxed);
        args.committed = 0;
        ARMED.store(true, Ordering::SeqCst);
        body(args);
        ARMED.store(false, Ordering::SeqCst);
        let sig = LAST_SIGNAL.swap(0, Ordering::Relaxed);
        if sig != 0 && strategy != FaultStrategy::SignalHandler {
            return Err(Error::UnrecoverableFault { signal: sig });
        }
        Ok((sig != 0).then_some(sig))
    }
}

impl Drop for SignalHarness {
    fn drop(&mut self) {
        for (sig, old) in &self.previous {
            // SAFETY: restoring the action saved at install time.
            unsafe {
                libc::sigaction(*sig, old, std::ptr::null_mut());
            }
        }
    }
}

/// Whether the CPU advertises restricted transactional memory.
pub fn has_rtm() -> bool {
    let max = core::arch::x86_64::__cpuid(0).eax;
    max >= 7 && core::arch::x86_64::__cpuid_count(7, 0).ebx & (1 << 11) != 0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args() -> TransientArgs {
        TransientArgs::default()
    }

    #[test]
    fn nop_body_completes_without_fault() {
        let mut h = SignalHarness::install().unwrap();
        let mut a = args();
        let sig = unsafe { h.run(BodyKind::Nop, FaultStrategy::SignalHandler, &mut a) }.unwrap();
        assert_eq!(sig, None);
    }

    #[test]
    fn kernel_load_faults_and_recovers() {
        let mut h = SignalHarness::install().unwrap();
        for _ in 0..1000 {
            let mut a = args();
            a.operand = 0xffff_ffff_8100_0000;
            let sig =
                unsafe { h.run(BodyKind::Touch, FaultStrategy::SignalHandler, &mut a) }.unwrap();
            assert_eq!(sig, Some(libc::SIGSEGV));
        }
    }

    #[test]
    fn privileged_register_reads_fault() {
        let mut h = SignalHarness::install().unwrap();
        for (kind, operand) in [
            (ProbeKind::MovCr, 0),
            (ProbeKind::MovCr, 8),
            (ProbeKind::MovDr, 7),
            (ProbeKind::Rdmsr, 0x10),
        ] {
            let mut a = args();
            a.operand = operand;
            let sig = unsafe { h.run(BodyKind::Probe(kind), FaultStrategy::SignalHandler, &mut a) }
                .unwrap();
            assert!(sig.is_some(), "{kind} {operand}");
        }
    }

    #[test]
    fn unprivileged_read_retires() {
        let mut h = SignalHarness::install().unwrap();
        let mut a = args();
        let sig = unsafe {
            h.run(
                BodyKind::Probe(ProbeKind::Rdtsc),
                FaultStrategy::SignalHandler,
                &mut a,
            )
        }
        .unwrap();
        if sig.is_none() {
            assert!(a.result > 0);
        }
    }

    #[test]
    fn unknown_register_number_is_rejected() {
        let mut h = SignalHarness::install().unwrap();
        let mut a = args();
        a.operand = 5;
        assert!(unsafe {
            h.run(
                BodyKind::Probe(ProbeKind::MovCr),
                FaultStrategy::SignalHandler,
                &mut a,
            )
        }
        .is_err());
    }

    #[test]
    fn speculative_suppression_never_faults() {
        let mut h = SignalHarness::install().unwrap();
        let mut a = args();
        a.operand = 0xffff_ffff_8100_0000;
        let sig = unsafe {
            h.run(
                BodyKind::Touch,
                FaultStrategy::SpeculativeSuppression,
                &mut a,
            )
        }
        .unwrap();
        assert_eq!(sig, None);
        assert_eq!(a.result, 0);
    }
}
