//! Where transient values come from: real hardware or a seeded simulator.

pub mod profile;
pub mod sim;

#[cfg(all(target_arch = "x86_64", target_os = "linux"))]
pub mod hw;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::channel::{Channel, Medium};
use crate::counterleak::CounterSelector;
use crate::error::{Error, Result};
use crate::harness::{TimerReliability, TransientBody, TransientOutcome, VictimContext};
use crate::probes::ProbeKind;

pub use profile::{load_profile, CounterModel, LeakageProfile, ProbeBehavior};
pub use sim::SimBackend;

/// Environment variable naming the backend the test suites run against.
pub const BACKEND_ENV: &str = "REGLEAK_BACKEND";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Hardware,
    Simulation,
}

impl BackendKind {
    /// Backend chosen by `REGLEAK_BACKEND` (`hw` or `sim`); simulation when unset.
    pub fn from_env() -> Result<Self> {
        match std::env::var(BACKEND_ENV) {
            Ok(v) => v.parse(),
            Err(_) => Ok(BackendKind::Simulation),
        }
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hw" | "hardware" => Ok(BackendKind::Hardware),
            "sim" | "simulation" => Ok(BackendKind::Simulation),
            other => Err(Error::InvalidArgument(format!("unknown backend `{other}`"))),
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Hardware => "hw",
            BackendKind::Simulation => "sim",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCapabilities {
    pub has_cycle_counter: bool,
    pub has_transactional_memory: bool,
    pub has_sibling_threads: bool,
    pub is_simulation: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CpuIdentity {
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub microcode: String,
    #[serde(default)]
    pub microarchitecture: Option<String>,
}

pub trait Backend {
    type Medium: Medium;

    fn kind(&self) -> BackendKind;
    fn capabilities(&self) -> BackendCapabilities;
    fn identity(&self) -> CpuIdentity;
    fn seed(&self) -> Option<u64> {
        None
    }

    fn channel(&mut self) -> &mut Channel<Self::Medium>;

    /// Reallocate the channel for `symbols` symbols of `bits` bits at
    /// `stride` bytes per slot, and calibrate it.
    fn configure_channel(&mut self, stride: usize, symbols: usize, bits: u32) -> Result<()>;

    fn run_transient(&mut self, body: &TransientBody) -> Result<TransientOutcome>;

    /// Architectural (non-transient) read; `None` when the instruction
    /// faults for user space.
    fn architectural_read(&mut self, probe: ProbeKind, operand: u64) -> Result<Option<u64>>;

    /// Per-probe setup before measuring (e.g. trapping timestamp reads).
    fn enter_probe(&mut self, _probe: ProbeKind) -> Result<()> {
        Ok(())
    }

    fn leave_probe(&mut self, _probe: ProbeKind) {}

    /// Cycle counter reading, used for cost accounting.
    fn cycles(&mut self) -> u64;

    /// Counting-worker timer reading.
    fn timer_ticks(&mut self) -> Result<u64>;

    fn timer_reliability(&mut self) -> TimerReliability;

    fn victim(&mut self) -> &mut dyn VictimContext;

    /// Make sure the selected performance counter is counting.
    fn program_counter(&mut self, selector: &CounterSelector) -> Result<()>;
}
