//! Privileged register probes: the catalog, the per-probe test loop and the
//! verdict classifier.

mod classify;
mod report;
mod scan;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use classify::{
    classify_offsets, classify_timestamps, timestamp_correlation, ByteEvidence, ClassifierParams,
    LeakStatus, LeakVerdict, OffsetTally, OperandEvidence, TimestampEvidence, TimestampSample,
    ValueCount,
};
pub use report::{
    render_markdown, MachineReport, ProbeOutcome, ProbeReport, REPORT_SCHEMA_VERSION,
};
pub use scan::{full_scan, run_probe, sweep_strides, verify_timestamp_leak, ScanOptions};

/// Model-specific registers probed by `rdmsr`: time stamp counter, APIC
/// base, platform info and EFER. All are readable on every x86-64 part.
pub const DEFAULT_MSR_ADDRESSES: [u64; 4] = [0x10, 0x1B, 0xCE, 0xC000_0080];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Rdpmc,
    Rdtsc,
    Rdtscp,
    MovCr,
    MovDr,
    Rdfsbase,
    Rdgsbase,
    Rdmsr,
    Str,
    Sldt,
    Sidt,
    Sgdt,
    Smsw,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 13] = [
        ProbeKind::Rdpmc,
        ProbeKind::Rdtsc,
        ProbeKind::Rdtscp,
        ProbeKind::MovCr,
        ProbeKind::MovDr,
        ProbeKind::Rdfsbase,
        ProbeKind::Rdgsbase,
        ProbeKind::Rdmsr,
        ProbeKind::Str,
        ProbeKind::Sldt,
        ProbeKind::Sidt,
        ProbeKind::Sgdt,
        ProbeKind::Smsw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Rdpmc => "rdpmc",
            ProbeKind::Rdtsc => "rdtsc",
            ProbeKind::Rdtscp => "rdtscp",
            ProbeKind::MovCr => "mov_cr",
            ProbeKind::MovDr => "mov_dr",
            ProbeKind::Rdfsbase => "rdfsbase",
            ProbeKind::Rdgsbase => "rdgsbase",
            ProbeKind::Rdmsr => "rdmsr",
            ProbeKind::Str => "str",
            ProbeKind::Sldt => "sldt",
            ProbeKind::Sidt => "sidt",
            ProbeKind::Sgdt => "sgdt",
            ProbeKind::Smsw => "smsw",
        }
    }

    /// Probes whose value is a running timestamp and needs the correlation
    /// check instead of a fixed-value vote.
    pub fn is_timestamp(self) -> bool {
        matches!(self, ProbeKind::Rdtsc | ProbeKind::Rdtscp)
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        ProbeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown probe `{s}`")))
    }
}

/// The configuration that makes an instruction privileged for user space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Restriction {
    /// `/sys/devices/cpu/rdpmc` set to 0 (CR4.PCE clear).
    PerfCounterUserAccessDisabled,
    /// Timestamp reads trap (CR4.TSD, `PR_SET_TSC`).
    TimestampUserAccessDisabled,
    /// `nofsgsbase` on the kernel command line (CR4.FSGSBASE clear).
    FsGsBaseDisabled,
    /// User-mode instruction prevention (CR4.UMIP).
    Umip,
    /// Ring-0 only instruction; nothing to configure.
    AlwaysPrivileged,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub kind: ProbeKind,
    pub instruction: String,
    pub details: String,
    pub operand_setup: String,
    pub operands: Vec<u64>,
    pub leak_window_bits: u32,
    pub requires_restriction: Restriction,
}

impl ProbeSpec {
    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn for_kind(kind: ProbeKind) -> Self {
        use ProbeKind::*;
        use Restriction::*;
        let (instruction, details, operand_setup, operands, restriction): (
            &str,
            &str,
            &str,
            Vec<u64>,
            Restriction,
        ) = match kind {
            Rdpmc => (
                "rdpmc",
                "performance counter",
                "ecx = counter index",
                vec![0],
                PerfCounterUserAccessDisabled,
            ),
            Rdtsc => (
                "rdtsc",
                "time stamp counter",
                "none",
                vec![0],
                TimestampUserAccessDisabled,
            ),
            Rdtscp => (
                "rdtscp",
                "time stamp counter and TSC_AUX",
                "none",
                vec![0],
                TimestampUserAccessDisabled,
            ),
            MovCr => (
                "mov rax, crN",
                "control registers",
                "N = control register number",
                vec![0, 2, 3, 4, 8],
                AlwaysPrivileged,
            ),
            MovDr => (
                "mov rax, drN",
                "debug registers",
                "N = debug register number",
                (0..8).collect(),
                AlwaysPrivileged,
            ),
            Rdfsbase => (
                "rdfsbase rax",
                "FS segment base",
                "none",
                vec![0],
                FsGsBaseDisabled,
            ),
            Rdgsbase => (
                "rdgsbase rax",
                "GS segment base",
                "none",
                vec![0],
                FsGsBaseDisabled,
            ),
            Rdmsr => (
                "rdmsr",
                "model specific registers",
                "ecx = MSR address",
                DEFAULT_MSR_ADDRESSES.to_vec(),
                AlwaysPrivileged,
            ),
            Str => ("str ax", "task register selector", "none", vec![0], Umip),
            Sldt => (
                "sldt ax",
                "local descriptor table selector",
                "none",
                vec![0],
                Umip,
            ),
            Sidt => (
                "sidt [mem]",
                "interrupt descriptor table base",
                "none",
                vec![0],
                Umip,
            ),
            Sgdt => (
                "sgdt [mem]",
                "global descriptor table base",
                "none",
                vec![0],
                Umip,
            ),
            Smsw => ("smsw ax", "machine status word", "none", vec![0], Umip),
        };
        Self {
            kind,
            instruction: instruction.into(),
            details: details.into(),
            operand_setup: operand_setup.into(),
            operands,
            leak_window_bits: 8,
            requires_restriction: restriction,
        }
    }

    pub fn with_operands(mut self, operands: Vec<u64>) -> Self {
        self.operands = operands;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub probes: Vec<ProbeSpec>,
}

impl Default for Catalog {
    fn default() -> Self {
        Self::full()
    }
}

impl Catalog {
    pub fn full() -> Self {
        Self {
            probes: ProbeKind::ALL
                .into_iter()
                .map(ProbeSpec::for_kind)
                .collect(),
        }
    }

    pub fn empty() -> Self {
        Self { probes: Vec::new() }
    }

    /// Keep only the named probes, in catalog order.
    pub fn select<S: AsRef<str>>(&self, names: &[S]) -> Result<Self, Error> {
        let kinds = names
            .iter()
            .map(|n| n.as_ref().parse::<ProbeKind>())
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            probes: self
                .probes
                .iter()
                .filter(|p| kinds.contains(&p.kind))
                .cloned()
                .collect(),
        })
    }

    pub fn get(&self, kind: ProbeKind) -> Option<&ProbeSpec> {
        self.probes.iter().find(|p| p.kind == kind)
    }

    pub fn get_mut(&mut self, kind: ProbeKind) -> Option<&mut ProbeSpec> {
        self.probes.iter_mut().find(|p| p.kind == kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_has_thirteen_distinct_rows() {
        let catalog = Catalog::full();
        assert_eq!(catalog.probes.len(), 13);
        let mut names: Vec<_> = catalog.probes.iter().map(|p| p.name()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 13);
        assert!(!names.contains(&"swapgs"));
        assert!(!names.contains(&"xgetbv"));
        assert!(catalog.probes.iter().all(|p| p.leak_window_bits == 8));
    }

    #[test]
    fn names_round_trip() {
        for kind in ProbeKind::ALL {
            assert_eq!(kind.name().parse::<ProbeKind>().unwrap(), kind);
        }
        assert!("xgetbv".parse::<ProbeKind>().is_err());
    }

    #[test]
    fn select_keeps_catalog_order() {
        let sel = Catalog::full().select(&["str", "rdpmc"]).unwrap();
        let names: Vec<_> = sel.probes.iter().map(|p| p.name()).collect();
        assert_eq!(names, ["rdpmc", "str"]);
    }

    #[test]
    fn control_and_debug_register_operands() {
        let c = Catalog::full();
        assert_eq!(c.get(ProbeKind::MovCr).unwrap().operands, [0, 2, 3, 4, 8]);
        assert_eq!(c.get(ProbeKind::MovDr).unwrap().operands.len(), 8);
    }
}
