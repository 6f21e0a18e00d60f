//! Machine reports: JSON document and Markdown table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::classify::{ClassifierParams, LeakStatus, LeakVerdict};
use super::ProbeKind;
use crate::backend::BackendKind;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeOutcome {
    Verdict(LeakVerdict),
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: ProbeKind,
    pub outcome: ProbeOutcome,
}

impl ProbeReport {
    pub fn status(&self) -> Option<LeakStatus> {
        match &self.outcome {
            ProbeOutcome::Verdict(v) => Some(v.status),
            ProbeOutcome::Skipped { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineReport {
    pub schema_version: u32,
    pub cpu_model: String,
    pub microcode_revision: String,
    pub microarchitecture: Option<String>,
    pub backend: BackendKind,
    pub profile: Option<String>,
    pub seed: Option<u64>,
    pub stride_used: Vec<usize>,
    pub rounds: u64,
    pub coverage_bits: u32,
    pub classifier: ClassifierParams,
    pub timestamp: u64,
    pub probes: Vec<ProbeReport>,
}

impl MachineReport {
    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn status_of(&self, probe: ProbeKind) -> Option<LeakStatus> {
        self.probes
            .iter()
            .find(|p| p.probe == probe)
            .and_then(ProbeReport::status)
    }

    /// Leaking probes in catalog order, e.g. `["rdfsbase", "str (ZF)"]`.
    pub fn leaking_summary(&self) -> Vec<String> {
        self.probes
            .iter()
            .filter_map(|p| match p.status()? {
                LeakStatus::NoLeak => None,
                status => Some(match status.annotation() {
                    Some(a) => format!("{} ({a})", p.probe),
                    None => p.probe.to_string(),
                }),
            })
            .collect()
    }
}

fn evidence_cell(verdict: &LeakVerdict) -> String {
    if let Some(ts) = &verdict.timestamp {
        let mut cell = format!(
            "{}/{} complete samples",
            ts.complete_samples, verdict.rounds
        );
        if let Some(r) = ts.correlation {
            let _ = write!(cell, ", r={r:.3}");
        }
        if verdict.status != LeakStatus::NoLeak {
            let _ = write!(
                cell,
                ", timer {}",
                match ts.timer {
                    crate::harness::TimerReliability::Reliable => "reliable",
                    crate::harness::TimerReliability::Degraded => "degraded",
                }
            );
        }
        return cell;
    }
    let parts: Vec<String> = verdict
        .operands
        .iter()
        .filter(|o| o.status == verdict.status && o.status != LeakStatus::NoLeak)
        .map(|o| {
            let hits = o
                .bytes
                .iter()
                .filter(|b| b.value.is_some())
                .map(|b| b.hits)
                .min()
                .unwrap_or(0);
            match (o.status, o.value) {
                (LeakStatus::Leaks, Some(v)) => {
                    format!("op {:#x}: {v:#x} (min {hits} hits)", o.operand)
                }
                (LeakStatus::Leaks, None) => {
                    let bytes: Vec<String> = o
                        .bytes
                        .iter()
                        .filter_map(|b| b.value.map(|v| format!("[{}]={v:#04x}", b.bit_offset)))
                        .collect();
                    format!("op {:#x}: {}", o.operand, bytes.join(" "))
                }
                _ => format!("op {:#x}: 0 (min {hits} hits)", o.operand),
            }
        })
        .collect();
    if parts.is_empty() {
        "--".into()
    } else {
        parts.join("; ")
    }
}

/// Render a report as Markdown: a header list and one table row per probe.
pub fn render_markdown(report: &MachineReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Register leakage report");
    let _ = writeln!(out);
    let _ = writeln!(out, "- CPU: {}", report.cpu_model);
    let _ = writeln!(out, "- Microcode: {}", report.microcode_revision);
    if let Some(arch) = &report.microarchitecture {
        let _ = writeln!(out, "- Microarchitecture: {arch}");
    }
    let mut backend = report.backend.to_string();
    if let Some(profile) = &report.profile {
        let _ = write!(backend, ", profile {profile}");
    }
    if let Some(seed) = report.seed {
        let _ = write!(backend, ", seed {seed}");
    }
    let _ = writeln!(out, "- Backend: {backend}");
    let strides: Vec<String> = report.stride_used.iter().map(|s| s.to_string()).collect();
    let _ = writeln!(out, "- Strides: {}", strides.join(", "));
    let _ = writeln!(out, "- Rounds per offset: {}", report.rounds);
    let leaking = report.leaking_summary();
    let _ = writeln!(
        out,
        "- Leaking: {}",
        if leaking.is_empty() {
            "--".to_string()
        } else {
            leaking.join(", ")
        }
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "| Probe | Verdict | Evidence | Rounds |");
    let _ = writeln!(out, "|---|---|---|---|");
    for p in &report.probes {
        match &p.outcome {
            ProbeOutcome::Verdict(v) => {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} |",
                    p.probe,
                    v.status,
                    evidence_cell(v),
                    v.rounds
                );
            }
            ProbeOutcome::Skipped { reason } => {
                let _ = writeln!(
                    out,
                    "| {} | Skipped | {} | -- |",
                    p.probe,
                    reason.replace('|', "/")
                );
            }
        }
    }
    out
}
