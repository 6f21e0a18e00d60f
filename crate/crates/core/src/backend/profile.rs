//! Leakage profiles driving the simulator.
//!
//! A profile is a JSON document:
//!
//! ```json
//! {
//!   "name": "J4005",
//!   "cpu": { "model": "Intel Celeron J4005", "microcode": "0x3c" },
//!   "seed": 7,
//!   "spurious_hit_rate": 0.01,
//!   "probes": { "rdpmc": { "leak_value": 3405643777 }, "str": "zero_forward" },
//!   "counters": {
//!     "INSTR_RETIRED": { "index": 0, "increments": { "instruction_retired": 1 } }
//!   }
//! }
//! ```
//!
//! Probes not listed are silent. Unknown fields are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CpuIdentity;
use crate::error::{Error, Result};
use crate::harness::MicroEvent;
use crate::probes::ProbeKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeBehavior {
    Silent,
    /// Transiently forwards this value. Timestamp probes forward it plus the
    /// virtual clock; `rdpmc` forwards the live simulated counter when one is
    /// programmed at the operand index.
    LeakValue(u64),
    ZeroForward,
    /// Forwards a constant the counting timer cannot confirm as a timestamp.
    UnverifiedTimestamp,
}

/// Constant forwarded by [`ProbeBehavior::UnverifiedTimestamp`].
pub const UNVERIFIED_TIMESTAMP_PATTERN: u64 = 0x2A2A_2A2A;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimTiming {
    pub hit_cycles: u64,
    pub miss_cycles: u64,
    /// Fault-to-recovery latency charged per transient window.
    pub encode_window_cycles: u64,
    /// Virtual cycles per counting-timer tick.
    pub cycles_per_tick: u64,
}

impl Default for SimTiming {
    fn default() -> Self {
        Self {
            hit_cycles: 50,
            miss_cycles: 400,
            encode_window_cycles: 6655,
            cycles_per_tick: 4,
        }
    }
}

/// How one simulated performance counter reacts to victim events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterModel {
    pub index: u32,
    #[serde(default)]
    pub initial: u64,
    /// Amount added per reported event.
    #[serde(default)]
    pub increments: BTreeMap<MicroEvent, i64>,
    /// Whether events from transiently executed victim code count too.
    #[serde(default)]
    pub counts_speculative: bool,
    /// Added after each transient read of this counter: the leak primitive's
    /// own footprint.
    #[serde(default)]
    pub self_increment: i64,
    /// Standard deviation of rounded Gaussian noise added before each read.
    #[serde(default)]
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelLayout {
    /// Address whose translation is TLB-resident (no page walk on access).
    pub hot_page: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeakageProfile {
    pub name: String,
    #[serde(default)]
    pub cpu: CpuIdentity,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub spurious_hit_rate: f64,
    #[serde(default)]
    pub probes: BTreeMap<ProbeKind, ProbeBehavior>,
    /// Probes architecturally readable from user space (restriction missing).
    #[serde(default)]
    pub permitted_probes: Vec<ProbeKind>,
    #[serde(default)]
    pub degraded_timer: bool,
    #[serde(default)]
    pub timing: SimTiming,
    #[serde(default)]
    pub counters: BTreeMap<String, CounterModel>,
    #[serde(default)]
    pub kernel: Option<KernelLayout>,
}

impl LeakageProfile {
    /// A profile where every probe is silent.
    pub fn silent(name: &str) -> Self {
        Self {
            name: name.into(),
            cpu: CpuIdentity {
                model: "simulated".into(),
                microcode: "0x0".into(),
                microarchitecture: None,
            },
            seed: 0,
            spurious_hit_rate: 0.0,
            probes: BTreeMap::new(),
            permitted_probes: Vec::new(),
            degraded_timer: false,
            timing: SimTiming::default(),
            counters: BTreeMap::new(),
            kernel: None,
        }
    }

    pub fn behavior(&self, probe: ProbeKind) -> ProbeBehavior {
        self.probes
            .get(&probe)
            .copied()
            .unwrap_or(ProbeBehavior::Silent)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let profile: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::ProfileInvalid {
                path,
                message: e.into_inner().to_string(),
            }
        })?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |path: String, message: &str| Error::ProfileInvalid {
            path,
            message: message.into(),
        };
        if !(0.0..=1.0).contains(&self.spurious_hit_rate) {
            return Err(invalid("spurious_hit_rate".into(), "must be within [0, 1]"));
        }
        for (probe, behavior) in &self.probes {
            match behavior {
                ProbeBehavior::LeakValue(0) => {
                    return Err(invalid(
                        format!("probes.{probe}"),
                        "leak_value 0 is indistinguishable from zero forwarding; use zero_forward",
                    ))
                }
                ProbeBehavior::UnverifiedTimestamp if !probe.is_timestamp() => {
                    return Err(invalid(
                        format!("probes.{probe}"),
                        "unverified_timestamp only applies to rdtsc and rdtscp",
                    ))
                }
                _ => {}
            }
        }
        if self.timing.cycles_per_tick == 0 {
            return Err(invalid("timing.cycles_per_tick".into(), "must be positive"));
        }
        let mut indices = Vec::new();
        for (name, model) in &self.counters {
            if name.is_empty() {
                return Err(invalid("counters".into(), "event names must be nonempty"));
            }
            if !(model.noise_sigma.is_finite() && model.noise_sigma >= 0.0) {
                return Err(invalid(
                    format!("counters.{name}.noise_sigma"),
                    "must be finite and non-negative",
                ));
            }
            if indices.contains(&model.index) {
                return Err(invalid(
                    format!("counters.{name}.index"),
                    "two counters share one index",
                ));
            }
            indices.push(model.index);
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn counter_by_index(&self, index: u32) -> Option<(&str, &CounterModel)> {
        self.counters
            .iter()
            .find(|(_, m)| m.index == index)
            .map(|(n, m)| (n.as_str(), m))
    }
}

pub fn load_profile(path: impl AsRef<Path>) -> Result<LeakageProfile> {
    let text = std::fs::read_to_string(path)?;
    LeakageProfile::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_of(text: &str) -> String {
        match LeakageProfile::from_json(text) {
            Err(Error::ProfileInvalid { path, .. }) => path,
            other => panic!("expected ProfileInvalid, got {other:?}"),
        }
    }

    #[test]
    fn minimal_profile_defaults_to_silent() {
        let p = LeakageProfile::from_json(r#"{"name":"x"}"#).unwrap();
        assert_eq!(p.behavior(ProbeKind::Rdpmc), ProbeBehavior::Silent);
        assert_eq!(p.timing.hit_cycles, 50);
        assert_eq!(p.timing.miss_cycles, 400);
    }

    #[test]
    fn behaviors_parse() {
        let p = LeakageProfile::from_json(
            r#"{"name":"x","probes":{"rdfsbase":{"leak_value":171},"str":"zero_forward","rdtsc":"unverified_timestamp"}}"#,
        )
        .unwrap();
        assert_eq!(
            p.behavior(ProbeKind::Rdfsbase),
            ProbeBehavior::LeakValue(0xAB)
        );
        assert_eq!(p.behavior(ProbeKind::Str), ProbeBehavior::ZeroForward);
        assert_eq!(
            p.behavior(ProbeKind::Rdtsc),
            ProbeBehavior::UnverifiedTimestamp
        );
    }

    #[test]
    fn errors_name_the_offending_field() {
        assert_eq!(
            path_of(r#"{"name":"x","probes":{"swapgs":"silent"}}"#),
            "probes.?"
        );
        assert_eq!(
            path_of(r#"{"name":"x","probes":{"rdpmc":"loud"}}"#),
            "probes.?"
        );
        assert_eq!(
            path_of(r#"{"name":"x","spurious_hit_rate":1.5}"#),
            "spurious_hit_rate"
        );
        assert_eq!(path_of(r#"{"name":"x","colour":1}"#), "colour");
        assert_eq!(
            path_of(r#"{"name":"x","probes":{"str":{"leak_value":0}}}"#),
            "probes.str"
        );
        assert_eq!(
            path_of(r#"{"name":"x","probes":{"str":"unverified_timestamp"}}"#),
            "probes.str"
        );
        assert_eq!(path_of(r#"{"name":"x","seed":"seven"}"#), "seed");
    }

    #[test]
    fn malformed_document_is_invalid() {
        assert!(matches!(
            LeakageProfile::from_json("{not json"),
            Err(Error::ProfileInvalid { .. })
        ));
    }

    #[test]
    fn counters_parse_and_validate() {
        let p = LeakageProfile::from_json(
            r#"{"name":"x","counters":{"INSTR_RETIRED":{"index":0,"increments":{"instruction_retired":1},"noise_sigma":2.5}}}"#,
        )
        .unwrap();
        let (name, model) = p.counter_by_index(0).unwrap();
        assert_eq!(name, "INSTR_RETIRED");
        assert_eq!(model.increments[&MicroEvent::InstructionRetired], 1);
        assert_eq!(
            path_of(r#"{"name":"x","counters":{"A":{"index":0},"B":{"index":0}}}"#),
            "counters.B.index"
        );
    }

    #[test]
    fn json_round_trip() {
        let mut p = LeakageProfile::silent("rt");
        p.probes
            .insert(ProbeKind::Rdpmc, ProbeBehavior::LeakValue(u64::MAX));
        let back = LeakageProfile::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
    }
}
