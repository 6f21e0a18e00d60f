//! Seeded simulator: a hot/cold channel buffer, profile-driven transient
//! reads, a virtual clock and event-driven performance counters.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::profile::{CounterModel, LeakageProfile, ProbeBehavior, UNVERIFIED_TIMESTAMP_PATTERN};
use super::{Backend, BackendCapabilities, BackendKind, CpuIdentity};
use crate::channel::{Channel, ChannelConfig, ChannelMode, SimMedium, DEFAULT_STRIDE};
use crate::counterleak::CounterSelector;
use crate::error::{Error, Result};
use crate::harness::{
    BranchSite, MicroEvent, TimerReliability, TransientBody, TransientOutcome, VictimContext,
};
use crate::probes::ProbeKind;

const SIGSEGV: i32 = 11;
const PAGE_MASK: u64 = !0xFFF;
/// Calibration passes on the simulator; latencies are fixed so a few suffice.
const SIM_CALIBRATION_ITERATIONS: usize = 64;
/// Virtual cycles charged for a transient body without a faulting access.
const NOP_CYCLES: u64 = 100;

#[derive(Debug, Clone)]
struct SimCounter {
    model: CounterModel,
    value: u64,
}

#[derive(Debug, Clone)]
pub struct SimBackend {
    profile: LeakageProfile,
    seed: u64,
    channel: Channel<SimMedium>,
    reconfigurations: u64,
    /// Virtual cycles outside channel reloads.
    clock: u64,
    counters: BTreeMap<u32, SimCounter>,
    noise_rng: ChaCha8Rng,
    training: HashMap<BranchSite, u32>,
    speculative: bool,
}

impl SimBackend {
    pub fn new(profile: LeakageProfile) -> Result<Self> {
        let seed = profile.seed;
        Self::with_seed(profile, seed)
    }

    pub fn with_seed(profile: LeakageProfile, seed: u64) -> Result<Self> {
        profile.validate()?;
        let counters = profile
            .counters
            .values()
            .map(|m| {
                (
                    m.index,
                    SimCounter {
                        model: m.clone(),
                        value: m.initial,
                    },
                )
            })
            .collect();
        let placeholder = Self::build_channel(&profile, seed, 0, DEFAULT_STRIDE, 1, 8)?;
        Ok(Self {
            profile,
            seed,
            channel: placeholder,
            reconfigurations: 0,
            clock: 0,
            counters,
            noise_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6E6F_6973_6500),
            training: HashMap::new(),
            speculative: false,
        })
    }

    fn build_channel(
        profile: &LeakageProfile,
        seed: u64,
        generation: u64,
        stride: usize,
        symbols: usize,
        bits: u32,
    ) -> Result<Channel<SimMedium>> {
        if !(1..=8).contains(&bits) {
            return Err(Error::InvalidGeometry(format!(
                "{bits}-bit symbols are not supported"
            )));
        }
        let config = ChannelConfig::new(1 << bits, stride, symbols, ChannelMode::Simulation)?;
        let medium = SimMedium::new(
            config.buffer_len(),
            profile.timing.hit_cycles,
            profile.timing.miss_cycles,
        )
        .with_spurious_hits(
            profile.spurious_hit_rate,
            seed.wrapping_add(generation.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        let mut channel = Channel::new(config, medium)?;
        channel.calibrate(SIM_CALIBRATION_ITERATIONS)?;
        Ok(channel)
    }

    pub fn profile(&self) -> &LeakageProfile {
        &self.profile
    }

    /// Current virtual time in cycles.
    pub fn now(&self) -> u64 {
        self.clock + self.channel.medium().elapsed_cycles()
    }

    /// Advance the virtual clock, e.g. to model work between samples.
    pub fn advance(&mut self, cycles: u64) {
        self.clock += cycles;
    }

    pub fn counter_value(&self, index: u32) -> Option<u64> {
        self.counters.get(&index).map(|c| c.value)
    }

    pub fn set_counter_value(&mut self, index: u32, value: u64) -> Result<()> {
        let counter = self
            .counters
            .get_mut(&index)
            .ok_or_else(|| Error::CounterUnavailable(format!("index {index}")))?;
        counter.value = value;
        Ok(())
    }

    /// Whether the branch at `site` is currently predicted taken.
    pub fn is_mistrained(&self, site: BranchSite) -> bool {
        self.training.get(&site).copied().unwrap_or(0) > 0
    }

    fn permitted(&self, probe: ProbeKind) -> bool {
        self.profile.permitted_probes.contains(&probe)
    }

    /// The value an architectural read would return.
    fn register_value(&self, probe: ProbeKind, operand: u64) -> u64 {
        if probe == ProbeKind::Rdpmc {
            if let Some(c) = self.counters.get(&(operand as u32)) {
                return c.value;
            }
        }
        let base = match self.profile.behavior(probe) {
            ProbeBehavior::LeakValue(v) => v,
            _ => 0x5A5A_0000 | ((probe as u64) << 8) | (operand & 0xFF),
        };
        if probe.is_timestamp() {
            base.wrapping_add(self.now())
        } else {
            base
        }
    }

    /// The value forwarded to dependent transient instructions, if any.
    fn transient_value(&self, probe: ProbeKind, operand: u64) -> Option<u64> {
        if self.permitted(probe) {
            return Some(self.register_value(probe, operand));
        }
        match self.profile.behavior(probe) {
            ProbeBehavior::Silent => None,
            ProbeBehavior::LeakValue(_) => Some(self.register_value(probe, operand)),
            ProbeBehavior::ZeroForward => Some(0),
            ProbeBehavior::UnverifiedTimestamp => Some(UNVERIFIED_TIMESTAMP_PATTERN),
        }
    }

    fn apply_read_noise(&mut self, index: u32) {
        if let Some(counter) = self.counters.get_mut(&index) {
            let sigma = counter.model.noise_sigma;
            if sigma > 0.0 {
                let noise = Normal::new(0.0, sigma)
                    .expect("validated sigma")
                    .sample(&mut self.noise_rng)
                    .round() as i64;
                counter.value = counter.value.wrapping_add_signed(noise);
            }
        }
    }

    fn apply_self_increment(&mut self, index: u32) {
        if let Some(counter) = self.counters.get_mut(&index) {
            counter.value = counter
                .value
                .wrapping_add_signed(counter.model.self_increment);
        }
    }
}

impl Backend for SimBackend {
    type Medium = SimMedium;

    fn kind(&self) -> BackendKind {
        BackendKind::Simulation
    }

    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities {
            has_cycle_counter: true,
            has_transactional_memory: true,
            has_sibling_threads: true,
            is_simulation: true,
        }
    }

    fn identity(&self) -> CpuIdentity {
        self.profile.cpu.clone()
    }

    fn seed(&self) -> Option<u64> {
        Some(self.seed)
    }

    fn channel(&mut self) -> &mut Channel<SimMedium> {
        &mut self.channel
    }

    fn configure_channel(&mut self, stride: usize, symbols: usize, bits: u32) -> Result<()> {
        self.reconfigurations += 1;
        let channel = Self::build_channel(
            &self.profile,
            self.seed,
            self.reconfigurations,
            stride,
            symbols,
            bits,
        )?;
        self.clock += self.channel.medium().elapsed_cycles();
        self.channel = channel;
        Ok(())
    }

    fn run_transient(&mut self, body: &TransientBody) -> Result<TransientOutcome> {
        let window_cycles = self.profile.timing.encode_window_cycles;
        match *body {
            TransientBody::Nop => {
                self.clock += NOP_CYCLES;
                Ok(TransientOutcome {
                    faulted: false,
                    signal: None,
                    encode_cycles: NOP_CYCLES,
                })
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
                let counter_read = probe == ProbeKind::Rdpmc;
                if counter_read {
                    self.apply_read_noise(operand as u32);
                }
                if let Some(value) = self.transient_value(probe, operand) {
                    for symbol in 0..window.symbols {
                        self.channel.encode(window.slot(value, symbol), symbol);
                    }
                }
                if counter_read {
                    self.apply_self_increment(operand as u32);
                }
                self.clock += window_cycles;
                let faulted = !self.permitted(probe);
                Ok(TransientOutcome {
                    faulted,
                    signal: faulted.then_some(SIGSEGV),
                    encode_cycles: window_cycles,
                })
            }
            TransientBody::Touch { address } => {
                let hot = self
                    .profile
                    .kernel
                    .is_some_and(|k| k.hot_page & PAGE_MASK == address & PAGE_MASK);
                if !hot {
                    self.retire(MicroEvent::PageWalk, 1);
                }
                self.clock += window_cycles;
                Ok(TransientOutcome {
                    faulted: true,
                    signal: Some(SIGSEGV),
                    encode_cycles: window_cycles,
                })
            }
        }
    }

    fn architectural_read(&mut self, probe: ProbeKind, operand: u64) -> Result<Option<u64>> {
        Ok(self
            .permitted(probe)
            .then(|| self.register_value(probe, operand)))
    }

    fn cycles(&mut self) -> u64 {
        self.now()
    }

    fn timer_ticks(&mut self) -> Result<u64> {
        Ok(self.now() / self.profile.timing.cycles_per_tick)
    }

    fn timer_reliability(&mut self) -> TimerReliability {
        if self.profile.degraded_timer {
            TimerReliability::Degraded
        } else {
            TimerReliability::Reliable
        }
    }

    fn victim(&mut self) -> &mut dyn VictimContext {
        self
    }

    fn program_counter(&mut self, selector: &CounterSelector) -> Result<()> {
        match self.profile.counters.get(&selector.event_name) {
            Some(model) if model.index == selector.counter_index => Ok(()),
            Some(model) => Err(Error::CounterUnavailable(format!(
                "{} is counted by index {}, not {}",
                selector.event_name, model.index, selector.counter_index
            ))),
            None => Err(Error::CounterUnavailable(format!(
                "profile `{}` has no model for {}",
                self.profile.name, selector.event_name
            ))),
        }
    }
}

impl VictimContext for SimBackend {
    fn retire(&mut self, event: MicroEvent, count: u64) {
        let speculative = self.speculative;
        for counter in self.counters.values_mut() {
            if speculative && !counter.model.counts_speculative {
                continue;
            }
            if let Some(&inc) = counter.model.increments.get(&event) {
                counter.value = counter
                    .value
                    .wrapping_add_signed(inc.wrapping_mul(count as i64));
            }
        }
    }

    fn guarded(
        &mut self,
        site: BranchSite,
        condition: bool,
        body: &mut dyn FnMut(&mut dyn VictimContext),
    ) {
        if condition {
            *self.training.entry(site).or_insert(0) += 1;
            body(self);
        } else {
            if self.is_mistrained(site) && !self.speculative {
                self.speculative = true;
                body(self);
                self.speculative = false;
            }
            self.training.insert(site, 0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::EncodeWindow;

    fn backend_with(probe: ProbeKind, behavior: ProbeBehavior) -> SimBackend {
        let mut profile = LeakageProfile::silent("t");
        profile.probes.insert(probe, behavior);
        SimBackend::new(profile).unwrap()
    }

    fn read_byte(b: &mut SimBackend, probe: ProbeKind, offset: u32) -> Vec<usize> {
        b.channel().flush_all();
        b.run_transient(&TransientBody::Probe {
            probe,
            operand: 0,
            window: EncodeWindow::byte_at(offset),
        })
        .unwrap();
        b.channel()
            .decode(0)
            .unwrap()
            .hit_slots
            .into_iter()
            .collect()
    }

    #[test]
    fn calibrated_on_construction() {
        let mut b = SimBackend::new(LeakageProfile::silent("t")).unwrap();
        assert_eq!(b.channel().config().threshold_cycles, Some(225));
    }

    #[test]
    fn injected_value_selects_byte() {
        let mut b = backend_with(ProbeKind::Rdfsbase, ProbeBehavior::LeakValue(0xDEAD_BEEF));
        assert_eq!(read_byte(&mut b, ProbeKind::Rdfsbase, 0), [0xEF]);
        assert_eq!(read_byte(&mut b, ProbeKind::Rdfsbase, 24), [0xDE]);
        let mut b = backend_with(ProbeKind::Rdfsbase, ProbeBehavior::LeakValue(0x2A));
        assert_eq!(read_byte(&mut b, ProbeKind::Rdfsbase, 0), [0x2A]);
    }

    #[test]
    fn silent_and_zero_forward() {
        let mut b = backend_with(ProbeKind::Str, ProbeBehavior::ZeroForward);
        assert!(read_byte(&mut b, ProbeKind::Rdpmc, 0).is_empty());
        for _ in 0..1000 {
            assert_eq!(read_byte(&mut b, ProbeKind::Str, 0), [0]);
        }
        b.channel().flush_all();
        assert!(b.channel().decode(0).unwrap().hit_slots.is_empty());
    }

    #[test]
    fn restricted_probes_fault_and_permitted_ones_read() {
        let mut profile = LeakageProfile::silent("t");
        profile.permitted_probes.push(ProbeKind::Rdtsc);
        let mut b = SimBackend::new(profile).unwrap();
        assert!(b.architectural_read(ProbeKind::Rdtsc, 0).unwrap().is_some());
        assert!(b.architectural_read(ProbeKind::Rdpmc, 0).unwrap().is_none());
        let out = b
            .run_transient(&TransientBody::Probe {
                probe: ProbeKind::Rdpmc,
                operand: 0,
                window: EncodeWindow::byte_at(0),
            })
            .unwrap();
        assert!(out.faulted);
        assert_eq!(out.encode_cycles, 6655);
        let out = b.run_transient(&TransientBody::Nop).unwrap();
        assert!(!out.faulted);
    }

    #[test]
    fn mismatched_window_is_a_harness_failure() {
        let mut b = backend_with(ProbeKind::Str, ProbeBehavior::ZeroForward);
        let err = b.run_transient(&TransientBody::Probe {
            probe: ProbeKind::Str,
            operand: 0,
            window: EncodeWindow::low_bytes(2),
        });
        assert!(matches!(err, Err(Error::HarnessFailure(_))));
    }

    fn counter_profile(speculative: bool) -> LeakageProfile {
        let mut profile = LeakageProfile::silent("t");
        profile.counters.insert(
            "BR_INST_RETIRED.NEAR_TAKEN".into(),
            CounterModel {
                index: 0,
                initial: 0,
                increments: [(MicroEvent::TakenBranch, 1)].into_iter().collect(),
                counts_speculative: speculative,
                self_increment: 0,
                noise_sigma: 0.0,
            },
        );
        profile
    }

    #[test]
    fn speculative_body_runs_only_after_training() {
        let mut b = SimBackend::new(counter_profile(true)).unwrap();
        let mut body = |ctx: &mut dyn VictimContext| ctx.retire(MicroEvent::TakenBranch, 1);
        b.guarded(1, false, &mut body);
        assert_eq!(b.counter_value(0), Some(0));
        b.guarded(1, true, &mut body);
        assert!(b.is_mistrained(1));
        assert_eq!(b.counter_value(0), Some(1));
        b.guarded(1, false, &mut body);
        assert_eq!(b.counter_value(0), Some(2));
        assert!(!b.is_mistrained(1));

        let mut b = SimBackend::new(counter_profile(false)).unwrap();
        b.guarded(1, true, &mut body);
        b.guarded(1, false, &mut body);
        assert_eq!(b.counter_value(0), Some(1));
    }

    #[test]
    fn same_seed_same_noise() {
        let mut profile = counter_profile(false);
        profile.counters.values_mut().next().unwrap().noise_sigma = 5.0;
        let run = |seed| {
            let mut b = SimBackend::with_seed(profile.clone(), seed).unwrap();
            (0..20)
                .map(|_| {
                    b.run_transient(&TransientBody::Probe {
                        probe: ProbeKind::Rdpmc,
                        operand: 0,
                        window: EncodeWindow::byte_at(0),
                    })
                    .unwrap();
                    b.counter_value(0).unwrap()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn page_walks_skip_the_hot_page() {
        let mut profile = LeakageProfile::silent("t");
        profile.counters.insert(
            "WALK".into(),
            CounterModel {
                index: 1,
                initial: 0,
                increments: [(MicroEvent::PageWalk, 30)].into_iter().collect(),
                counts_speculative: false,
                self_increment: 0,
                noise_sigma: 0.0,
            },
        );
        profile.kernel = Some(super::super::profile::KernelLayout {
            hot_page: 0xffff_ffff_8120_0000,
        });
        let mut b = SimBackend::new(profile).unwrap();
        b.run_transient(&TransientBody::Touch {
            address: 0xffff_ffff_8100_0000,
        })
        .unwrap();
        assert_eq!(b.counter_value(1), Some(30));
        b.run_transient(&TransientBody::Touch {
            address: 0xffff_ffff_8120_0000,
        })
        .unwrap();
        assert_eq!(b.counter_value(1), Some(30));
    }
}
