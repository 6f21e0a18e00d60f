//! Simulator profiles carrying the counter models the case studies need.

use crate::backend::profile::KernelLayout;
use crate::backend::{CounterModel, LeakageProfile, ProbeBehavior};
use crate::harness::MicroEvent;
use crate::probes::ProbeKind;

use super::kaslr::WALK_EVENT;
use super::rsa::BRANCH_EVENT;
use super::spectre::DIVIDER_EVENT;
use super::zigzagger::INSTRUCTION_EVENT;

/// Fixed-function instruction counter, as `rdpmc` addresses it.
pub const INSTRUCTION_INDEX: u32 = 0x4000_0000;
pub const DIVIDER_INDEX: u32 = 1;
pub const BRANCH_INDEX: u32 = 2;
pub const WALK_INDEX: u32 = 3;
/// Walk-counter units added by one page walk.
pub const WALK_UNITS: i64 = 24;
/// Value a transient `rdpmc` forwards for an index without a counter model.
pub const UNPROGRAMMED_COUNTER_VALUE: u64 = 0x00C0_FFEE;

fn model(index: u32, event: MicroEvent, increment: i64, self_increment: i64) -> CounterModel {
    CounterModel {
        index,
        initial: 0x1000 + index as u64 * 0x111,
        increments: [(event, increment)].into_iter().collect(),
        counts_speculative: true,
        self_increment,
        noise_sigma: 0.0,
    }
}

/// A CPU whose `rdpmc` leaks, with the four case-study counters programmed
/// and noiseless.
pub fn counter_profile(name: &str) -> LeakageProfile {
    let mut p = LeakageProfile::silent(name);
    p.probes.insert(
        ProbeKind::Rdpmc,
        ProbeBehavior::LeakValue(UNPROGRAMMED_COUNTER_VALUE),
    );
    p.counters.insert(
        DIVIDER_EVENT.into(),
        model(DIVIDER_INDEX, MicroEvent::DividerBusy, 1, 0),
    );
    let mut branches = model(BRANCH_INDEX, MicroEvent::TakenBranch, 1, 40);
    branches.counts_speculative = false;
    p.counters.insert(BRANCH_EVENT.into(), branches);
    let mut instructions = model(INSTRUCTION_INDEX, MicroEvent::InstructionRetired, 1, 300);
    instructions.counts_speculative = false;
    p.counters.insert(INSTRUCTION_EVENT.into(), instructions);
    p.counters.insert(
        WALK_EVENT.into(),
        model(WALK_INDEX, MicroEvent::PageWalk, WALK_UNITS, 0),
    );
    p
}

fn with_noise(mut p: LeakageProfile, event: &str, sigma: f64) -> LeakageProfile {
    if let Some(m) = p.counters.get_mut(event) {
        m.noise_sigma = sigma;
    }
    p
}

pub fn spectre_profile(sigma: f64) -> LeakageProfile {
    with_noise(counter_profile("spectre"), DIVIDER_EVENT, sigma)
}

/// Kernel mapped at `base`; its first page is TLB-resident.
pub fn kaslr_profile(base: u64, sigma: f64) -> LeakageProfile {
    let mut p = with_noise(counter_profile("kaslr"), WALK_EVENT, sigma);
    p.kernel = Some(KernelLayout { hot_page: base });
    p
}

pub fn rsa_profile(sigma: f64) -> LeakageProfile {
    with_noise(counter_profile("rsa"), BRANCH_EVENT, sigma)
}

pub fn zigzagger_profile(sigma: f64) -> LeakageProfile {
    with_noise(counter_profile("zigzagger"), INSTRUCTION_EVENT, sigma)
}
