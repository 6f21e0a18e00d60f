//! Binding acceptance suite. Runs every criterion, prints one PASS/FAIL line
//! each and exits nonzero if any failed.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use regleak::backend::{
    load_profile, Backend, CounterModel, LeakageProfile, ProbeBehavior, SimBackend,
};
use regleak::channel::HARDWARE_STRIDES;
use regleak::counterleak::{CounterLeak, CounterSelector, DEFAULT_RETRIES};
use regleak::harness::{EncodeWindow, MicroEvent, NativeContext, TransientBody};
use regleak::probes::{
    full_scan, render_markdown, Catalog, LeakStatus, MachineReport, ProbeKind, ProbeOutcome,
    ScanOptions,
};
use regleak::studies::presets::{
    kaslr_profile, spectre_profile, zigzagger_profile, DIVIDER_INDEX, INSTRUCTION_INDEX, WALK_INDEX,
};
use regleak::studies::{kaslr, rsa, spectre, zigzagger};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant, detail: String) -> Outcome {
    let took = start.elapsed();
    if took > limit {
        Err(format!("{detail}; took {took:.1?}, limit {limit:?}"))
    } else {
        Ok(format!("{detail}; {took:.1?}"))
    }
}

fn statuses(report: &MachineReport) -> BTreeMap<ProbeKind, LeakStatus> {
    report
        .probes
        .iter()
        .map(|p| match &p.outcome {
            ProbeOutcome::Verdict(v) => (p.probe, v.status),
            ProbeOutcome::Skipped { reason } => panic!("{} skipped: {reason}", p.probe),
        })
        .collect()
}

fn leaking(report: &MachineReport) -> BTreeMap<ProbeKind, LeakStatus> {
    statuses(report)
        .into_iter()
        .filter(|(_, s)| *s != LeakStatus::NoLeak)
        .collect()
}

fn channel_round_trip() -> Outcome {
    let start = Instant::now();
    let mut errors = 0;
    for stride in HARDWARE_STRIDES {
        let mut b =
            SimBackend::new(LeakageProfile::silent("channel")).map_err(|e| e.to_string())?;
        b.configure_channel(stride, 1, 8)
            .map_err(|e| e.to_string())?;
        for v in 0..256 {
            let ch = b.channel();
            ch.flush_all();
            ch.encode(v, 0);
            if ch.decode(0).map_err(|e| e.to_string())?.single_hit() != Some(v) {
                errors += 1;
            }
        }
    }
    let sim = format!("sim: {errors} errors over 3x256");
    if errors != 0 {
        return Err(sim);
    }
    let hw = hardware_round_trip()?;
    within(Duration::from_secs(60), start, format!("{sim}; {hw}"))
}

#[cfg(all(target_arch = "x86_64", target_os = "linux"))]
fn hardware_round_trip() -> Outcome {
    use regleak::backend::hw::HwBackend;
    use regleak::env::{check_environment, EnvPaths, CHECK_ISOLATED_CORE};
    use regleak::harness::FaultStrategy;

    let mut b = HwBackend::new(FaultStrategy::SignalHandler).map_err(|e| format!("hw: {e}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let trials = 10_000;
    let mut correct = 0;
    for _ in 0..trials {
        let v = rng.random_range(0..256);
        let ch = b.channel();
        ch.flush_all();
        ch.encode(v, 0);
        if ch.decode(0).map_err(|e| e.to_string())?.single_hit() == Some(v) {
            correct += 1;
        }
    }
    let rate = correct as f64 / trials as f64;
    let detail = format!("hw: {correct}/{trials} single-slot");
    if rate >= 0.99 {
        return Ok(detail);
    }
    // Measurements are only binding on a machine prepared the way the tool
    // demands before it measures: mandatory checks passing and an isolated
    // core to run on.
    let env = check_environment(&EnvPaths::system());
    let isolated = env.get(CHECK_ISOLATED_CORE).is_some_and(|c| c.pass);
    if env.overall_pass && isolated {
        Err(detail)
    } else {
        let mut unmet = env.failures();
        if !isolated {
            unmet.push(CHECK_ISOLATED_CORE);
        }
        Ok(format!(
            "{detail}, below 99% but informational: environment not prepared ({})",
            unmet.join(", ")
        ))
    }
}

#[cfg(not(all(target_arch = "x86_64", target_os = "linux")))]
fn hardware_round_trip() -> Outcome {
    Ok("hw: not x86-64 Linux, skipped".into())
}

fn known_cpu_rows() -> Outcome {
    let text =
        std::fs::read_to_string(fixtures().join("known_cpus.json")).map_err(|e| e.to_string())?;
    let rows: Vec<serde_json::Value> = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let mut mismatches = Vec::new();
    let names = [
        "J4005",
        "CeleronN3550",
        "Epyc7252",
        "Ryzen6900HX",
        "i9-12900K",
        "i5-3230M",
    ];
    for name in names {
        let row = rows
            .iter()
            .find(|r| r["profile"] == name)
            .ok_or_else(|| format!("{name} missing from known_cpus.json"))?;
        let expected: BTreeMap<ProbeKind, LeakStatus> =
            serde_json::from_value(row["leaking"].clone()).map_err(|e| e.to_string())?;
        let profile =
            load_profile(fixtures().join(format!("{name}.json"))).map_err(|e| e.to_string())?;
        let mut reports = Vec::new();
        for _ in 0..2 {
            let mut b = SimBackend::new(profile.clone()).map_err(|e| e.to_string())?;
            reports.push(
                full_scan(&mut b, &Catalog::full(), &ScanOptions::default())
                    .map_err(|e| e.to_string())?,
            );
        }
        if reports[0] != reports[1] {
            mismatches.push(format!("{name}: nondeterministic"));
        }
        let got = leaking(&reports[0]);
        if got != expected {
            mismatches.push(format!("{name}: got {got:?}, expected {expected:?}"));
        }
    }
    ensure(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!(
                "{} profiles reproduce exactly and deterministically",
                names.len()
            )
        } else {
            mismatches.join("; ")
        },
    )
}

fn random_profile(
    rng: &mut ChaCha8Rng,
    i: usize,
) -> (LeakageProfile, BTreeMap<ProbeKind, LeakStatus>) {
    let mut p = LeakageProfile::silent(&format!("random-{i}"));
    p.seed = rng.random();
    p.spurious_hit_rate = rng.random_range(0.0..=0.2);
    let mut truth = BTreeMap::new();
    for probe in ProbeKind::ALL {
        let roll: f64 = rng.random();
        let (behavior, status) = if roll < 0.45 {
            (ProbeBehavior::Silent, LeakStatus::NoLeak)
        } else if roll < 0.75 {
            let v = rng.random_range(1..=u64::MAX);
            let status = if v & 0xFFFF_FFFF == 0 && !probe.is_timestamp() {
                LeakStatus::ZeroForward
            } else {
                LeakStatus::Leaks
            };
            (ProbeBehavior::LeakValue(v), status)
        } else if roll < 0.9 || !probe.is_timestamp() {
            (ProbeBehavior::ZeroForward, LeakStatus::ZeroForward)
        } else {
            (ProbeBehavior::UnverifiedTimestamp, LeakStatus::Unverified)
        };
        if behavior != ProbeBehavior::Silent {
            p.probes.insert(probe, behavior);
        }
        truth.insert(probe, status);
    }
    (p, truth)
}

fn classifier_robustness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = Vec::new();
    let mut max_rate: f64 = 0.0;
    for i in 0..100 {
        let (profile, truth) = random_profile(&mut rng, i);
        max_rate = max_rate.max(profile.spurious_hit_rate);
        let mut b = SimBackend::new(profile.clone()).map_err(|e| e.to_string())?;
        let report = full_scan(&mut b, &Catalog::full(), &ScanOptions::default())
            .map_err(|e| e.to_string())?;
        let got = statuses(&report);
        if got != truth {
            let diff: Vec<String> = truth
                .iter()
                .filter(|(k, v)| got.get(k) != Some(v))
                .map(|(k, v)| format!("{k} want {v:?} got {:?}", got.get(k)))
                .collect();
            failures.push(format!(
                "profile {i} (rate {:.3}): {}",
                profile.spurious_hit_rate,
                diff.join(", ")
            ));
        }
    }
    if !failures.is_empty() {
        return Err(format!(
            "{}/100 mismatched: {}",
            failures.len(),
            failures.join("; ")
        ));
    }
    within(
        Duration::from_secs(300),
        start,
        format!("100/100 profiles exact, spurious rates up to {max_rate:.3}"),
    )
}

fn truncation_pass(spurious_hit_rate: f64, seed: u64) -> Result<(usize, [u64; 4]), String> {
    const INDEX: u32 = 5;
    let mut p = LeakageProfile::silent("truncation");
    p.spurious_hit_rate = spurious_hit_rate;
    p.probes
        .insert(ProbeKind::Rdpmc, ProbeBehavior::LeakValue(1));
    p.counters.insert(
        "INSTR_RETIRED".into(),
        CounterModel {
            index: INDEX,
            initial: 0,
            increments: [(MicroEvent::InstructionRetired, 1)].into_iter().collect(),
            counts_speculative: false,
            self_increment: 0,
            noise_sigma: 0.0,
        },
    );
    let mut b = SimBackend::with_seed(p, seed).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wrong = 0;
    let mut max_probes = [0u64; 4];
    for bytes in 1..=4usize {
        for _ in 0..1000 {
            let v: u64 = rng.random();
            b.set_counter_value(INDEX, v).map_err(|e| e.to_string())?;
            let selector = CounterSelector::new(INDEX, "INSTR_RETIRED");
            let mut leak = CounterLeak::new(&mut b, selector, bytes, DEFAULT_RETRIES)
                .map_err(|e| e.to_string())?;
            let s = leak.leak().map_err(|e| e.to_string())?;
            if s.value as u128 != v as u128 % (1u128 << (8 * bytes)) {
                wrong += 1;
            }
            max_probes[bytes - 1] = max_probes[bytes - 1].max(s.probe_count);
        }
    }
    Ok((wrong, max_probes))
}

/// The probe bound holds per clean decode; spurious hits cost retries, so the
/// noisy pass only checks values.
fn counter_truncation() -> Outcome {
    let (wrong, max_probes) = truncation_pass(0.0, 4)?;
    let over = (1..=4).any(|n| max_probes[n - 1] > 256 * n as u64);
    let (noisy_wrong, noisy_probes) = truncation_pass(0.01, 40)?;
    ensure(
        wrong == 0 && !over && noisy_wrong == 0,
        format!(
            "clean: {wrong}/4000 wrong, max probes by width {max_probes:?}; \
             1% spurious hits: {noisy_wrong}/4000 wrong, max probes {noisy_probes:?}"
        ),
    )
}

fn rsa_recovery() -> Outcome {
    let start = Instant::now();
    let at = [10, 100, 1_000, 10_000];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut accuracies = Vec::new();
    let mut nonmonotone = 0;
    for key in 0..10u64 {
        let exponent = rsa::random_exponent(&mut rng, rsa::DEFAULT_KEY_BITS);
        let r = rsa::recover_synthetic(&exponent, 10_000, 1.0, 100 + key, &at)
            .map_err(|e| e.to_string())?;
        if r.checkpoints
            .windows(2)
            .any(|w| w[1].accuracy < w[0].accuracy)
        {
            nonmonotone += 1;
        }
        accuracies.push(r.accuracy);
    }
    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    let min = accuracies.iter().copied().fold(1.0, f64::min);
    let detail =
        format!("mean bit accuracy {mean:.5}, worst key {min:.5}, {nonmonotone} non-monotone keys");
    if mean < 0.999 || nonmonotone > 0 {
        return Err(detail);
    }
    within(Duration::from_secs(600), start, detail)
}

fn kaslr_detection() -> Outcome {
    let start = Instant::now();
    let candidates = kaslr::candidate_range(kaslr::KERNEL_RANGE_START, kaslr::KERNEL_ALIGN, 512);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut correct = 0;
    for run in 0..100 {
        let base = candidates[rng.random_range(0..candidates.len())];
        let mut b =
            SimBackend::with_seed(kaslr_profile(base, 2.0), run).map_err(|e| e.to_string())?;
        let selector = CounterSelector::new(WALK_INDEX, kaslr::WALK_EVENT);
        if let Ok(r) = kaslr::scan(&mut b, selector, &candidates) {
            if r.detected_base == Some(base) {
                correct += 1;
            }
        }
    }
    if correct < 98 {
        return Err(format!("{correct}/100 correct"));
    }
    within(
        Duration::from_secs(60),
        start,
        format!("{correct}/100 correct at noise sd 2"),
    )
}

fn spectre_bits() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut right, mut total) = (0usize, 0usize);
    for run in 0..20 {
        let secret: [u8; 8] = rng.random();
        let mut b = SimBackend::with_seed(spectre_profile(8.0), run).map_err(|e| e.to_string())?;
        let selector = CounterSelector::new(DIVIDER_INDEX, spectre::DIVIDER_EVENT);
        let r = spectre::run(
            &mut b,
            selector,
            &secret,
            &spectre::SpectreParams::default(),
        )
        .map_err(|e| e.to_string())?;
        right += (r.accuracy * r.bits as f64).round() as usize;
        total += r.bits;
    }
    let acc = right as f64 / total as f64;
    let detail = format!("{right}/{total} bits ({:.2}%) at noise sd 8", acc * 100.0);
    if acc < 0.996 {
        return Err(detail);
    }
    within(Duration::from_secs(60), start, detail)
}

fn zigzagger_classification() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for arg in 0..zigzagger::ARGUMENTS {
        for _ in 0..1000 {
            let x: u64 = rng.random();
            if zigzagger::plain(&mut NativeContext, arg, x)
                != zigzagger::hardened(&mut NativeContext, arg, x)
            {
                return Err(format!("hardened and plain differ for arg {arg}, x {x:#x}"));
            }
        }
    }
    let mut b = SimBackend::with_seed(zigzagger_profile(1.0), 8).map_err(|e| e.to_string())?;
    let selector = CounterSelector::new(INSTRUCTION_INDEX, zigzagger::INSTRUCTION_EVENT);
    let r = zigzagger::run(
        &mut b,
        selector,
        10_000,
        zigzagger::DEFAULT_CALIBRATION_SAMPLES,
    )
    .map_err(|e| e.to_string())?;
    let per_arg: Vec<String> = r
        .classifications
        .iter()
        .map(|c| format!("{}/{}", c.correct_samples, c.samples))
        .collect();
    ensure(
        r.success_rate == 1.0 && r.classifications.iter().all(|c| c.inferred == c.argument),
        format!(
            "victims equivalent; per-argument correct {}",
            per_arg.join(", ")
        ),
    )
}

fn resident_pages() -> u64 {
    std::fs::read_to_string("/proc/self/statm")
        .ok()
        .and_then(|s| s.split_whitespace().nth(1).and_then(|v| v.parse().ok()))
        .unwrap_or(0)
}

fn endure<B: Backend>(backend: &mut B, label: &str) -> Result<String, String> {
    const CALLS: usize = 1_000_000;
    const BOUND_PAGES: u64 = 1024;
    let body = TransientBody::Probe {
        probe: ProbeKind::MovCr,
        operand: 3,
        window: EncodeWindow::byte_at(0),
    };
    let mut faults = 0usize;
    let mut baseline = 0;
    let mut peak = 0;
    for i in 0..CALLS {
        if i == CALLS / 10 {
            baseline = resident_pages();
        }
        if i > CALLS / 10 && i % 50_000 == 0 {
            peak = peak.max(resident_pages());
        }
        let out = backend
            .run_transient(&body)
            .map_err(|e| format!("{label} call {i}: {e}"))?;
        faults += out.faulted as usize;
    }
    peak = peak.max(resident_pages());
    let growth = peak.saturating_sub(baseline);
    let detail = format!("{label}: {faults}/{CALLS} faults recovered, RSS growth {growth} pages");
    if faults != CALLS || growth > BOUND_PAGES {
        Err(detail)
    } else {
        Ok(detail)
    }
}

fn harness_endurance() -> Outcome {
    let mut profile = LeakageProfile::silent("endurance");
    profile
        .probes
        .insert(ProbeKind::MovCr, ProbeBehavior::LeakValue(0x8005_0033));
    let mut sim = SimBackend::new(profile).map_err(|e| e.to_string())?;
    let sim_detail = endure(&mut sim, "sim")?;
    let hw_detail = hardware_endurance()?;
    Ok(format!("{sim_detail}; {hw_detail}"))
}

#[cfg(all(target_arch = "x86_64", target_os = "linux"))]
fn hardware_endurance() -> Outcome {
    use regleak::backend::hw::HwBackend;
    use regleak::harness::FaultStrategy;

    let mut b = HwBackend::new(FaultStrategy::SignalHandler).map_err(|e| format!("hw: {e}"))?;
    endure(&mut b, "hw")
}

#[cfg(not(all(target_arch = "x86_64", target_os = "linux")))]
fn hardware_endurance() -> Outcome {
    Ok("hw: not x86-64 Linux, skipped".into())
}

fn report_round_trip() -> Outcome {
    let mut checked = Vec::new();
    let goldens = [
        ("J4005", 1000),
        ("Epyc7252", 1000),
        ("i5-3230M", 1000),
        ("silent", 200),
    ];
    for (name, rounds) in goldens {
        let profile = if name == "silent" {
            LeakageProfile::silent("silent")
        } else {
            load_profile(fixtures().join(format!("{name}.json"))).map_err(|e| e.to_string())?
        };
        let mut b = SimBackend::new(profile).map_err(|e| e.to_string())?;
        let options = ScanOptions {
            rounds,
            timestamp: 0,
            profile: Some(name.into()),
            ..Default::default()
        };
        let report = full_scan(&mut b, &Catalog::full(), &options).map_err(|e| e.to_string())?;
        let json = report.to_json().map_err(|e| e.to_string())?;
        let parsed = MachineReport::from_json(&json).map_err(|e| e.to_string())?;
        if parsed != report || parsed.to_json().map_err(|e| e.to_string())? != json {
            return Err(format!("{name}: JSON round trip changed the report"));
        }
        let golden = std::fs::read_to_string(fixtures().join(format!("golden/{name}.md")))
            .map_err(|e| e.to_string())?;
        if render_markdown(&report) != golden {
            return Err(format!("{name}: Markdown differs from golden/{name}.md"));
        }
        checked.push(name);
    }
    Ok(format!(
        "JSON identity and golden Markdown for {}",
        checked.join(", ")
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("channel round trip", channel_round_trip),
        ("known-CPU fixture equivalence", known_cpu_rows),
        ("classifier robustness", classifier_robustness),
        ("counter truncation", counter_truncation),
        ("RSA recovery", rsa_recovery),
        ("KASLR detection", kaslr_detection),
        ("Spectre bit recovery", spectre_bits),
        ("Zigzagger classification", zigzagger_classification),
        ("harness endurance", harness_endurance),
        ("report round trip and golden files", report_round_trip),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = format!("{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {id} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id} {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
