//! The per-probe test loop, the stride sweep and whole-catalog scans.

use serde::{Deserialize, Serialize};

use super::classify::{
    classify_offsets, classify_timestamps, ClassifierParams, LeakStatus, LeakVerdict, OffsetTally,
    TimestampSample,
};
use super::report::{MachineReport, ProbeOutcome, ProbeReport, REPORT_SCHEMA_VERSION};
use super::{Catalog, ProbeSpec};
use crate::backend::Backend;
use crate::channel::DEFAULT_STRIDE;
use crate::error::{Error, Result};
use crate::harness::{EncodeWindow, TransientBody};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanOptions {
    /// Rounds per probe, operand and bit offset.
    pub rounds: u64,
    /// One stride, or several to sweep.
    pub strides: Vec<usize>,
    /// Low bits of each register covered by the offset sweep (32 or 64).
    pub coverage_bits: u32,
    pub params: ClassifierParams,
    /// Unix seconds stamped into the report.
    pub timestamp: u64,
    /// Name of the simulator profile, if any.
    pub profile: Option<String>,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            rounds: 1000,
            strides: vec![DEFAULT_STRIDE],
            coverage_bits: 32,
            params: ClassifierParams::default(),
            timestamp: 0,
            profile: None,
        }
    }
}

/// One flush / transient / decode round on symbol 0, retried while the
/// decode pass is multi-hit.
fn tally_round<B: Backend>(
    backend: &mut B,
    body: &TransientBody,
    tally: &mut OffsetTally,
    retries: usize,
) -> Result<()> {
    tally.rounds += 1;
    for _ in 0..=retries {
        backend.channel().flush_all();
        backend.run_transient(body)?;
        let obs = backend.channel().decode(0)?;
        if obs.is_multi_hit() {
            continue;
        }
        if let Some(slot) = obs.single_hit() {
            tally.hits[slot] += 1;
        }
        return Ok(());
    }
    tally.discarded_rounds += 1;
    Ok(())
}

fn ensure_restricted<B: Backend>(backend: &mut B, spec: &ProbeSpec) -> Result<()> {
    for &operand in &spec.operands {
        if backend.architectural_read(spec.kind, operand)?.is_some() {
            return Err(Error::EnvironmentNotRestricted {
                probe: spec.name().to_string(),
            });
        }
    }
    Ok(())
}

fn validate(spec: &ProbeSpec, rounds: u64, coverage_bits: u32) -> Result<()> {
    if rounds == 0 {
        return Err(Error::InvalidArgument("rounds must be positive".into()));
    }
    if !matches!(spec.leak_window_bits, 1 | 8) {
        return Err(Error::InvalidArgument(format!(
            "{}: leak window of {} bits",
            spec.name(),
            spec.leak_window_bits
        )));
    }
    if coverage_bits == 0 || coverage_bits > 64 || coverage_bits % spec.leak_window_bits != 0 {
        return Err(Error::InvalidArgument(format!(
            "coverage of {coverage_bits} bits"
        )));
    }
    if spec.operands.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} has no operands",
            spec.name()
        )));
    }
    Ok(())
}

/// Test one probe: for each operand and bit offset, `rounds` iterations of
/// flush, transient read-and-encode and decode, classified against a
/// control run that encodes nothing.
pub fn run_probe<B: Backend>(
    backend: &mut B,
    spec: &ProbeSpec,
    rounds: u64,
    stride: usize,
    coverage_bits: u32,
    params: &ClassifierParams,
) -> Result<LeakVerdict> {
    validate(spec, rounds, coverage_bits)?;
    if spec.kind.is_timestamp() {
        return verify_timestamp_leak(backend, spec, rounds, stride, params);
    }
    backend.enter_probe(spec.kind)?;
    let result = run_fixed_value_probe(backend, spec, rounds, stride, coverage_bits, params);
    backend.leave_probe(spec.kind);
    result
}

fn run_fixed_value_probe<B: Backend>(
    backend: &mut B,
    spec: &ProbeSpec,
    rounds: u64,
    stride: usize,
    coverage_bits: u32,
    params: &ClassifierParams,
) -> Result<LeakVerdict> {
    ensure_restricted(backend, spec)?;
    let bits = spec.leak_window_bits;
    backend.configure_channel(stride, 1, bits)?;
    let slots = 1usize << bits;
    let mut operands = Vec::with_capacity(spec.operands.len());
    for &operand in &spec.operands {
        let mut control = OffsetTally::new(0, slots);
        for _ in 0..rounds {
            tally_round(
                backend,
                &TransientBody::Nop,
                &mut control,
                params.multi_hit_retries,
            )?;
        }
        let mut tallies = Vec::new();
        for bit_offset in (0..coverage_bits).step_by(bits as usize) {
            let body = TransientBody::Probe {
                probe: spec.kind,
                operand,
                window: EncodeWindow {
                    bit_offset,
                    bits,
                    symbols: 1,
                },
            };
            let mut tally = OffsetTally::new(bit_offset, slots);
            for _ in 0..rounds {
                tally_round(backend, &body, &mut tally, params.multi_hit_retries)?;
            }
            tallies.push(tally);
        }
        operands.push(classify_offsets(operand, &tallies, &control, params));
    }
    let status = operands
        .iter()
        .map(|o| o.status)
        .filter(|s| *s != LeakStatus::Unverified)
        .max()
        .unwrap_or(LeakStatus::NoLeak);
    Ok(LeakVerdict {
        status,
        rounds,
        stride_bytes: stride,
        operands,
        timestamp: None,
    })
}

/// Decode four symbols; `None` if any pass is multi-hit, otherwise the
/// value when every symbol has exactly one hit.
fn decode_word<B: Backend>(backend: &mut B) -> Result<Option<Option<u64>>> {
    let mut value = 0u64;
    let mut complete = true;
    for symbol in 0..4 {
        let obs = backend.channel().decode(symbol)?;
        if obs.is_multi_hit() {
            return Ok(None);
        }
        match obs.single_hit() {
            Some(slot) => value |= (slot as u64) << (8 * symbol),
            None => complete = false,
        }
    }
    Ok(Some(complete.then_some(value)))
}

/// Timestamp probes leak a moving value. Collect 4-byte samples together
/// with counting-timer ticks and check that the leaked values advance with
/// the timer.
pub fn verify_timestamp_leak<B: Backend>(
    backend: &mut B,
    spec: &ProbeSpec,
    rounds: u64,
    stride: usize,
    params: &ClassifierParams,
) -> Result<LeakVerdict> {
    if !spec.kind.is_timestamp() {
        return Err(Error::InvalidArgument(format!(
            "{} is not a timestamp probe",
            spec.name()
        )));
    }
    backend.enter_probe(spec.kind)?;
    let result = (|| {
        ensure_restricted(backend, spec)?;
        backend.configure_channel(stride, 4, 8)?;
        let timer = backend.timer_reliability();
        let operand = spec.operands.first().copied().unwrap_or(0);

        let mut control_complete = 0u64;
        for _ in 0..rounds {
            for _ in 0..=params.multi_hit_retries {
                backend.channel().flush_all();
                backend.run_transient(&TransientBody::Nop)?;
                match decode_word(backend)? {
                    None => continue,
                    Some(word) => {
                        control_complete += word.is_some() as u64;
                        break;
                    }
                }
            }
        }

        let body = TransientBody::Probe {
            probe: spec.kind,
            operand,
            window: EncodeWindow::low_bytes(4),
        };
        let mut samples = Vec::new();
        for _ in 0..rounds {
            for _ in 0..=params.multi_hit_retries {
                let ticks = backend.timer_ticks()?;
                backend.channel().flush_all();
                backend.run_transient(&body)?;
                match decode_word(backend)? {
                    None => continue,
                    Some(word) => {
                        if let Some(value) = word {
                            samples.push(TimestampSample { ticks, value });
                        }
                        break;
                    }
                }
            }
        }
        let (status, evidence) =
            classify_timestamps(&samples, control_complete, rounds, timer, params);
        Ok(LeakVerdict {
            status,
            rounds,
            stride_bytes: stride,
            operands: Vec::new(),
            timestamp: Some(evidence),
        })
    })();
    backend.leave_probe(spec.kind);
    result
}

/// Run a probe at each stride and keep the strongest verdict: by status,
/// then by supporting hits, then the larger stride.
pub fn sweep_strides<B: Backend>(
    backend: &mut B,
    spec: &ProbeSpec,
    strides: &[usize],
    rounds: u64,
    coverage_bits: u32,
    params: &ClassifierParams,
) -> Result<(usize, LeakVerdict)> {
    if strides.is_empty() {
        return Err(Error::InvalidArgument("no strides to sweep".into()));
    }
    let mut best: Option<(usize, LeakVerdict)> = None;
    for &stride in strides {
        let verdict = run_probe(backend, spec, rounds, stride, coverage_bits, params)?;
        let better = match &best {
            None => true,
            Some((best_stride, best_verdict)) => {
                (verdict.status, verdict.strength(), stride)
                    > (best_verdict.status, best_verdict.strength(), *best_stride)
            }
        };
        if better {
            best = Some((stride, verdict));
        }
    }
    Ok(best.expect("at least one stride"))
}

/// Run every catalog probe in order. A failing probe becomes a skipped
/// entry instead of aborting the scan.
pub fn full_scan<B: Backend>(
    backend: &mut B,
    catalog: &Catalog,
    options: &ScanOptions,
) -> Result<MachineReport> {
    if options.strides.is_empty() {
        return Err(Error::InvalidArgument("no strides configured".into()));
    }
    let identity = backend.identity();
    let mut probes = Vec::with_capacity(catalog.probes.len());
    for spec in &catalog.probes {
        let result = sweep_strides(
            backend,
            spec,
            &options.strides,
            options.rounds,
            options.coverage_bits,
            &options.params,
        );
        let outcome = match result {
            Ok((_, verdict)) => ProbeOutcome::Verdict(verdict),
            Err(e) => ProbeOutcome::Skipped {
                reason: e.to_string(),
            },
        };
        probes.push(ProbeReport {
            probe: spec.kind,
            outcome,
        });
    }
    Ok(MachineReport {
        schema_version: REPORT_SCHEMA_VERSION,
        cpu_model: identity.model,
        microcode_revision: identity.microcode,
        microarchitecture: identity.microarchitecture,
        backend: backend.kind(),
        profile: options.profile.clone(),
        seed: backend.seed(),
        stride_used: options.strides.clone(),
        rounds: options.rounds,
        coverage_bits: options.coverage_bits,
        classifier: options.params,
        timestamp: options.timestamp,
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{LeakageProfile, ProbeBehavior, SimBackend};
    use crate::probes::ProbeKind;

    fn sim(behaviors: &[(ProbeKind, ProbeBehavior)]) -> SimBackend {
        let mut profile = LeakageProfile::silent("t");
        profile.probes.extend(behaviors.iter().copied());
        SimBackend::new(profile).unwrap()
    }

    fn probe(backend: &mut SimBackend, kind: ProbeKind, rounds: u64) -> LeakVerdict {
        run_probe(
            backend,
            &ProbeSpec::for_kind(kind),
            rounds,
            4096,
            32,
            &ClassifierParams::default(),
        )
        .unwrap()
    }

    #[test]
    fn injected_value_is_reported() {
        let mut b = sim(&[(ProbeKind::Rdfsbase, ProbeBehavior::LeakValue(0xAB))]);
        let v = probe(&mut b, ProbeKind::Rdfsbase, 100);
        assert_eq!(v.status, LeakStatus::Leaks);
        assert_eq!(v.leaked_value(), Some(0xAB));
        assert_eq!(v.operands[0].bytes.len(), 4);
    }

    #[test]
    fn silent_probe_is_no_leak() {
        let mut b = sim(&[]);
        for kind in [ProbeKind::Str, ProbeKind::MovCr, ProbeKind::Rdtsc] {
            assert_eq!(probe(&mut b, kind, 50).status, LeakStatus::NoLeak, "{kind}");
        }
    }

    #[test]
    fn zero_forward_probe() {
        let mut b = sim(&[(ProbeKind::Str, ProbeBehavior::ZeroForward)]);
        let v = probe(&mut b, ProbeKind::Str, 100);
        assert_eq!(v.status, LeakStatus::ZeroForward);
        assert_eq!(v.leaked_value(), None);
    }

    #[test]
    fn permitted_probe_is_refused() {
        let mut profile = LeakageProfile::silent("t");
        profile.permitted_probes.push(ProbeKind::Rdfsbase);
        let mut b = SimBackend::new(profile).unwrap();
        let err = run_probe(
            &mut b,
            &ProbeSpec::for_kind(ProbeKind::Rdfsbase),
            10,
            4096,
            32,
            &ClassifierParams::default(),
        );
        assert!(matches!(err, Err(Error::EnvironmentNotRestricted { .. })));
    }

    #[test]
    fn timestamp_probes() {
        let mut b = sim(&[(ProbeKind::Rdtsc, ProbeBehavior::LeakValue(1_000_000))]);
        let v = probe(&mut b, ProbeKind::Rdtsc, 200);
        assert_eq!(v.status, LeakStatus::Leaks);
        let ts = v.timestamp.unwrap();
        assert!(ts.correlation.unwrap() > 0.99);

        let mut b = sim(&[(ProbeKind::Rdtscp, ProbeBehavior::UnverifiedTimestamp)]);
        assert_eq!(
            probe(&mut b, ProbeKind::Rdtscp, 200).status,
            LeakStatus::Unverified
        );

        let mut profile = LeakageProfile::silent("t");
        profile
            .probes
            .insert(ProbeKind::Rdtsc, ProbeBehavior::LeakValue(5));
        profile.degraded_timer = true;
        let mut b = SimBackend::new(profile).unwrap();
        assert_eq!(
            probe(&mut b, ProbeKind::Rdtsc, 200).status,
            LeakStatus::Unverified
        );
    }

    #[test]
    fn one_bit_windows_reassemble_the_value() {
        let mut b = sim(&[(ProbeKind::Smsw, ProbeBehavior::LeakValue(0x8005_0033))]);
        let mut spec = ProbeSpec::for_kind(ProbeKind::Smsw);
        spec.leak_window_bits = 1;
        let v = run_probe(&mut b, &spec, 20, 4096, 32, &ClassifierParams::default()).unwrap();
        assert_eq!(v.status, LeakStatus::Leaks);
        assert_eq!(v.operands[0].bytes.len(), 32);
        assert_eq!(v.leaked_value(), Some(0x8005_0033));
    }

    #[test]
    fn sweep_prefers_largest_stride_on_ties() {
        let mut b = sim(&[]);
        let (stride, v) = sweep_strides(
            &mut b,
            &ProbeSpec::for_kind(ProbeKind::Sldt),
            &[1024, 2048, 4096],
            20,
            32,
            &ClassifierParams::default(),
        )
        .unwrap();
        assert_eq!((stride, v.status), (4096, LeakStatus::NoLeak));
    }

    #[test]
    fn sweep_finds_the_same_value_at_every_stride() {
        let mut b = sim(&[(ProbeKind::Rdgsbase, ProbeBehavior::LeakValue(0x7F12_3456))]);
        for stride in [1024, 2048, 4096] {
            let v = run_probe(
                &mut b,
                &ProbeSpec::for_kind(ProbeKind::Rdgsbase),
                20,
                stride,
                32,
                &ClassifierParams::default(),
            )
            .unwrap();
            assert_eq!(v.leaked_value(), Some(0x7F12_3456));
        }
    }

    #[test]
    fn empty_catalog_gives_empty_report() {
        let mut b = sim(&[]);
        let report = full_scan(&mut b, &Catalog::empty(), &ScanOptions::default()).unwrap();
        assert!(report.probes.is_empty());
    }

    #[test]
    fn skipped_probes_carry_a_reason() {
        let mut profile = LeakageProfile::silent("t");
        profile.permitted_probes.push(ProbeKind::Smsw);
        let mut b = SimBackend::new(profile).unwrap();
        let options = ScanOptions {
            rounds: 10,
            ..ScanOptions::default()
        };
        let report = full_scan(
            &mut b,
            &Catalog::full().select(&["smsw", "str"]).unwrap(),
            &options,
        )
        .unwrap();
        assert!(matches!(report.probes[0].outcome, ProbeOutcome::Verdict(_)));
        assert!(matches!(
            report.probes[1].outcome,
            ProbeOutcome::Skipped { .. }
        ));
    }
}
