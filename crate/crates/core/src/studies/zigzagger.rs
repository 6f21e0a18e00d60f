//! Telling apart the paths of a branch-shadowing-hardened function by its
//! retired-instruction count.

use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::counterleak::{CounterLeak, CounterSelector, DEFAULT_RETRIES};
use crate::error::{Error, Result};
use crate::harness::{MicroEvent, VictimContext};
use crate::stats::median_i64;

pub const INSTRUCTION_EVENT: &str = "INSTR_RETIRED";
pub const ARGUMENTS: usize = 3;
/// Instructions each hardened path reports to a simulated PMU.
pub const PATH_INSTRUCTIONS: [u64; ARGUMENTS] = [120, 135, 150];
pub const DEFAULT_SAMPLES: usize = 10_000;
pub const DEFAULT_CALIBRATION_SAMPLES: usize = 100;
pub const COUNTER_BYTES: usize = 2;

fn mix(mut x: u64, rounds: u32) -> u64 {
    for _ in 0..rounds {
        x = (x ^ (x >> 29)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    }
    x
}

type Handler = fn(&mut dyn VictimContext, u64) -> u64;

fn path_a(ctx: &mut dyn VictimContext, x: u64) -> u64 {
    ctx.retire(MicroEvent::InstructionRetired, PATH_INSTRUCTIONS[0]);
    mix(x, 1)
}

fn path_b(ctx: &mut dyn VictimContext, x: u64) -> u64 {
    ctx.retire(MicroEvent::InstructionRetired, PATH_INSTRUCTIONS[1]);
    mix(x, 2)
}

fn path_c(ctx: &mut dyn VictimContext, x: u64) -> u64 {
    ctx.retire(MicroEvent::InstructionRetired, PATH_INSTRUCTIONS[2]);
    mix(x, 3)
}

const HANDLERS: [Handler; ARGUMENTS] = [path_a, path_b, path_c];

/// The unhardened function: one conditional branch per argument value.
#[inline(never)]
pub fn plain(ctx: &mut dyn VictimContext, arg: usize, x: u64) -> u64 {
    if arg == 0 {
        path_a(ctx, x)
    } else if arg == 1 {
        path_b(ctx, x)
    } else {
        path_c(ctx, x)
    }
}

/// Hardened: the target is selected with masks instead of branches and
/// reached through a single indirect call.
#[inline(never)]
pub fn hardened(ctx: &mut dyn VictimContext, arg: usize, x: u64) -> u64 {
    let is1 = ((arg == 1) as usize).wrapping_neg();
    let is2 = ((arg >= 2) as usize).wrapping_neg();
    let index = (is1 & 1) | (is2 & 2);
    let target = std::hint::black_box(HANDLERS[index]);
    target(ctx, x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    /// Median instruction delta per argument.
    pub medians: Vec<f64>,
}

impl Baselines {
    pub fn new(medians: Vec<f64>) -> Result<Self> {
        for i in 0..medians.len() {
            for j in i + 1..medians.len() {
                if (medians[i] - medians[j]).abs() < 1.0 {
                    return Err(Error::AmbiguousBaselines {
                        first: i,
                        second: j,
                    });
                }
            }
        }
        Ok(Self { medians })
    }

    /// Argument whose baseline is closest to `observed`; ties go to the
    /// smaller argument.
    pub fn nearest(&self, observed: f64) -> usize {
        self.medians
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - observed).abs().total_cmp(&(b.1 - observed).abs()))
            .map(|(i, _)| i)
            .expect("at least one baseline")
    }
}

/// Instruction delta around one hardened call.
pub fn measure<B: Backend>(leak: &mut CounterLeak<'_, B>, arg: usize) -> Result<i64> {
    leak.leak_delta(|ctx| {
        std::hint::black_box(hardened(ctx, arg, 0x1234));
    })
}

pub fn calibrate<B: Backend>(leak: &mut CounterLeak<'_, B>, samples: usize) -> Result<Baselines> {
    if samples == 0 {
        return Err(Error::InvalidArgument("calibration needs samples".into()));
    }
    let medians = (0..ARGUMENTS)
        .map(|arg| {
            let d = (0..samples)
                .map(|_| measure(leak, arg))
                .collect::<Result<Vec<_>>>()?;
            Ok(median_i64(&d).expect("nonempty"))
        })
        .collect::<Result<Vec<_>>>()?;
    Baselines::new(medians)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub argument: usize,
    pub inferred: usize,
    pub median_delta: f64,
    /// Single measurements classified as the right argument.
    pub correct_samples: usize,
    pub samples: usize,
}

/// Measure `samples` hardened calls with `arg` and infer the argument from
/// the median delta.
pub fn classify<B: Backend>(
    leak: &mut CounterLeak<'_, B>,
    baselines: &Baselines,
    arg: usize,
    samples: usize,
) -> Result<Classification> {
    if samples == 0 {
        return Err(Error::InvalidArgument("samples must be positive".into()));
    }
    let deltas = (0..samples)
        .map(|_| measure(leak, arg))
        .collect::<Result<Vec<_>>>()?;
    let median_delta = median_i64(&deltas).expect("nonempty");
    let correct_samples = deltas
        .iter()
        .filter(|&&d| baselines.nearest(d as f64) == arg)
        .count();
    Ok(Classification {
        argument: arg,
        inferred: baselines.nearest(median_delta),
        median_delta,
        correct_samples,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZigzaggerResult {
    pub baselines: Baselines,
    pub classifications: Vec<Classification>,
    /// Fraction of single measurements classified correctly.
    pub success_rate: f64,
}

pub fn run<B: Backend>(
    backend: &mut B,
    selector: CounterSelector,
    samples: usize,
    calibration_samples: usize,
) -> Result<ZigzaggerResult> {
    let mut leak = CounterLeak::new(backend, selector, COUNTER_BYTES, DEFAULT_RETRIES)?;
    let baselines = calibrate(&mut leak, calibration_samples)?;
    let classifications = (0..ARGUMENTS)
        .map(|arg| classify(&mut leak, &baselines, arg, samples))
        .collect::<Result<Vec<_>>>()?;
    let correct: usize = classifications.iter().map(|c| c.correct_samples).sum();
    let total: usize = classifications.iter().map(|c| c.samples).sum();
    Ok(ZigzaggerResult {
        baselines,
        classifications,
        success_rate: correct as f64 / total as f64,
    })
}
