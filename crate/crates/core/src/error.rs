use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("channel calibration failed: cached median {hit_median} cycles, uncached median {miss_median} cycles leave no separating threshold")]
    CalibrationFailed { hit_median: u64, miss_median: u64 },

    #[error("channel is not calibrated")]
    Uncalibrated,

    #[error("invalid channel geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("fault (signal {signal}) arrived outside the registered recovery window")]
    UnrecoverableFault { signal: i32 },

    #[error("transient harness failure: {0}")]
    HarnessFailure(String),

    #[error("timer unavailable: {0}")]
    TimerUnavailable(String),

    #[error("{probe} is architecturally permitted; the environment does not restrict it")]
    EnvironmentNotRestricted { probe: String },

    #[error("no consistent counter value leaked after {attempts} attempts")]
    NoLeakage { attempts: usize },

    #[error("performance counter {0} is not available")]
    CounterUnavailable(String),

    #[error("invalid profile at `{path}`: {message}")]
    ProfileInvalid { path: String, message: String },

    #[error("known-0 and known-1 calibration distributions are inseparable (medians {zero_median} / {one_median})")]
    NoSignal { zero_median: f64, one_median: f64 },

    #[error("no candidate address deviates from the walk-delta baseline")]
    NoAnomaly,

    #[error("per-bit averages are unimodal: {0}")]
    DegenerateDistribution(String),

    #[error("baselines for arguments {first} and {second} coincide")]
    AmbiguousBaselines { first: usize, second: usize },

    #[error("not supported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
