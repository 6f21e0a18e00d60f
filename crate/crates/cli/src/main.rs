use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use regleak::backend::{load_profile, Backend, BackendKind, LeakageProfile, SimBackend};
use regleak::counterleak::{
    CounterLeak, CounterSelector, ProgrammedBy, TraceMetadata, DEFAULT_RETRIES,
};
use regleak::env::{check_environment, EnvCheckResult, EnvPaths};
use regleak::harness::{parse_cpu_list, pin_current_thread, FaultStrategy};
use regleak::probes::{full_scan, render_markdown, Catalog, ScanOptions};
use regleak::stats::CycleStats;
use regleak::studies::{kaslr, presets, rsa, spectre, zigzagger, Study};

/// Average cycles per one-byte counter leak measured on a vulnerable CPU,
/// printed next to hardware measurements for comparison.
const REFERENCE_SAMPLE_CYCLES: u64 = 348_257;

#[derive(Parser)]
#[command(
    name = "regleak",
    version,
    about = "Privileged-register leakage scanner and counter-leak toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Test every catalog probe for transient leakage.
    Scan(ScanArgs),
    /// Sample a performance counter through transient reads.
    Counterleak(CounterleakArgs),
    /// Run one case study.
    Study(StudyArgs),
    /// Check the machine configuration hardware measurements need.
    Env(EnvArgs),
}

#[derive(Args, Clone)]
struct BackendArgs {
    /// Execution backend.
    #[arg(long, env = "REGLEAK_BACKEND", value_parser = parse_backend, default_value = "sim")]
    backend: BackendKind,
    /// Leakage profile for the simulator.
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Simulator seed; defaults to the profile's.
    #[arg(long)]
    seed: Option<u64>,
    /// Fault handling for hardware transient bodies.
    #[arg(long, value_enum, default_value_t = Strategy::Signal)]
    strategy: Strategy,
    /// Run hardware measurements even when environment checks fail.
    #[arg(long)]
    force: bool,
}

#[derive(Copy, Clone, ValueEnum)]
enum Strategy {
    Signal,
    Tsx,
    Speculative,
}

impl From<Strategy> for FaultStrategy {
    fn from(s: Strategy) -> Self {
        match s {
            Strategy::Signal => FaultStrategy::SignalHandler,
            Strategy::Tsx => FaultStrategy::TransactionAbort,
            Strategy::Speculative => FaultStrategy::SpeculativeSuppression,
        }
    }
}

fn parse_backend(s: &str) -> std::result::Result<BackendKind, String> {
    s.parse().map_err(|e: regleak::Error| e.to_string())
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Md,
}

#[derive(Args)]
struct ScanArgs {
    #[command(flatten)]
    backend: BackendArgs,
    /// Channel stride in bytes; repeat or comma-separate to sweep.
    #[arg(long, value_delimiter = ',', default_value = "4096")]
    stride: Vec<usize>,
    /// Rounds per probe, operand and bit offset.
    #[arg(long, default_value_t = 1000)]
    rounds: u64,
    /// Comma-separated probe names; all probes by default.
    #[arg(long, value_delimiter = ',')]
    probes: Vec<String>,
    /// Low register bits covered (32 or 64).
    #[arg(long, default_value_t = 32)]
    coverage_bits: u32,
    /// Unix time stamped into the report; the current time by default.
    #[arg(long)]
    timestamp: Option<u64>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Output file; standard output by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CounterleakArgs {
    #[command(flatten)]
    backend: BackendArgs,
    /// Counter event name.
    #[arg(long, default_value = "INSTR_RETIRED")]
    event: String,
    /// `rdpmc` index of the counter.
    #[arg(long, value_parser = parse_u32)]
    index: Option<u32>,
    /// Low bytes leaked per read (1 to 4).
    #[arg(long, default_value_t = 4)]
    bytes: usize,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = DEFAULT_RETRIES)]
    retries: usize,
    /// Program the counter through perf first instead of assuming it is
    /// already counting.
    #[arg(long)]
    setup_helper: bool,
    /// Trace output; CSV when the name ends in `.csv`, JSON otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StudyArgs {
    #[arg(value_parser = parse_study)]
    name: Study,
    #[command(flatten)]
    backend: BackendArgs,
    /// Counter index override.
    #[arg(long, value_parser = parse_u32)]
    index: Option<u32>,
    /// Simulated noise. RSA: per-bit standard deviation in units of the
    /// bit-0/1 separation. Others: standard deviation of each counter read.
    #[arg(long)]
    noise: Option<f64>,
    /// RSA traces.
    #[arg(long, default_value_t = rsa::DEFAULT_TRACES)]
    traces: usize,
    /// RSA key length in bits.
    #[arg(long, default_value_t = rsa::DEFAULT_KEY_BITS)]
    key_bits: usize,
    /// KASLR candidate count.
    #[arg(long, default_value_t = kaslr::DEFAULT_CANDIDATES)]
    candidates: usize,
    /// Zigzagger measurements per argument; Spectre samples per bit.
    #[arg(long)]
    samples: Option<usize>,
    /// Spectre secret as hex; random by default.
    #[arg(long)]
    secret: Option<String>,
    /// Result JSON output; standard output by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EnvArgs {
    #[arg(long, value_parser = parse_backend, default_value = "hw")]
    backend: BackendKind,
    /// Inspect a filesystem tree other than `/`.
    #[arg(long, hide = true)]
    root: Option<PathBuf>,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

fn parse_u32(s: &str) -> std::result::Result<u32, String> {
    match s.strip_prefix("0x") {
        Some(hex) => u32::from_str_radix(hex, 16),
        None => s.parse(),
    }
    .map_err(|e| e.to_string())
}

fn parse_study(s: &str) -> std::result::Result<Study, String> {
    s.parse().map_err(|e: regleak::Error| e.to_string())
}

/// Environment failure: exit code 2.
#[derive(Debug)]
struct EnvFailure(String);

impl std::fmt::Display for EnvFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for EnvFailure {}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                stdout.write_all(b"\n")?;
            }
            Ok(())
        }
    }
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn sim_backend(
    args: &BackendArgs,
    fallback: impl FnOnce() -> LeakageProfile,
) -> Result<SimBackend> {
    let profile = match &args.profile {
        Some(path) => load_profile(path).with_context(|| format!("loading {}", path.display()))?,
        None => fallback(),
    };
    let seed = args.seed.unwrap_or(profile.seed);
    Ok(SimBackend::with_seed(profile, seed)?)
}

/// Refuse hardware measurement on a misconfigured machine unless forced,
/// then pin to an isolated core if there is one.
fn prepare_hardware(args: &BackendArgs) -> Result<()> {
    let env = check_environment(&EnvPaths::system());
    if !env.overall_pass {
        let failed = env.failures().join(", ");
        if !args.force {
            return Err(EnvFailure(format!(
                "environment checks failed: {failed}\n{}\nrerun with --force to measure anyway",
                env.render_table()
            ))
            .into());
        }
        eprintln!("warning: environment checks failed ({failed}); continuing because of --force");
    }
    let isolated = fs::read_to_string("/sys/devices/system/cpu/isolated").unwrap_or_default();
    if let Some(&cpu) = parse_cpu_list(&isolated).first() {
        if !pin_current_thread(cpu) {
            eprintln!("warning: could not pin to isolated core {cpu}");
        }
    }
    Ok(())
}

#[cfg(all(target_arch = "x86_64", target_os = "linux"))]
fn hw_backend(args: &BackendArgs) -> Result<regleak::backend::hw::HwBackend> {
    prepare_hardware(args)?;
    Ok(regleak::backend::hw::HwBackend::new(args.strategy.into())?)
}

/// Run `$body` with `$b` bound to the selected backend.
macro_rules! with_backend {
    ($args:expr, $fallback:expr, |$b:ident| $body:expr) => {{
        match $args.backend {
            BackendKind::Simulation => {
                let mut backend = sim_backend(&$args, $fallback)?;
                let $b = &mut backend;
                $body
            }
            BackendKind::Hardware => {
                #[cfg(all(target_arch = "x86_64", target_os = "linux"))]
                {
                    let mut backend = hw_backend(&$args)?;
                    let $b = &mut backend;
                    $body
                }
                #[cfg(not(all(target_arch = "x86_64", target_os = "linux")))]
                {
                    bail!("the hardware backend needs x86_64 Linux")
                }
            }
        }
    }};
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn cmd_scan(args: ScanArgs) -> Result<()> {
    let catalog = if args.probes.is_empty() {
        Catalog::full()
    } else {
        Catalog::full().select(&args.probes)?
    };
    let mut options = ScanOptions {
        rounds: args.rounds,
        strides: args.stride.clone(),
        coverage_bits: args.coverage_bits,
        timestamp: args.timestamp.unwrap_or_else(now_unix),
        ..Default::default()
    };
    let report = with_backend!(args.backend, || LeakageProfile::silent("silent"), |b| {
        if b.kind() == BackendKind::Simulation {
            options.profile = Some(
                args.backend
                    .profile
                    .as_deref()
                    .and_then(Path::file_stem)
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "silent".into()),
            );
        }
        full_scan(b, &catalog, &options)?
    });
    let text = match args.format {
        Format::Json => report.to_json()? + "\n",
        Format::Md => render_markdown(&report),
    };
    write_output(args.out.as_deref(), &text)
}

#[derive(Serialize)]
struct CounterleakSummary {
    event: String,
    counter_index: u32,
    bytes: usize,
    samples: usize,
    self_noise: i64,
    sample_cycles: CycleStats,
    encode_cycles: CycleStats,
    max_probes_per_sample: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference_sample_cycles: Option<u64>,
}

fn default_index(event: &str) -> u32 {
    Study::ALL
        .into_iter()
        .map(Study::default_selector)
        .find(|s| s.event_name == event)
        .map_or(0, |s| s.counter_index)
}

fn cmd_counterleak(args: CounterleakArgs) -> Result<()> {
    if args.samples == 0 {
        bail!("--samples must be positive");
    }
    let mut selector = CounterSelector::new(
        args.index.unwrap_or_else(|| default_index(&args.event)),
        args.event.clone(),
    );
    if args.setup_helper {
        selector.programmed_by = ProgrammedBy::SetupHelper;
    }
    let (series, summary) =
        with_backend!(args.backend, || presets::counter_profile("counters"), |b| {
            let hardware = b.kind() == BackendKind::Hardware;
            let mut leak = CounterLeak::new(b, selector.clone(), args.bytes, args.retries)?;
            let self_noise = leak.self_noise()?;
            let (series, samples) =
                leak.sample_series(args.samples, TraceMetadata::new("idle", 0))?;
            let sample_cycles: Vec<u64> = samples.iter().map(|s| s.sample_cycles).collect();
            let encode_cycles: Vec<u64> = samples.iter().map(|s| s.encode_cycles).collect();
            let summary = CounterleakSummary {
                event: selector.event_name.clone(),
                counter_index: selector.counter_index,
                bytes: args.bytes,
                samples: args.samples,
                self_noise,
                sample_cycles: CycleStats::from_samples(&sample_cycles).expect("nonempty"),
                encode_cycles: CycleStats::from_samples(&encode_cycles).expect("nonempty"),
                max_probes_per_sample: samples.iter().map(|s| s.probe_count).max().unwrap_or(0),
                reference_sample_cycles: hardware.then_some(REFERENCE_SAMPLE_CYCLES),
            };
            (series, summary)
        });
    if let Some(path) = &args.out {
        let is_csv = path.extension().is_some_and(|e| e == "csv");
        if is_csv {
            let file =
                fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            series.write_csv(file)?;
        } else {
            fs::write(path, series.to_json()? + "\n")?;
        }
    }
    write_output(None, &json(&summary)?)
}

fn parse_hex_bytes(s: &str) -> Result<Vec<u8>> {
    let s = s.trim_start_matches("0x");
    if s.len() % 2 != 0 {
        bail!("secret must have an even number of hex digits");
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|e| anyhow!("secret: {e}")))
        .collect()
}

/// SplitMix64, for deriving planted secrets from the seed.
fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Serialize)]
struct KaslrOutput {
    #[serde(skip_serializing_if = "Option::is_none")]
    planted_base: Option<String>,
    detected_base: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    correct: Option<bool>,
    candidates: usize,
    threshold_z: f64,
    median: f64,
    scale: f64,
}

fn cmd_study(args: StudyArgs) -> Result<()> {
    let name = args.name;
    let result = run_study(&args).with_context(|| format!("study {name}"))?;
    write_output(args.out.as_deref(), &result)
}

fn run_study(args: &StudyArgs) -> Result<String> {
    let mut selector = args.name.default_selector();
    if let Some(i) = args.index {
        selector.counter_index = i;
    }
    let seed = args.backend.seed.unwrap_or(0);
    let sim = args.backend.backend == BackendKind::Simulation;
    match args.name {
        Study::Spectre => {
            let secret = match &args.secret {
                Some(hex) => parse_hex_bytes(hex)?,
                None => {
                    let mut s = seed;
                    splitmix(&mut s).to_le_bytes().to_vec()
                }
            };
            let mut params = spectre::SpectreParams::default();
            if let Some(n) = args.samples {
                params.samples_per_bit = n;
            }
            let noise = args.noise.unwrap_or(8.0);
            let r = with_backend!(args.backend, || presets::spectre_profile(noise), |b| {
                spectre::run(b, selector, &secret, &params)?
            });
            json(&r)
        }
        Study::Kaslr => {
            let candidates = kaslr::candidate_range(
                kaslr::KERNEL_RANGE_START,
                kaslr::KERNEL_ALIGN,
                args.candidates,
            );
            let mut s = seed;
            let planted = (!candidates.is_empty() && sim && args.backend.profile.is_none())
                .then(|| candidates[(splitmix(&mut s) % candidates.len() as u64) as usize]);
            let noise = args.noise.unwrap_or(2.0);
            let r = with_backend!(
                args.backend,
                || presets::kaslr_profile(planted.unwrap_or(0), noise),
                |b| kaslr::scan(b, selector, &candidates)?
            );
            json(&KaslrOutput {
                planted_base: planted.map(|p| format!("{p:#x}")),
                detected_base: r.detected_base.map(|d| format!("{d:#x}")),
                correct: planted.map(|p| r.detected_base == Some(p)),
                candidates: candidates.len(),
                threshold_z: r.threshold_z,
                median: r.median,
                scale: r.scale,
            })
        }
        Study::Rsa => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let exponent = rsa::random_exponent(&mut rng, args.key_bits);
            let checkpoints: Vec<usize> = [10, 100, 1_000, 10_000]
                .into_iter()
                .filter(|&c| c <= args.traces)
                .collect();
            if sim && args.backend.profile.is_none() {
                let noise = args.noise.unwrap_or(1.0);
                return json(&rsa::recover_synthetic(
                    &exponent,
                    args.traces,
                    noise,
                    seed,
                    &checkpoints,
                )?);
            }
            let victim = rsa::SquareMultiplyVictim::new(
                rsa::random_exponent(&mut rng, args.key_bits.max(16)) | num_one(),
                rsa::random_exponent(&mut rng, args.key_bits.max(16) - 1),
                exponent,
            )?;
            let r = with_backend!(args.backend, || presets::rsa_profile(0.0), |b| {
                let mut leak = CounterLeak::new(b, selector, rsa::COUNTER_BYTES, DEFAULT_RETRIES)?;
                rsa::recover(&mut leak, &victim, args.traces, &checkpoints)?
            });
            json(&r)
        }
        Study::Zigzagger => {
            let samples = args.samples.unwrap_or(zigzagger::DEFAULT_SAMPLES);
            let noise = args.noise.unwrap_or(1.0);
            let r = with_backend!(args.backend, || presets::zigzagger_profile(noise), |b| {
                zigzagger::run(b, selector, samples, zigzagger::DEFAULT_CALIBRATION_SAMPLES)?
            });
            json(&r)
        }
    }
}

fn num_one() -> num_bigint::BigUint {
    num_bigint::BigUint::from(1u32)
}

fn cmd_env(args: EnvArgs) -> Result<()> {
    let result = match args.backend {
        BackendKind::Simulation => EnvCheckResult::simulated(),
        BackendKind::Hardware => {
            let paths = match &args.root {
                Some(root) => EnvPaths::under(root),
                None => EnvPaths::system(),
            };
            check_environment(&paths)
        }
    };
    let text = if args.json {
        json(&result)?
    } else {
        result.render_table()
    };
    write_output(None, &text)?;
    if result.overall_pass {
        Ok(())
    } else {
        Err(EnvFailure(format!("failed checks: {}", result.failures().join(", "))).into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Scan(a) => cmd_scan(a),
        Command::Counterleak(a) => cmd_counterleak(a),
        Command::Study(a) => cmd_study(a),
        Command::Env(a) => cmd_env(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<EnvFailure>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
