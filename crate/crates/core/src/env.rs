//! Read-only inspection of the settings hardware measurements rely on:
//! restricted counter and fs/gs base access, an isolated core, pinning and
//! a readable microcode revision.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::harness::parse_cpu_list;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    /// Hardware probing refuses to start when this fails.
    Mandatory,
    Advisory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvCheck {
    pub name: String,
    pub expected: String,
    pub observed: String,
    pub pass: bool,
    pub severity: Severity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remediation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvCheckResult {
    pub checks: Vec<EnvCheck>,
    pub overall_pass: bool,
}

pub const CHECK_COUNTER_ACCESS: &str = "perf-counter-user-access";
pub const CHECK_FSGSBASE: &str = "fsgsbase-user-access";
pub const CHECK_ISOLATED_CORE: &str = "isolated-core";
pub const CHECK_PINNING: &str = "core-pinning";
pub const CHECK_MICROCODE: &str = "microcode-revision";

/// Files the checks read, relative to a filesystem root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvPaths {
    /// Counter access policy files; the first one present wins.
    pub rdpmc: Vec<PathBuf>,
    pub cmdline: PathBuf,
    pub isolated: PathBuf,
    pub cpuinfo: PathBuf,
    pub status: PathBuf,
}

impl EnvPaths {
    pub fn under(root: impl AsRef<Path>) -> Self {
        let root = root.as_ref();
        Self {
            rdpmc: [
                "sys/devices/cpu/rdpmc",
                "sys/devices/cpu_core/rdpmc",
                "sys/devices/cpu_atom/rdpmc",
            ]
            .iter()
            .map(|p| root.join(p))
            .collect(),
            cmdline: root.join("proc/cmdline"),
            isolated: root.join("sys/devices/system/cpu/isolated"),
            cpuinfo: root.join("proc/cpuinfo"),
            status: root.join("proc/self/status"),
        }
    }

    pub fn system() -> Self {
        Self::under("/")
    }
}

impl EnvCheckResult {
    pub fn from_checks(checks: Vec<EnvCheck>) -> Self {
        let overall_pass = checks
            .iter()
            .filter(|c| c.severity == Severity::Mandatory)
            .all(|c| c.pass);
        Self {
            checks,
            overall_pass,
        }
    }

    /// The simulator emulates a correctly configured machine.
    pub fn simulated() -> Self {
        let names = [
            (CHECK_COUNTER_ACCESS, Severity::Mandatory),
            (CHECK_FSGSBASE, Severity::Mandatory),
            (CHECK_ISOLATED_CORE, Severity::Advisory),
            (CHECK_PINNING, Severity::Advisory),
            (CHECK_MICROCODE, Severity::Advisory),
        ];
        Self::from_checks(
            names
                .into_iter()
                .map(|(name, severity)| EnvCheck {
                    name: name.into(),
                    expected: "simulated".into(),
                    observed: "simulated".into(),
                    pass: true,
                    severity,
                    remediation: None,
                })
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> Option<&EnvCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Names of failed mandatory checks.
    pub fn failures(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| c.severity == Severity::Mandatory && !c.pass)
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "| Check | Expected | Observed | Result |");
        let _ = writeln!(out, "|---|---|---|---|");
        for c in &self.checks {
            let result = match (c.pass, c.severity) {
                (true, _) => "pass",
                (false, Severity::Mandatory) => "FAIL",
                (false, Severity::Advisory) => "advisory",
            };
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} |",
                c.name, c.expected, c.observed, result
            );
        }
        let hints: Vec<&str> = self
            .checks
            .iter()
            .filter(|c| !c.pass)
            .filter_map(|c| c.remediation.as_deref())
            .collect();
        if !hints.is_empty() {
            out.push_str("\nRemediation:\n");
            for h in hints {
                let _ = writeln!(out, "- {h}");
            }
        }
        let _ = writeln!(
            out,
            "\nOverall: {}",
            if self.overall_pass { "pass" } else { "FAIL" }
        );
        out
    }
}

fn read(path: &Path) -> Option<String> {
    fs::read_to_string(path).ok()
}

fn cmdline_has(cmdline: &str, key: &str) -> Option<String> {
    cmdline
        .split_whitespace()
        .find(|w| *w == key || w.starts_with(&format!("{key}=")))
        .map(str::to_string)
}

fn cpuinfo_field<'a>(cpuinfo: &'a str, name: &str) -> Option<&'a str> {
    cpuinfo
        .lines()
        .filter_map(|l| l.split_once(':'))
        .find(|(k, _)| k.trim() == name)
        .map(|(_, v)| v.trim())
}

fn counter_access(paths: &EnvPaths) -> EnvCheck {
    let expected = "0 (no user rdpmc)".to_string();
    let remediation = Some("write 0 to /sys/devices/cpu/rdpmc (as root) before measuring".into());
    match paths.rdpmc.iter().find_map(|p| read(p).map(|v| (p, v))) {
        Some((path, value)) => {
            let value = value.trim().to_string();
            EnvCheck {
                name: CHECK_COUNTER_ACCESS.into(),
                expected,
                pass: value == "0",
                observed: format!("{value} ({})", path.display()),
                severity: Severity::Mandatory,
                remediation,
            }
        }
        None => EnvCheck {
            name: CHECK_COUNTER_ACCESS.into(),
            expected,
            observed: "unknown (no rdpmc policy file)".into(),
            pass: false,
            severity: Severity::Advisory,
            remediation,
        },
    }
}

fn fsgsbase_access(paths: &EnvPaths) -> EnvCheck {
    let remediation = Some("boot with the `nofsgsbase` kernel parameter".into());
    let expected = "nofsgsbase or no fsgsbase support".to_string();
    let cmdline = read(&paths.cmdline);
    let cpuinfo = read(&paths.cpuinfo);
    let disabled_by_cmdline = cmdline
        .as_deref()
        .and_then(|c| cmdline_has(c, "nofsgsbase"));
    let flag = cpuinfo
        .as_deref()
        .and_then(|c| cpuinfo_field(c, "flags"))
        .map(|f| f.split_whitespace().any(|x| x == "fsgsbase"));
    let (observed, pass, severity) = match (disabled_by_cmdline, flag) {
        (Some(p), _) => (p, true, Severity::Mandatory),
        (None, Some(false)) => ("fsgsbase not advertised".into(), true, Severity::Mandatory),
        (None, Some(true)) => ("fsgsbase enabled".into(), false, Severity::Mandatory),
        (None, None) if cmdline.is_some() => {
            ("unknown (no cpu flags)".into(), false, Severity::Advisory)
        }
        (None, None) => ("unknown".into(), false, Severity::Advisory),
    };
    EnvCheck {
        name: CHECK_FSGSBASE.into(),
        expected,
        observed,
        pass,
        severity,
        remediation,
    }
}

fn isolated_core(paths: &EnvPaths) -> EnvCheck {
    let from_sysfs = read(&paths.isolated)
        .map(|s| parse_cpu_list(&s))
        .unwrap_or_default();
    let from_cmdline = read(&paths.cmdline)
        .and_then(|c| cmdline_has(&c, "isolcpus"))
        .map(|w| {
            let list = w.trim_start_matches("isolcpus=");
            // Flags such as `domain,managed_irq,` may precede the list.
            parse_cpu_list(
                list.rsplit(|c: char| c.is_ascii_alphabetic())
                    .next()
                    .unwrap_or(""),
            )
        })
        .unwrap_or_default();
    let cpus = if from_sysfs.is_empty() {
        from_cmdline
    } else {
        from_sysfs
    };
    EnvCheck {
        name: CHECK_ISOLATED_CORE.into(),
        expected: "at least one isolcpus core".into(),
        observed: if cpus.is_empty() {
            "none".into()
        } else {
            format!("{cpus:?}")
        },
        pass: !cpus.is_empty(),
        severity: Severity::Advisory,
        remediation: Some("boot with `isolcpus=<core>` and run pinned to that core".into()),
    }
}

fn pinning(paths: &EnvPaths) -> EnvCheck {
    let allowed = read(&paths.status).and_then(|s| {
        s.lines()
            .find_map(|l| l.strip_prefix("Cpus_allowed_list:"))
            .map(|v| v.trim().to_string())
    });
    let (observed, pass) = match allowed {
        Some(list) => {
            let n = parse_cpu_list(&list).len();
            (list, n == 1)
        }
        None => ("unknown".into(), false),
    };
    EnvCheck {
        name: CHECK_PINNING.into(),
        expected: "affinity of exactly one core".into(),
        observed,
        pass,
        severity: Severity::Advisory,
        remediation: Some("run under `taskset -c <isolated core>`".into()),
    }
}

fn microcode(paths: &EnvPaths) -> EnvCheck {
    let rev = read(&paths.cpuinfo)
        .as_deref()
        .and_then(|c| cpuinfo_field(c, "microcode").map(str::to_string));
    EnvCheck {
        name: CHECK_MICROCODE.into(),
        expected: "readable".into(),
        pass: rev.is_some(),
        observed: rev.unwrap_or_else(|| "unknown".into()),
        severity: Severity::Advisory,
        remediation: None,
    }
}

/// Inspect the machine. Only reads files.
pub fn check_environment(paths: &EnvPaths) -> EnvCheckResult {
    EnvCheckResult::from_checks(vec![
        counter_access(paths),
        fsgsbase_access(paths),
        isolated_core(paths),
        pinning(paths),
        microcode(paths),
    ])
}
