use std::path::PathBuf;
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn regleak(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regleak"))
        .args(args)
        .env_remove("REGLEAK_BACKEND")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn scan_markdown_matches_golden() {
    for name in ["J4005", "Epyc7252"] {
        let profile = fixtures().join(format!("{name}.json"));
        let out = regleak(&[
            "scan",
            "--profile",
            profile.to_str().unwrap(),
            "--timestamp",
            "0",
            "--format",
            "md",
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let golden = std::fs::read_to_string(fixtures().join(format!("golden/{name}.md"))).unwrap();
        assert_eq!(stdout(&out), golden, "{name}");
    }
}

#[test]
fn scan_json_is_deterministic() {
    let profile = fixtures().join("i3-7100T.json");
    let args = [
        "scan",
        "--profile",
        profile.to_str().unwrap(),
        "--probes",
        "rdpmc,str,rdfsbase",
        "--rounds",
        "200",
        "--timestamp",
        "42",
    ];
    let a = regleak(&args);
    let b = regleak(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let report: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(report["probes"].as_array().unwrap().len(), 3);
}

#[test]
fn env_on_a_restricted_tree_passes() {
    let root = tempfile::tempdir().unwrap();
    let write = |rel: &str, text: &str| {
        let p = root.path().join(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, text).unwrap();
    };
    write("sys/devices/cpu/rdpmc", "0\n");
    write("proc/cmdline", "quiet nofsgsbase isolcpus=3\n");
    write("sys/devices/system/cpu/isolated", "3\n");
    write(
        "proc/cpuinfo",
        "processor\t: 0\nmicrocode\t: 0xf0\nflags\t\t: fpu\n",
    );
    write("proc/self/status", "Cpus_allowed_list:\t3\n");
    let before = std::fs::read(root.path().join("proc/cmdline")).unwrap();

    let out = regleak(&["env", "--root", root.path().to_str().unwrap(), "--json"]);
    assert!(out.status.success(), "{}", stdout(&out));
    let result: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(result["overall_pass"], true);
    assert_eq!(
        std::fs::read(root.path().join("proc/cmdline")).unwrap(),
        before
    );
}

#[test]
fn env_failure_exits_two_and_names_the_check() {
    let root = tempfile::tempdir().unwrap();
    let write = |rel: &str, text: &str| {
        let p = root.path().join(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, text).unwrap();
    };
    write("sys/devices/cpu/rdpmc", "2\n");
    write("proc/cmdline", "quiet nofsgsbase\n");
    let out = regleak(&["env", "--root", root.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("perf-counter-user-access"));
}

#[test]
fn unknown_probe_is_an_error() {
    let out = regleak(&["scan", "--probes", "cpuid"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cpuid"));
}

#[test]
fn studies_succeed_on_the_simulator() {
    let out = regleak(&["study", "kaslr", "--seed", "5"]);
    assert!(out.status.success());
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["correct"], true);

    let out = regleak(&["study", "rsa", "--traces", "1000", "--key-bits", "256"]);
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(r["accuracy"].as_f64().unwrap() >= 0.999);

    let out = regleak(&["study", "zigzagger", "--samples", "100"]);
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["success_rate"], 1.0);
}

#[test]
fn study_errors_name_the_study() {
    let out = regleak(&["study", "spectre", "--secret", "abc"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("study spectre"));
}

#[test]
fn counterleak_writes_a_csv_trace() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    let out = regleak(&[
        "counterleak",
        "--bytes",
        "2",
        "--samples",
        "20",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["max_probes_per_sample"].as_u64().unwrap() <= 512);
    let csv = std::fs::read_to_string(path).unwrap();
    assert_eq!(csv.lines().count(), 21);
}
