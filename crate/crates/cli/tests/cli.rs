use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn npi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_npi"))
        .args(args)
        .arg("--quiet")
        .output()
        .expect("spawn npi")
}

fn ok(args: &[&str]) {
    let out = npi(args);
    assert!(
        out.status.success(),
        "npi {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn three_node(dir: &Path) -> std::path::PathBuf {
    let sc = dir.join("sc.csv");
    ok(&["gen-sc", "--three-node", "--out", s(&sc)]);
    sc
}

#[test]
fn simulate_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let sc = three_node(dir.path());
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        ok(&["simulate", "--sc", s(&sc), "--steps", "5000", "--seed", seed, "--out", s(&out)]);
        std::fs::read(out).unwrap()
    };
    let a = run("a.bin", "3");
    assert_eq!(a, run("b.bin", "3"));
    assert_ne!(a, run("c.bin", "4"));
}

#[test]
fn evaluating_ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let sc = three_node(dir.path());
    let gt = dir.path().join("gt.ec");
    ok(&["ground-truth-ec", "--sc", s(&sc), "--samples", "5", "--out", s(&gt)]);
    let report = dir.path().join("report.csv");
    ok(&["evaluate", "--est", s(&gt), "--real", s(&gt), "--out", s(&report)]);
    let text = std::fs::read_to_string(report).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "ec_correlation_pooled").unwrap();
    let r: f64 = row[col].parse().unwrap();
    assert!((r - 1.0).abs() < 1e-12);
}

#[test]
fn failures_map_to_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let sc = three_node(dir.path());
    let junk = dir.path().join("junk.npic");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let missing = dir.path().join("missing.npic");
    let out = dir.path().join("x");
    let cases: Vec<(Vec<&str>, i32, &str)> = vec![
        (vec!["simulate", "--sc", s(&sc)], 2, "usage"),
        (vec!["no-such-command"], 2, "usage"),
        (
            vec!["simulate", "--sc", s(&sc), "--steps", "100", "--param", "dt=-1", "--out", s(&out)],
            3,
            "invalid-value",
        ),
        (
            vec!["perturb", "--ckpt", s(&missing), "--pairs", s(dir.path()), "--out", s(&out)],
            4,
            "io",
        ),
        (
            vec!["perturb", "--ckpt", s(&junk), "--pairs", s(dir.path()), "--out", s(&out)],
            5,
            "bad-format",
        ),
    ];
    for (args, code, kind) in cases {
        let o = npi(&args);
        assert_eq!(o.status.code(), Some(code), "{args:?}");
        let err = String::from_utf8(o.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with(&format!("npi: error kind={kind} code={code}: ")), "{err}");
    }
}

#[test]
fn manifest_records_config_precedence_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let sc = three_node(dir.path());
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# overrides\nsteps = 3000\nseed = 11\njr.noise_sd = 1.5\n").unwrap();
    let out = dir.path().join("ts.bin");
    ok(&["simulate", "--config", s(&cfg), "--seed", "12", "--sc", s(&sc), "--out", s(&out)]);

    let manifest_path = dir.path().join("ts.bin.manifest.json");
    let m: Value = serde_json::from_str(&std::fs::read_to_string(&manifest_path).unwrap()).unwrap();
    let entry = |key: &str| {
        m["config"]
            .as_array()
            .unwrap()
            .iter()
            .find(|e| e["key"] == key)
            .unwrap_or_else(|| panic!("no {key}"))
            .clone()
    };
    assert_eq!(entry("seed")["value"], "12");
    assert_eq!(entry("seed")["source"], "cli");
    assert_eq!(entry("steps")["value"], "3000");
    assert_eq!(entry("steps")["source"], "file");
    assert_eq!(entry("jr.noise_sd")["source"], "file");
    assert_eq!(entry("jr.dt")["source"], "default");
    let digest = m["outputs"][0]["sha256"].as_str().unwrap().to_string();

    let first = std::fs::read(&out).unwrap();
    std::fs::remove_file(&out).unwrap();
    ok(&["replay", "--from", s(&manifest_path)]);
    assert_eq!(std::fs::read(&out).unwrap(), first);
    let m: Value = serde_json::from_str(&std::fs::read_to_string(&manifest_path).unwrap()).unwrap();
    assert_eq!(m["outputs"][0]["sha256"], digest.as_str());
}

#[test]
fn plots_and_granger_outputs_exist() {
    let dir = tempfile::tempdir().unwrap();
    let sc = three_node(dir.path());
    let ts = dir.path().join("ts.bin");
    ok(&["simulate", "--sc", s(&sc), "--steps", "50000", "--out", s(&ts)]);
    let gc = dir.path().join("gc.csv");
    ok(&["granger", "--ts", s(&ts), "--maxlag", "4", "--out", s(&gc)]);
    let svg = dir.path().join("gc.svg");
    ok(&["export-plot", "--in", s(&gc), "--svg", s(&svg)]);
    assert!(std::fs::read_to_string(svg).unwrap().starts_with("<svg"));
    let text = std::fs::read_to_string(gc).unwrap();
    assert_eq!(text.lines().count(), 4, "header plus one row per target");
}
