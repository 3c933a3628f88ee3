//! End-to-end checks of the vemoc binary and its artifact contract:
//! deterministic reruns, exact snapshot round-trips, the pinned example
//! runs, verify on stored artifacts, and the audit command.

use std::path::Path;
use std::process::{Command, Output};

use vemoc::config::OutputFormat;
use vemoc::io;
use vemoc_core::evolution::{evolution_rhs, EvolutionOptions, GainConfig};
use vemoc_core::integrator::{evolve, IntegratorConfig};
use vemoc_core::problems::builtin_problem;

fn vemoc(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vemoc"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn byte_identical_reruns_for_identical_config_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["first", "second"] {
        let out = dir.path().join(name);
        let result = vemoc(
            &[
                "run",
                "--problem",
                "brachA",
                "--tau-final",
                "2",
                "--snapshot-every",
                "1",
                "--seed",
                "7",
                "--out",
                out.to_str().unwrap(),
            ],
            &[],
        );
        assert!(result.status.success(), "{}", stderr_of(&result));
    }
    for file in ["history.csv", "snapshots.csv"] {
        let a = std::fs::read(dir.path().join("first").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("second").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn snapshot_round_trip_reproduces_the_rhs_bitwise() {
    let (def, traj0) = builtin_problem("brachB", 31).unwrap();
    let gains = GainConfig::defaults(&def);
    let config = IntegratorConfig {
        tau_final: 3.0,
        snapshot_every: Some(1.0),
        ..IntegratorConfig::default()
    };
    let options = EvolutionOptions::default();
    let (history, result) = evolve(&def, &traj0, &gains, &config, &options);
    result.unwrap();
    assert!(history.snapshots.len() >= 3);

    let dir = tempfile::tempdir().unwrap();
    for format in [OutputFormat::Csv, OutputFormat::Json] {
        let path = dir.path().join(format!("snap.{}", format.extension()));
        io::write_snapshots(&path, &history.snapshots, format).unwrap();
        let back = io::read_snapshots(&path, format).unwrap();
        assert_eq!(back.len(), history.snapshots.len());
        for ((_, original), (_, reread)) in history.snapshots.iter().zip(&back) {
            let (rhs_a, _, _) = evolution_rhs(&def, original, &gains, &options).unwrap();
            let (rhs_b, _, _) = evolution_rhs(&def, reread, &gains, &options).unwrap();
            assert_eq!(rhs_a.len(), rhs_b.len());
            for (a, b) in rhs_a.iter().zip(rhs_b.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "rhs differs after round trip");
            }
        }
    }
}

#[test]
fn run_defaults_reproduce_the_minimum_time_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("brachA");
    let result = vemoc(&["run", "--out", out.to_str().unwrap()], &[]);
    assert!(result.status.success(), "{}", stderr_of(&result));

    let manifest = io::read_manifest(&out.join("manifest.json")).unwrap();
    assert_eq!(manifest.config.problem, "brachA");
    assert_eq!(manifest.stop.as_deref(), Some("horizon"));
    let t_f = manifest.final_t_f.unwrap();
    assert!((t_f - 0.8165).abs() <= 2e-3, "t_f = {t_f}");
    let report = manifest.residual_report.expect("successful run reports residuals");
    assert!(report.r_u < 1e-2, "r_u = {}", report.r_u);
    assert!(!manifest.events.is_empty(), "floor activation must be logged");
}

#[test]
fn pinned_energy_example_meets_the_control_residual() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("lq");
    let result = vemoc(
        &[
            "run",
            "--problem",
            "lq",
            "--tau-final",
            "50",
            "--K",
            "1",
            "--grid-points",
            "101",
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert!(result.status.success(), "{}", stderr_of(&result));
    let manifest = io::read_manifest(&out.join("manifest.json")).unwrap();
    let report = manifest.residual_report.unwrap();
    assert!(report.r_u <= 1e-3, "r_u = {}", report.r_u);
    assert!(manifest.residual_u.unwrap() <= 1e-3);

    // the verify pass over the run directory reproduces the residual
    let check = vemoc(&["verify", out.to_str().unwrap()], &[]);
    assert!(check.status.success(), "{}", stderr_of(&check));
    let verdict = read_json(&out.join("verify.json"));
    assert!(verdict["residuals"]["r_u"].as_f64().unwrap() <= 1e-3);
}

#[test]
fn config_file_sets_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "# pinned example\nproblem = lq\ntau-final = 5\nK = 1\nformat = json\n",
    )
    .unwrap();
    let root = dir.path().join("runs");
    let result = vemoc(
        &["run", cfg.to_str().unwrap(), "--tau-final", "2"],
        &[("VEMOC_OUT", root.to_str().unwrap())],
    );
    assert!(result.status.success(), "{}", stderr_of(&result));

    // no --out: artifacts land under $VEMOC_OUT/<problem>
    let out = root.join("lq");
    let manifest = io::read_manifest(&out.join("manifest.json")).unwrap();
    assert_eq!(manifest.config.problem, "lq");
    assert_eq!(manifest.config.tau_final, 2.0);
    assert_eq!(manifest.config.format, OutputFormat::Json);
    assert!(out.join("history.json").is_file());

    // the json artifacts verify like the csv ones
    let check = vemoc(&["verify", out.to_str().unwrap()], &[]);
    assert!(check.status.success(), "{}", stderr_of(&check));
}

#[test]
fn verify_flags_an_unconverged_snapshot_without_failing() {
    let (_, seed) = builtin_problem("brachA", 101).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seed.csv");
    io::write_snapshots(&path, &[(0.0, seed)], OutputFormat::Csv).unwrap();

    let result = vemoc(
        &["verify", path.to_str().unwrap(), "--problem", "brachA"],
        &[],
    );
    assert!(result.status.success(), "{}", stderr_of(&result));
    let verdict = read_json(&dir.path().join("seed.verify.json"));
    let r_u = verdict["residuals"]["r_u"].as_f64().unwrap();
    assert!(r_u > 0.1, "seed trajectory must be far from stationary, r_u = {r_u}");
}

#[test]
fn verify_rejects_a_tampered_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let result = vemoc(
        &[
            "run",
            "--problem",
            "lq",
            "--tau-final",
            "2",
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert!(result.status.success(), "{}", stderr_of(&result));

    let path = out.join("snapshots.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    // node 0 of the last snapshot carries the pinned initial state
    let last_node0 = lines
        .iter()
        .rposition(|l| l.split(',').nth(1) == Some("0"))
        .unwrap();
    let mut cells: Vec<String> = lines[last_node0].split(',').map(String::from).collect();
    cells[3] = "1.0000000000000000e-3".into();
    lines[last_node0] = cells.join(",");
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();

    let check = vemoc(&["verify", out.to_str().unwrap()], &[]);
    assert!(!check.status.success(), "tampered snapshot must be rejected");
    assert!(
        stderr_of(&check).contains("validation error"),
        "got: {}",
        stderr_of(&check)
    );
}

#[test]
fn list_problems_names_the_builtins() {
    let result = vemoc(&["list-problems"], &[]);
    assert!(result.status.success());
    let text = stdout_of(&result);
    for id in ["brachA", "brachB", "lq"] {
        assert!(text.contains(id), "missing {id} in:\n{text}");
    }
}

#[test]
fn audit_passes_for_every_builtin() {
    let result = vemoc(&["audit", "--seed", "42"], &[]);
    assert!(result.status.success(), "{}", stderr_of(&result));
    let text = stdout_of(&result);
    assert!(text.contains("brachA f_x"));
    assert!(!text.contains("FAIL"), "{text}");
}

#[test]
fn bad_flags_fail_before_touching_the_disk() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let result = vemoc(
        &[
            "run",
            "--problem",
            "lq",
            "--ktf",
            "0.05",
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert!(!result.status.success());
    assert!(stderr_of(&result).contains("fixed horizon"), "{}", stderr_of(&result));
    assert!(!out.exists(), "failed configuration must not leave artifacts");
}
