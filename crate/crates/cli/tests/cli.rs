use std::fs;
use std::path::Path;
use std::process::Command;

use kinlab::spectral::eigenvalue_scaled;
use kinlab::ManifoldSpec;
use kinlab_cli::config::Task;
use kinlab_cli::{parse_config, CommandKind, ExperimentPlan};

fn kinlab(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_kinlab")).args(args).current_dir(dir).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn minimal_config_gets_defaults() {
    let plan = parse_config(CommandKind::SimSphere, "n = 8\n").unwrap();
    let spec = plan.spec.unwrap();
    assert_eq!(spec.n_particles(), 8);
    assert_eq!(spec.eps(), 1.0);
    match plan.task {
        Task::Simulate { config, observables, .. } => {
            assert_eq!(config.dt, 1e-3);
            assert_eq!(config.n_replicas, 256);
            assert_eq!(observables, vec!["p1_deg1_1".to_string()]);
        }
        other => panic!("unexpected task {other:?}"),
    }
    // An empty file is valid too.
    assert!(parse_config(CommandKind::Spectrum, "").is_ok());
}

#[test]
fn negative_eps0_is_rejected_by_name() {
    let err = parse_config(CommandKind::Spectrum, "u = 1, 1, 0\neps = 0.9\n").unwrap_err();
    assert_eq!(err.messages.len(), 1);
    assert!(err.messages[0].contains("ε₀") && err.messages[0].contains("> 0"), "{err}");
    assert!(err.messages[0].starts_with("line 2"), "{err}");
}

#[test]
fn duplicate_key_names_both_lines() {
    let err = parse_config(CommandKind::Spectrum, "n = 4\n# comment\nj_max = 2\nn = 5\n").unwrap_err();
    assert!(err.messages.iter().any(|m| m.contains("`n`") && m.contains("lines 1 and 4")), "{err}");
}

#[test]
fn all_violations_are_collected() {
    let text = "n = 1\ndt = 0\nreplicas = 0\nwhat = 3\nobservables = nope\n";
    let err = parse_config(CommandKind::SimSphere, text).unwrap_err();
    assert_eq!(err.messages.len(), 5, "{err}");
    for line in 1..=5 {
        assert!(err.messages.iter().any(|m| m.starts_with(&format!("line {line}"))), "missing line {line}: {err}");
    }
}

#[test]
fn keys_of_other_commands_are_unknown() {
    let err = parse_config(CommandKind::Spectrum, "dt = 0.1\n").unwrap_err();
    assert!(err.messages[0].contains("unknown key `dt`"));
    assert!(parse_config(CommandKind::GapScan, "n = 8\n").is_err());
    assert!(parse_config(CommandKind::Rayleigh, "command = spectrum\n").is_err());
}

#[test]
fn plan_round_trips_through_json() {
    let text = "n = 6\ngamma = -2.5\ninit = tagged\ntagged_particle = 3\ntagged_offset = 0.5, 0, 0\nfit = 0.1, 0.9\n";
    let plan = parse_config(CommandKind::SimBp, text).unwrap();
    let back: ExperimentPlan = serde_json::from_str(&serde_json::to_string(&plan).unwrap()).unwrap();
    assert_eq!(plan, back);
}

#[test]
fn spectrum_csv_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.conf", "n = 16\nmode = energy\nj_max = 4\n");
    let out = kinlab(&["spectrum", "--config", &cfg, "--out", "o"], dir.path());
    assert!(out.status.success());
    let mut rdr = csv::Reader::from_path(dir.path().join("o/spectrum.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["j", "unscaled", "scaled", "limit"]);
    let spec = ManifoldSpec::energy_only(16, 1.0).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 5);
    for r in rows {
        let j: u32 = r[0].parse().unwrap();
        let scaled: f64 = r[2].parse().unwrap();
        assert_eq!(scaled, eigenvalue_scaled(&spec, j));
        assert_eq!(r[3].parse::<f64>().unwrap(), 1.5 * j as f64);
    }
}

#[test]
fn gap_scan_writes_exponent_to_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "g.conf", "gamma = -3\nn_list = 8, 16, 32, 64\nsamples = 2000\n");
    let out = kinlab(&["gap-scan", "--config", &cfg, "--out", "o"], dir.path());
    assert!(out.status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o/manifest.json")).unwrap()).unwrap();
    assert!(manifest["results"]["exponent"].is_f64());
    assert_eq!(manifest["command"], "gap-scan");
    assert!(manifest["git_describe"].is_string());
    let csv = fs::read_to_string(dir.path().join("o/gap_scan.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn zero_duration_gives_header_only_series() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "z.conf", "n = 8\nt_end = 0\nobservables = energy, m2_12\n");
    for cmd in ["sim-sphere", "sim-bp"] {
        let out = kinlab(&[cmd, "--config", &cfg, "--out", cmd], dir.path());
        assert!(out.status.success(), "{cmd}");
        let csv = fs::read_to_string(dir.path().join(cmd).join("series.csv")).unwrap();
        assert_eq!(csv, "time,energy_mean,energy_stderr,m2_12_mean,m2_12_stderr\n");
    }
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "b.conf",
        "n = 6\nreplicas = 24\nt_end = 0.05\nrecord_every = 10\ninit = linear\ninit_matrix = 1.5, 0, 0, 0, 1, 0, 0, 0, 0.7\nobservables = m2_11, p1_deg2_diff_12\n",
    );
    let a = kinlab(&["sim-bp", "--config", &cfg, "--out", "a", "--threads", "1"], dir.path());
    let b = kinlab(&["sim-bp", "--config", &cfg, "--out", "b", "--threads", "3"], dir.path());
    assert!(a.status.success() && b.status.success());
    for f in ["series.csv", "manifest.json"] {
        let x = fs::read(dir.path().join("a").join(f)).unwrap();
        let y = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
    let c = kinlab(&["sim-bp", "--config", &cfg, "--out", "c", "--seed", "9"], dir.path());
    assert!(c.status.success());
    assert_ne!(fs::read(dir.path().join("a/series.csv")).unwrap(), fs::read(dir.path().join("c/series.csv")).unwrap());
}

#[test]
fn errors_are_json_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "e.conf", "n = 4\nn = 4\n");
    let out = kinlab(&["spectrum", "--config", &cfg], dir.path());
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "config");
    assert!(err["error"]["messages"][0].as_str().unwrap().contains("lines 1 and 2"));

    let out = kinlab(&["spectrum", "--config", "missing.conf"], dir.path());
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "io");
}

#[test]
fn json_format_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "f.conf", "points = 5\nplot = true\n");
    let out = kinlab(&["fpe-moments", "--config", &cfg, "--out", "o", "--format", "json"], dir.path());
    assert!(out.status.success());
    let rows: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o/moments.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 5);
    assert_eq!(rows[0]["mean_1"], 1.0);
    assert!(fs::read_to_string(dir.path().join("o/moments.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn recipes_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../recipes");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "conf") {
            let text = fs::read_to_string(&path).unwrap();
            let cmd = text
                .lines()
                .find_map(|l| l.split('#').next().unwrap().trim().strip_prefix("command"))
                .and_then(|rest| rest.trim().strip_prefix('='))
                .map(|c| c.trim().to_string())
                .unwrap_or_else(|| panic!("{} lacks a command line", path.display()));
            let kind = CommandKind::from_name(&cmd).unwrap();
            parse_config(kind, &text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 10);
}
